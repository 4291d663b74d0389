//! Ground-truth scene description and the scene sampler.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    pub fn id(self) -> u32 {
        match self {
            Shape::Square => 0,
            Shape::Ellipse => 1,
            Shape::Heart => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Whether the point at offset `(dx, dy)` (pixels, image y pointing down)
    /// from the shape center lies inside a shape of the given size.
    pub fn covers(self, size: f64, dx: f64, dy: f64) -> bool {
        let half = 0.5 * size;
        match self {
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            Shape::Ellipse => {
                let (rx, ry) = (half, 0.3 * size);
                (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
            }
            Shape::Heart => {
                // (u² + v² − 1)³ − u²v³ ≤ 0 spans u ∈ [−1.139, 1.139],
                // v ∈ [−1, 1.236]; scale the taller extent to `size` and
                // center the bounding box on the object position.
                let scale = 2.236 / size;
                let u = dx * scale;
                let v = -dy * scale + 0.118;
                let r = u * u + v * v - 1.0;
                r * r * r - u * u * v * v * v <= 0.0
            }
        }
    }

    /// Half-width of an axis-aligned box that contains the shape.
    pub fn extent(self, size: f64) -> f64 {
        match self {
            Shape::Square | Shape::Ellipse => 0.5 * size + 1.0,
            Shape::Heart => 0.55 * size + 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub size: f64,
    pub color: [f64; 3],
    /// Center in continuous pixel coordinates; pixel `(x, y)` spans
    /// `[x, x+1) × [y, y+1)`.
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    /// 0 is nearest to the viewer.
    pub depth_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub objects: Vec<ObjectSpec>,
    pub background_gray: f64,
    pub height: usize,
    pub width: usize,
}

impl EnvState {
    pub fn empty(height: usize, width: usize, background_gray: f64) -> Self {
        Self {
            objects: Vec::new(),
            background_gray,
            height,
            width,
        }
    }

    /// Object indices ordered front to back.
    pub fn depth_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&i| (self.objects[i].depth_rank, i));
        idx
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut ranks: Vec<usize> = self.objects.iter().map(|o| o.depth_rank).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| i != r) {
            return Err(EnvError::InvalidState("depth ranks are not a permutation of 0..N".into()));
        }
        for o in &self.objects {
            if !(o.size > 0.0) {
                return Err(EnvError::InvalidState(format!("object size {} must be positive", o.size)));
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(EnvError::InvalidState(format!("color {:?} outside [0,1]", o.color)));
            }
        }
        if !(0.0..=1.0).contains(&self.background_gray) {
            return Err(EnvError::InvalidState("background gray outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Sampling ranges for new scenes. Defaults follow the 64×64 setting;
/// [`SceneConfig::for_frame`] rescales sizes to other frame sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub height: usize,
    pub width: usize,
    pub size_range: (f64, f64),
    pub color_levels: Vec<f64>,
    pub velocity_sd: f64,
    pub accel_sd: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 3,
            height: 64,
            width: 64,
            size_range: (12.0, 25.0),
            color_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            velocity_sd: 4.0,
            accel_sd: 4.0,
        }
    }
}

impl SceneConfig {
    pub const MIN_FRAME: usize = 8;

    /// Defaults with sizes and motion scaled by `min(h, w) / 64`.
    pub fn for_frame(height: usize, width: usize, n_objects: usize) -> Self {
        let d = Self::default();
        let s = height.min(width) as f64 / 64.0;
        Self {
            n_objects,
            height,
            width,
            size_range: (d.size_range.0 * s, d.size_range.1 * s),
            velocity_sd: d.velocity_sd * s,
            accel_sd: d.accel_sd * s,
            ..d
        }
    }

    /// Same ranges with zero initial velocity.
    pub fn static_objects(mut self) -> Self {
        self.velocity_sd = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.height < Self::MIN_FRAME || self.width < Self::MIN_FRAME {
            return Err(EnvError::Config(format!(
                "frame {}×{} is smaller than the {} px minimum",
                self.height,
                self.width,
                Self::MIN_FRAME
            )));
        }
        if self.n_objects == 0 {
            return Err(EnvError::Config("n_objects must be at least 1".into()));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return Err(EnvError::Config(format!("invalid size range {:?}", self.size_range)));
        }
        if self.color_levels.is_empty() || self.color_levels.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(EnvError::Config("color levels must be non-empty and within [0,1]".into()));
        }
        if self.velocity_sd < 0.0 || self.accel_sd < 0.0 {
            return Err(EnvError::Config("standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

fn normal_pair<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> [f64; 2] {
    if sd == 0.0 {
        return [0.0, 0.0];
    }
    let n = Normal::new(0.0, sd).expect("finite sd");
    [n.sample(rng), n.sample(rng)]
}

pub(crate) fn accel_pair<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> [f64; 2] {
    // Rounded through f32 so stored records reproduce the simulated values.
    let [x, y] = normal_pair(rng, sd);
    [x as f32 as f64, y as f32 as f64]
}

/// Draw a fresh scene. The order of random draws is fixed: per object
/// (shape, size, color r/g/b, position x/y, velocity x/y), then the depth
/// permutation, then the background gray.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<EnvState, EnvError> {
    cfg.validate()?;
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let size = if cfg.size_range.0 == cfg.size_range.1 {
            cfg.size_range.0
        } else {
            rng.random_range(cfg.size_range.0..=cfg.size_range.1)
        };
        let mut color = [0.0; 3];
        for c in &mut color {
            *c = cfg.color_levels[rng.random_range(0..cfg.color_levels.len())];
        }
        let position = [
            rng.random_range(0.0..cfg.width as f64),
            rng.random_range(0.0..cfg.height as f64),
        ];
        let velocity = normal_pair(rng, cfg.velocity_sd);
        objects.push(ObjectSpec {
            shape,
            size,
            color,
            position,
            velocity,
            depth_rank: 0,
        });
    }
    let mut ranks: Vec<usize> = (0..cfg.n_objects).collect();
    ranks.shuffle(rng);
    for (o, r) in objects.iter_mut().zip(ranks) {
        o.depth_rank = r;
    }
    let background_gray = rng.random_range(0.0..=1.0);
    Ok(EnvState {
        objects,
        background_gray,
        height: cfg.height,
        width: cfg.width,
    })
}
