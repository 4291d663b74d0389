//! Video generation and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and one binary record per video
//! under `videos/{index:06}.adsp`. A record is a 64-byte little-endian header
//!
//! | bytes  | content                                         |
//! |--------|-------------------------------------------------|
//! | 0..8   | magic `ADSP1\0\0\0`                             |
//! | 8..24  | `u32` F, H, W, N                                |
//! | 24..56 | `u64` offsets of frames, masks, actions, states |
//! | 56..64 | `u64` video seed                                |
//!
//! followed by C-order sections: frames `F×H×W×3 f32`, masks `F×H×W i32`,
//! action fields `F×H×W×2 f32`, true states `F×(1+10N) f32` (background gray,
//! then per object shape id, size, r, g, b, x, y, vx, vy, depth rank).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{sample_action_field, ActionField};
use crate::dynamics::step;
use crate::error::EnvError;
use crate::render::render;
use crate::scene::{sample_scene, EnvState, ObjectSpec, SceneConfig, Shape};

pub const MAGIC: [u8; 8] = *b"ADSP1\0\0\0";
pub const HEADER_LEN: usize = 64;
pub const FORMAT: &str = "adsp-dataset";
pub const VERSION: u32 = 1;
/// Frame index that carries the (only) non-zero action field.
pub const ACTION_FRAME: usize = 1;
const STATE_FIELDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub seed: u64,
    /// Zero initial velocities (used for static goal scenes).
    #[serde(default)]
    pub static_objects: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_videos: 100,
            frames: 4,
            height: 64,
            width: 64,
            n_objects: 3,
            seed: 0,
            static_objects: false,
        }
    }
}

impl DatasetConfig {
    pub fn scene_config(&self) -> SceneConfig {
        let cfg = SceneConfig::for_frame(self.height, self.width, self.n_objects);
        if self.static_objects {
            cfg.static_objects()
        } else {
            cfg
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.frames == 0 {
            return Err(EnvError::Config("frames must be at least 1".into()));
        }
        self.scene_config().validate()
    }
}

/// Substream seed for one video: SplitMix64 finalizer over the pair.
pub fn video_seed(dataset_seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(dataset_seed.wrapping_add(mix(index.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub frames_count: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    /// `F×H×W×3`.
    pub frames: Vec<f32>,
    /// `F×H×W`, 0 background, `i + 1` object `i`.
    pub masks: Vec<i32>,
    /// `F×H×W×2`.
    pub action_fields: Vec<f32>,
    pub states: Vec<EnvState>,
    pub seed: u64,
    /// Objects that were fully occluded when the action field was drawn.
    pub unactuated: Vec<usize>,
}

impl VideoRecord {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.pixels() * 3;
        &self.frames[f * n..(f + 1) * n]
    }

    pub fn mask(&self, f: usize) -> &[i32] {
        let n = self.pixels();
        &self.masks[f * n..(f + 1) * n]
    }

    pub fn action_field(&self, f: usize) -> ActionField {
        let n = self.pixels() * 2;
        ActionField::from_interleaved(self.height, self.width, &self.action_fields[f * n..(f + 1) * n])
    }

    pub fn action_slice(&self, f: usize) -> &[f32] {
        let n = self.pixels() * 2;
        &self.action_fields[f * n..(f + 1) * n]
    }

    pub fn encode(&self) -> Vec<u8> {
        let (f, p, n) = (self.frames_count, self.pixels(), self.n_objects);
        let state_len = f * (1 + STATE_FIELDS * n);
        let off_frames = HEADER_LEN;
        let off_masks = off_frames + f * p * 3 * 4;
        let off_actions = off_masks + f * p * 4;
        let off_states = off_actions + f * p * 2 * 4;
        let total = off_states + state_len * 4;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&MAGIC);
        for v in [f, self.height, self.width, n] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in [off_frames, off_masks, off_actions, off_states] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        self.frames.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.masks.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.action_fields.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for s in &self.states {
            out.extend_from_slice(&(s.background_gray as f32).to_le_bytes());
            for o in &s.objects {
                let row = [
                    o.shape.id() as f32,
                    o.size as f32,
                    o.color[0] as f32,
                    o.color[1] as f32,
                    o.color[2] as f32,
                    o.position[0] as f32,
                    o.position[1] as f32,
                    o.velocity[0] as f32,
                    o.velocity[1] as f32,
                    o.depth_rank as f32,
                ];
                row.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        debug_assert_eq!(out.len(), total);
        out
    }

    /// Parse a record. States come back at `f32` precision.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, EnvError> {
        let bad = |msg: &str| EnvError::format(path, msg);
        if bytes.len() < HEADER_LEN || bytes[..8] != MAGIC {
            return Err(bad("missing ADSP1 header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (f, h, w, n) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let offs: Vec<usize> = (0..4).map(|i| u64_at(24 + 8 * i) as usize).collect();
        let seed = u64_at(56);
        let p = h * w;
        let state_len = f * (1 + STATE_FIELDS * n);
        let lens = [f * p * 3, f * p, f * p * 2, state_len];
        for (o, l) in offs.iter().zip(lens) {
            if o.checked_add(l * 4).is_none_or(|end| end > bytes.len()) {
                return Err(bad("section runs past end of file"));
            }
        }
        let f32s = |o: usize, l: usize| -> Vec<f32> {
            bytes[o..o + 4 * l]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let frames = f32s(offs[0], lens[0]);
        let masks: Vec<i32> = bytes[offs[1]..offs[1] + 4 * lens[1]]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let action_fields = f32s(offs[2], lens[2]);
        let raw = f32s(offs[3], lens[3]);
        let mut states = Vec::with_capacity(f);
        for row in raw.chunks_exact(1 + STATE_FIELDS * n) {
            let mut objects = Vec::with_capacity(n);
            for o in row[1..].chunks_exact(STATE_FIELDS) {
                let shape = Shape::from_id(o[0] as u32).ok_or_else(|| bad("unknown shape id"))?;
                objects.push(ObjectSpec {
                    shape,
                    size: o[1] as f64,
                    color: [o[2] as f64, o[3] as f64, o[4] as f64],
                    position: [o[5] as f64, o[6] as f64],
                    velocity: [o[7] as f64, o[8] as f64],
                    depth_rank: o[9] as usize,
                });
            }
            states.push(EnvState {
                objects,
                background_gray: row[0] as f64,
                height: h,
                width: w,
            });
        }
        Ok(Self {
            frames_count: f,
            height: h,
            width: w,
            n_objects: n,
            frames,
            masks,
            action_fields,
            states,
            seed,
            unactuated: Vec::new(),
        })
    }
}

/// Simulate one video from its seed. The action field is drawn at
/// [`ACTION_FRAME`] from that frame's masks; every other field is zero.
pub fn generate_video(cfg: &DatasetConfig, seed: u64) -> Result<VideoRecord, EnvError> {
    cfg.validate()?;
    let scene_cfg = cfg.scene_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sample_scene(&mut rng, &scene_cfg)?;
    let (h, w, f) = (cfg.height, cfg.width, cfg.frames);
    let p = h * w;
    let mut rec = VideoRecord {
        frames_count: f,
        height: h,
        width: w,
        n_objects: cfg.n_objects,
        frames: Vec::with_capacity(f * p * 3),
        masks: Vec::with_capacity(f * p),
        action_fields: Vec::with_capacity(f * p * 2),
        states: Vec::with_capacity(f),
        seed,
        unactuated: Vec::new(),
    };
    for t in 0..f {
        let r = render(&state);
        let field = if t == ACTION_FRAME {
            let sampled = sample_action_field(&state, &r.mask, scene_cfg.accel_sd, &mut rng);
            rec.unactuated = sampled.unactuated;
            sampled.field
        } else {
            ActionField::zeros(h, w)
        };
        rec.frames.extend_from_slice(&r.rgb);
        rec.masks.extend_from_slice(&r.mask);
        rec.action_fields.extend(field.to_interleaved());
        let next = step(&state, &field, &r.mask);
        rec.states.push(state);
        state = next;
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    /// Sampling ranges actually used, for auditing.
    pub scene: SceneConfig,
    pub action_frame: usize,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    /// Per video, objects left without an acceleration because they were
    /// fully occluded at the action frame.
    pub unactuated: Vec<Vec<usize>>,
}

pub fn record_file_name(index: usize) -> String {
    format!("videos/{index:06}.adsp")
}

/// Generate every video in parallel and write the dataset directory.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest, EnvError> {
    cfg.validate()?;
    let videos = out_dir.join("videos");
    fs::create_dir_all(&videos).map_err(|e| EnvError::io(&videos, e))?;
    let results: Vec<(u64, String, Vec<usize>)> = (0..cfg.n_videos)
        .into_par_iter()
        .map(|i| {
            let seed = video_seed(cfg.seed, i as u64);
            let rec = generate_video(cfg, seed)?;
            let name = record_file_name(i);
            let path = out_dir.join(&name);
            fs::write(&path, rec.encode()).map_err(|e| EnvError::io(&path, e))?;
            Ok((seed, name, rec.unactuated))
        })
        .collect::<Result<_, EnvError>>()?;
    let mut manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        scene: cfg.scene_config(),
        action_frame: ACTION_FRAME,
        seeds: Vec::with_capacity(results.len()),
        files: Vec::with_capacity(results.len()),
        unactuated: Vec::with_capacity(results.len()),
    };
    for (seed, name, un) in results {
        manifest.seeds.push(seed);
        manifest.files.push(name);
        manifest.unactuated.push(un);
    }
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| EnvError::io(&path, e))?;
    Ok(manifest)
}

/// Read access to a generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, EnvError> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| EnvError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| EnvError::format(&path, e.to_string()))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(EnvError::format(
                &path,
                format!("unsupported dataset {} v{}", manifest.format, manifest.version),
            ));
        }
        if manifest.files.len() != manifest.seeds.len() {
            return Err(EnvError::format(&path, "seed and file lists differ in length"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.files.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<VideoRecord, EnvError> {
        let name = self
            .manifest
            .files
            .get(index)
            .ok_or_else(|| EnvError::format(&self.root, format!("video {index} out of range")))?;
        let path = self.root.join(name);
        let bytes = fs::read(&path).map_err(|e| EnvError::io(&path, e))?;
        let mut rec = VideoRecord::decode(&bytes, &path)?;
        rec.unactuated = self.manifest.unactuated.get(index).cloned().unwrap_or_default();
        Ok(rec)
    }
}
