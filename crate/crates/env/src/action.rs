//! Action fields: per-pixel 2-D accelerations. An object receives the sum of
//! the accelerations at its visible pixels.

use rand::Rng;

use crate::scene::{accel_pair, EnvState};

/// Dense `H×W` grid of `(x, y)` accelerations in pixels/frame².
#[derive(Clone, Debug, PartialEq)]
pub struct ActionField {
    pub height: usize,
    pub width: usize,
    accels: Vec<[f64; 2]>,
}

impl ActionField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            accels: vec![[0.0; 2]; height * width],
        }
    }

    /// Build from interleaved `(x, y)` values, `H×W×2`.
    pub fn from_interleaved(height: usize, width: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), height * width * 2);
        Self {
            height,
            width,
            accels: data.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
        }
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        self.accels.iter().flat_map(|a| [a[0] as f32, a[1] as f32]).collect()
    }

    pub fn get(&self, pixel: usize) -> [f64; 2] {
        self.accels[pixel]
    }

    pub fn set(&mut self, pixel: usize, accel: [f64; 2]) {
        self.accels[pixel] = accel;
    }

    pub fn add(&mut self, pixel: usize, accel: [f64; 2]) {
        self.accels[pixel][0] += accel[0];
        self.accels[pixel][1] += accel[1];
    }

    pub fn accels(&self) -> &[[f64; 2]] {
        &self.accels
    }

    pub fn nonzero_pixels(&self) -> Vec<usize> {
        self.accels
            .iter()
            .enumerate()
            .filter(|(_, a)| a[0] != 0.0 || a[1] != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.accels.iter().all(|a| a[0] == 0.0 && a[1] == 0.0)
    }
}

/// Result of sampling a training-time action field.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledField {
    pub field: ActionField,
    /// Objects with no visible pixel, which therefore received no acceleration.
    pub unactuated: Vec<usize>,
}

/// One Normal(0, sd²) acceleration on a uniformly chosen visible pixel of
/// every visible object, plus one on a uniformly chosen background pixel.
/// Draw order: objects by index, then the background.
pub fn sample_action_field<R: Rng + ?Sized>(state: &EnvState, mask: &[i32], accel_sd: f64, rng: &mut R) -> SampledField {
    let (h, w) = (state.height, state.width);
    assert_eq!(mask.len(), h * w, "mask does not match the state's frame");
    let mut field = ActionField::zeros(h, w);
    let mut unactuated = Vec::new();
    let mut place = |label: i32, rng: &mut R| -> bool {
        let pixels: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == label)
            .map(|(i, _)| i)
            .collect();
        if pixels.is_empty() {
            return false;
        }
        let p = pixels[rng.random_range(0..pixels.len())];
        field.set(p, accel_pair(rng, accel_sd));
        true
    };
    for k in 0..state.objects.len() {
        if !place(k as i32 + 1, rng) {
            unactuated.push(k);
        }
    }
    place(0, rng);
    SampledField { field, unactuated }
}

/// Ground-truth object action: the exact sum of accelerations on the
/// object's visible pixels.
pub fn object_action_from_field(field: &ActionField, mask: &[i32], object: usize) -> [f64; 2] {
    let label = object as i32 + 1;
    let mut a = [0.0; 2];
    for (acc, &m) in field.accels().iter().zip(mask) {
        if m == label {
            a[0] += acc[0];
            a[1] += acc[1];
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_gives_zero_action() {
        let f = ActionField::zeros(4, 4);
        assert_eq!(object_action_from_field(&f, &[1; 16], 0), [0.0, 0.0]);
    }

    #[test]
    fn single_and_summed_accelerations() {
        let mut mask = vec![0; 16];
        mask[5] = 1;
        mask[6] = 1;
        mask[9] = 2;
        let mut f = ActionField::zeros(4, 4);
        f.set(5, [2.0, -1.0]);
        assert_eq!(object_action_from_field(&f, &mask, 0), [2.0, -1.0]);
        f.set(5, [1.0, 1.0]);
        f.set(6, [0.5, -0.25]);
        assert_eq!(object_action_from_field(&f, &mask, 0), [1.5, 0.75]);
        assert_eq!(object_action_from_field(&f, &mask, 1), [0.0, 0.0]);
    }

    #[test]
    fn interleaved_round_trip() {
        let mut f = ActionField::zeros(2, 3);
        f.set(4, [1.25, -3.5]);
        let back = ActionField::from_interleaved(2, 3, &f.to_interleaved());
        assert_eq!(back, f);
    }
}
