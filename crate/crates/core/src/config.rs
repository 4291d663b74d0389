use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ObaiError;

/// Architecture and likelihood hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Number of object slots K.
    pub slots: usize,
    /// Dimension of s; the generalized state s† has twice as many.
    pub latent: usize,
    pub dec_channels: usize,
    pub dec_layers: usize,
    pub kernel: usize,
    pub ref_channels: usize,
    pub ref_hidden: usize,
    pub ref_lstm: usize,
    pub act_lstm: usize,
    pub sigma_o: f64,
    pub sigma_s: f64,
    pub sigma_psi: f64,
    pub beta: f64,
    pub iters_per_frame: usize,
    /// Include the action likelihood and latent dynamics terms. Off for the
    /// static-image ablation, which keeps only the standard-Normal prior.
    pub dynamics: bool,
}

impl ModelConfig {
    /// The published architecture at a given frame size.
    pub fn standard(height: usize, width: usize, slots: usize) -> Self {
        Self {
            height,
            width,
            slots,
            latent: 16,
            dec_channels: 32,
            dec_layers: 4,
            kernel: 5,
            ref_channels: 32,
            ref_hidden: 128,
            ref_lstm: 128,
            act_lstm: 32,
            sigma_o: 0.3,
            sigma_s: 0.1,
            sigma_psi: 0.3,
            beta: 5.0,
            iters_per_frame: 4,
            dynamics: true,
        }
    }

    /// Same structure with narrow layers, for finite-difference checks.
    pub fn tiny(height: usize, width: usize, slots: usize, latent: usize) -> Self {
        Self {
            latent,
            dec_channels: 4,
            ref_channels: 3,
            ref_hidden: 6,
            ref_lstm: 5,
            act_lstm: 4,
            ..Self::standard(height, width, slots)
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.latent
    }

    /// Side length the refinement input is pooled to before the strided
    /// convolutions: 40 at 64 px, scaled proportionally elsewhere.
    pub fn ref_pool(&self) -> usize {
        let m = self.height.min(self.width) as f64;
        ((40.0 * m / 64.0).round() as usize).max(1)
    }

    /// Spatial side after the three stride-2 convolutions.
    pub fn ref_conv_side(&self) -> usize {
        let mut n = self.ref_pool();
        for _ in 0..3 {
            n = (n + 2 * (self.kernel / 2) - self.kernel) / 2 + 1;
        }
        n
    }

    pub fn ref_flatten(&self) -> usize {
        self.ref_channels * self.ref_conv_side().pow(2)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), ObaiError> {
        let bad = |m: String| Err(ObaiError::Config(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("frame {}×{} too small", self.height, self.width));
        }
        if self.slots == 0 || self.latent == 0 {
            return bad("slots and latent must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd".into());
        }
        for (n, v) in [("sigma_o", self.sigma_o), ("sigma_s", self.sigma_s), ("sigma_psi", self.sigma_psi)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{n} must be positive, got {v}"));
            }
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.iters_per_frame == 0 {
            return bad("iters_per_frame must be at least 1".into());
        }
        Ok(())
    }
}

fn fields<S: Serialize>(cfg: &S) -> serde_json::Map<String, serde_json::Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        serde_json::Value::Object(m) => m,
        _ => panic!("configs serialize to flat objects"),
    }
}

/// Flat `key = value` lines, one per field, in declaration order.
pub fn to_kv<S: Serialize>(cfg: &S) -> String {
    fields(cfg).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Override fields of `cfg` from `key = value` text. Blank lines and `#`
/// comments are skipped; unknown keys and ill-typed values are errors.
pub fn apply_kv<S: Serialize + DeserializeOwned>(cfg: &S, text: &str) -> Result<S, ObaiError> {
    let mut map = fields(cfg);
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ObaiError::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !map.contains_key(k) {
            return Err(ObaiError::Config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        map.insert(k.to_string(), value);
    }
    serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| ObaiError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip_and_overrides() {
        let c = ModelConfig::standard(32, 32, 3);
        assert_eq!(apply_kv(&c, &to_kv(&c)).unwrap(), c);
        let d = apply_kv(&c, "# smaller\nlatent = 8\n\nbeta=2.5").unwrap();
        assert_eq!((d.latent, d.beta), (8, 2.5));
        assert!(apply_kv(&c, "latnet = 8").is_err());
        assert!(apply_kv(&c, "latent = eight").is_err());
        assert!(apply_kv(&c, "latent").is_err());
    }

    #[test]
    fn refinement_flatten_is_800_at_64px() {
        let c = ModelConfig::standard(64, 64, 4);
        assert_eq!(c.ref_pool(), 40);
        assert_eq!(c.ref_flatten(), 800);
        assert_eq!(c.state_dim(), 32);
    }

    #[test]
    fn smaller_frames_pool_proportionally() {
        let c = ModelConfig::standard(32, 32, 3);
        assert_eq!(c.ref_pool(), 20);
        assert_eq!(c.ref_conv_side(), 3);
        assert_eq!(ModelConfig::tiny(8, 8, 2, 4).ref_conv_side(), 1);
    }

    #[test]
    fn non_positive_noise_is_rejected() {
        let mut c = ModelConfig::standard(32, 32, 3);
        c.sigma_s = 0.0;
        assert!(c.validate().is_err());
    }
}
