//! Model-side view of a video: channel-first frames and action fields.

use obai_env::{Rendered, VideoRecord};
use obai_nn::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Video<T> {
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor<T>,
    /// `[F, 2, H, W]` per-pixel (x, y) accelerations.
    pub fields: Tensor<T>,
    /// Ground-truth labels `F×H×W` when known.
    pub masks: Option<Vec<i32>>,
}

impl<T: Real> Video<T> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn from_record(rec: &VideoRecord) -> Self {
        let (f, h, w) = (rec.frames_count, rec.height, rec.width);
        let p = h * w;
        let mut frames = vec![T::zero(); f * 3 * p];
        let mut fields = vec![T::zero(); f * 2 * p];
        for t in 0..f {
            for i in 0..p {
                for c in 0..3 {
                    frames[(t * 3 + c) * p + i] = T::from_f64(rec.frames[(t * p + i) * 3 + c] as f64);
                }
                for c in 0..2 {
                    fields[(t * 2 + c) * p + i] = T::from_f64(rec.action_fields[(t * p + i) * 2 + c] as f64);
                }
            }
        }
        Self {
            frames: Tensor::new(&[f, 3, h, w], frames).expect("frame shape"),
            fields: Tensor::new(&[f, 2, h, w], fields).expect("field shape"),
            masks: Some(rec.masks.clone()),
        }
    }

    /// A single still frame with no action.
    pub fn from_rendered(r: &Rendered) -> Self {
        let (h, w) = (r.height, r.width);
        let p = h * w;
        let mut frames = vec![T::zero(); 3 * p];
        for i in 0..p {
            for c in 0..3 {
                frames[c * p + i] = T::from_f64(r.rgb[i * 3 + c] as f64);
            }
        }
        Self {
            frames: Tensor::new(&[1, 3, h, w], frames).expect("frame shape"),
            fields: Tensor::zeros(&[1, 2, h, w]),
            masks: Some(r.mask.clone()),
        }
    }

    /// Frames `start..start+len` as a shorter video.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let p = self.height() * self.width();
        Self {
            frames: self.frames.slice_axis(0, start, len),
            fields: self.fields.slice_axis(0, start, len),
            masks: self.masks.as_ref().map(|m| m[start * p..(start + len) * p].to_vec()),
        }
    }

    /// Channel-last copy of frame `t` for image output.
    pub fn frame_hwc(&self, t: usize) -> Vec<f32> {
        chw_to_hwc(&self.frames.data()[t * 3 * self.height() * self.width()..], 3, self.height() * self.width())
    }

    pub fn cast<U: Real>(&self) -> Video<U> {
        Video {
            frames: self.frames.cast(),
            fields: self.fields.cast(),
            masks: self.masks.clone(),
        }
    }
}

/// `C×P` planes to `P×C` interleaved, reading the first `C·P` values.
pub fn chw_to_hwc<T: Real>(data: &[T], channels: usize, pixels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels * pixels];
    for c in 0..channels {
        for i in 0..pixels {
            out[i * channels + c] = data[c * pixels + i].as_f64() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use obai_env::{generate_video, DatasetConfig};

    use super::*;

    #[test]
    fn record_conversion_moves_channels_first() {
        let cfg = DatasetConfig {
            n_videos: 1,
            frames: 3,
            height: 8,
            width: 10,
            n_objects: 2,
            seed: 0,
            static_objects: false,
        };
        let rec = generate_video(&cfg, 4).unwrap();
        let v = Video::<f32>::from_record(&rec);
        assert_eq!(v.frames.shape(), &[3, 3, 8, 10]);
        assert_eq!(v.frame_hwc(2), rec.frame(2));
        let (t, i) = (1, 17);
        assert_eq!(v.fields.data()[(t * 2 + 1) * 80 + i], rec.action_fields[(t * 80 + i) * 2 + 1]);
        let w = v.window(1, 2);
        assert_eq!(w.len(), 2);
        assert_eq!(w.frame_hwc(0), rec.frame(1));
    }
}
