//! Composite PNG figures: scene decompositions, predictions and plans.

use std::path::Path;

use anyhow::Result;
use obai::model::DecodeValues;
use obai::planner::Plan;
use obai::{ObaiError, Video};
use obai_env::png::Canvas;
use obai_nn::Real;

const SCALE: usize = 4;

fn save(c: &Canvas, path: &Path) -> Result<()> {
    c.save(path).map_err(ObaiError::from)?;
    Ok(())
}

/// One column per frame. Rows: input, reconstruction, inferred segmentation,
/// ground truth (when known), then each slot's mask-weighted appearance.
pub fn decomposition<T: Real>(video: &Video<T>, dec: &DecodeValues, path: &Path) -> Result<()> {
    let (h, w, k) = (dec.height, dec.width, dec.slots);
    let p = h * w;
    let truth = video.masks.as_ref();
    let rows = 3 + usize::from(truth.is_some()) + k;
    let mut c = Canvas::new(rows, dec.frames, h, w, SCALE);
    for t in 0..dec.frames {
        c.rgb(0, t, &video.frame_hwc(t));
        c.rgb(1, t, &dec.recon_hwc(t));
        c.labels(2, t, &dec.labels(t));
        let mut row = 3;
        if let Some(m) = truth {
            c.labels(row, t, &m[t * p..(t + 1) * p]);
            row += 1;
        }
        for j in 0..k {
            let rgb = dec.slot_rgb_hwc(t, j);
            let m = dec.mask(t, j);
            let weighted: Vec<f32> = rgb.iter().enumerate().map(|(i, v)| v * m[i / 3] as f32).collect();
            c.rgb(row + j, t, &weighted);
        }
    }
    save(&c, path)
}

/// Top row: ground truth over the whole video; second row: reconstruction
/// of the observed frames followed by the predictions.
pub fn prediction<T: Real>(video: &Video<T>, recon: &DecodeValues, predicted: &[DecodeValues], path: &Path) -> Result<()> {
    let (h, w) = (recon.height, recon.width);
    let cols = recon.frames + predicted.len();
    let mut c = Canvas::new(3, cols, h, w, SCALE);
    for t in 0..cols.min(video.len()) {
        c.rgb(0, t, &video.frame_hwc(t));
    }
    for t in 0..recon.frames {
        c.rgb(1, t, &recon.recon_hwc(t));
        c.labels(2, t, &recon.labels(t));
    }
    for (i, d) in predicted.iter().enumerate() {
        c.rgb(1, recon.frames + i, &d.recon_hwc(0));
        c.labels(2, recon.frames + i, &d.labels(0));
    }
    save(&c, path)
}

/// Input, reconstruction, segmentation, action field, imagined outcome and
/// its segmentation, side by side.
pub fn plan<T: Real>(video: &Video<T>, p: &Plan, path: &Path) -> Result<()> {
    let (h, w) = (p.current.height, p.current.width);
    let mut c = Canvas::new(1, 6, h, w, SCALE);
    c.rgb(0, 0, &video.frame_hwc(0));
    c.rgb(0, 1, &p.current.recon_hwc(0));
    c.labels(0, 2, &p.current.labels(0));
    let field = p.placement.field.to_interleaved();
    let max_abs = field.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    c.field(0, 3, &field, max_abs);
    c.rgb(0, 4, &p.imagined.recon_hwc(0));
    c.labels(0, 5, &p.imagined.labels(0));
    save(&c, path)
}
