//! PNG output for inspection: a small tile canvas plus dataset export.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::VideoRecord;
use crate::error::EnvError;

/// Distinct label colors; label 0 (background) is dark gray.
pub const PALETTE: [[u8; 3]; 9] = [
    [40, 40, 40],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn label_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grid of equally sized tiles with a one-pixel white gutter, nearest-
/// neighbour upscaled by `scale`.
pub struct Canvas {
    image: RgbImage,
    tile_h: usize,
    tile_w: usize,
    scale: usize,
}

impl Canvas {
    pub fn new(rows: usize, cols: usize, tile_h: usize, tile_w: usize, scale: usize) -> Self {
        let scale = scale.max(1);
        let w = cols * (tile_w * scale + 1) + 1;
        let h = rows * (tile_h * scale + 1) + 1;
        Self {
            image: RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255])),
            tile_h,
            tile_w,
            scale,
        }
    }

    fn put(&mut self, row: usize, col: usize, mut color: impl FnMut(usize) -> [u8; 3]) {
        let s = self.scale;
        let x0 = col * (self.tile_w * s + 1) + 1;
        let y0 = row * (self.tile_h * s + 1) + 1;
        for y in 0..self.tile_h * s {
            for x in 0..self.tile_w * s {
                let c = color((y / s) * self.tile_w + x / s);
                self.image.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(c));
            }
        }
    }

    /// `rgb` is `H×W×3` in `[0,1]`.
    pub fn rgb(&mut self, row: usize, col: usize, rgb: &[f32]) {
        assert_eq!(rgb.len(), self.tile_h * self.tile_w * 3);
        self.put(row, col, |p| [to_u8(rgb[p * 3]), to_u8(rgb[p * 3 + 1]), to_u8(rgb[p * 3 + 2])]);
    }

    /// Single-channel intensity in `[0,1]`.
    pub fn gray(&mut self, row: usize, col: usize, v: &[f32]) {
        assert_eq!(v.len(), self.tile_h * self.tile_w);
        self.put(row, col, |p| [to_u8(v[p]); 3]);
    }

    pub fn labels(&mut self, row: usize, col: usize, labels: &[i32]) {
        assert_eq!(labels.len(), self.tile_h * self.tile_w);
        self.put(row, col, |p| label_color(labels[p].max(0) as usize));
    }

    /// Action field as arrows-free heat map: red/green encode x/y sign and
    /// magnitude relative to `max_abs`, non-zero pixels stand out on black.
    pub fn field(&mut self, row: usize, col: usize, xy: &[f32], max_abs: f32) {
        assert_eq!(xy.len(), self.tile_h * self.tile_w * 2);
        let m = if max_abs > 0.0 { max_abs } else { 1.0 };
        self.put(row, col, |p| {
            let (x, y) = (xy[p * 2], xy[p * 2 + 1]);
            if x == 0.0 && y == 0.0 {
                return [0, 0, 0];
            }
            [to_u8(0.5 + 0.5 * x / m), to_u8(0.5 + 0.5 * y / m), 255]
        });
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| EnvError::io(dir, e))?;
        }
        self.image.save(path).map_err(|e| EnvError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.image.dimensions()
    }
}

/// Frames on the first row, mask overlays on the second, action fields on
/// the third.
pub fn export_video(rec: &VideoRecord, path: &Path) -> Result<(), EnvError> {
    let f = rec.frames_count;
    let mut c = Canvas::new(3, f, rec.height, rec.width, 4);
    let max_abs = rec.action_fields.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for t in 0..f {
        c.rgb(0, t, rec.frame(t));
        c.labels(1, t, rec.mask(t));
        c.field(2, t, rec.action_slice(t), max_abs);
    }
    c.save(path)
}
