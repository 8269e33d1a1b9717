//! Two-scale retina: a fine patch and a downscaled context patch of the same
//! side, both centred on one image location.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Normalised image coordinates. `(-1, -1)` is the centre of the top-left
/// pixel, `(1, 1)` the centre of the bottom-right one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const CENTER: Location = Location { x: 0.0, y: 0.0 };

    /// Builds a location, clamping both components into `[-1, 1]`.
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x: clamp_unit(x),
            y: clamp_unit(y),
        }
    }

    pub fn to_pixel(self, side: usize) -> (f64, f64) {
        loc_to_pixel(self, side)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Maps a location to fractional `(row, col)` pixel coordinates.
pub fn loc_to_pixel(loc: Location, side: usize) -> (f64, f64) {
    let span = side.saturating_sub(1) as f64;
    let row = (loc.y + 1.0) / 2.0 * span;
    let col = (loc.x + 1.0) / 2.0 * span;
    (row, col)
}

/// Inverse of [`loc_to_pixel`].
pub fn pixel_to_loc(row: f64, col: f64, side: usize) -> Location {
    let span = side.saturating_sub(1).max(1) as f64;
    Location::new(col / span * 2.0 - 1.0, row / span * 2.0 - 1.0)
}

/// Integer pixel a window is anchored on: round half up.
pub fn anchor_pixel(loc: Location, side: usize) -> (i64, i64) {
    let (r, c) = loc_to_pixel(loc, side);
    ((r + 0.5).floor() as i64, (c + 0.5).floor() as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseConfig {
    /// Side of both output patches in pixels.
    pub size: usize,
    /// Ratio of the context window side to the fine window side.
    pub scale: usize,
    /// Value read for pixels outside the image.
    pub pad_value: f64,
}

impl Default for GlimpseConfig {
    fn default() -> Self {
        Self {
            size: 12,
            scale: 2,
            pad_value: 0.0,
        }
    }
}

impl GlimpseConfig {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("glimpse size {} < 2", self.size)));
        }
        if self.scale < 1 {
            return Err(Error::Config("glimpse scale must be >= 1".into()));
        }
        if self.size * self.scale > image_side {
            return Err(Error::Config(format!(
                "context window {} exceeds image side {image_side}",
                self.size * self.scale
            )));
        }
        Ok(())
    }
}

/// The observation handed to the encoder at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Glimpse {
    /// `[1×g×g]` crop at native resolution.
    pub fine: Tensor,
    /// `[1×g×g]` average-pooled crop of the `(g·scale)`-sided window.
    pub coarse: Tensor,
    pub center: Location,
}

/// Side of a square single-channel image `[1×S×S]`.
pub fn image_side(image: &Tensor) -> Result<usize> {
    match image.shape() {
        [1, h, w] if h == w => Ok(*h),
        s => dim_err(format!("expected a square grayscale image [1, S, S], got {s:?}")),
    }
}

/// Extracts the fine and context patches around `loc`. Not differentiable
/// with respect to `loc`.
pub fn extract_glimpse(image: &Tensor, loc: Location, cfg: &GlimpseConfig) -> Result<Glimpse> {
    let side = image_side(image)?;
    cfg.validate(side)?;
    let loc = Location::new(loc.x, loc.y);
    let (cr, cc) = anchor_pixel(loc, side);
    let g = cfg.size;
    let px = image.data();
    let read = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= side as i64 || c >= side as i64 {
            cfg.pad_value
        } else {
            px[r as usize * side + c as usize]
        }
    };

    let (r0, c0) = (cr - (g / 2) as i64, cc - (g / 2) as i64);
    let mut fine = Vec::with_capacity(g * g);
    for i in 0..g as i64 {
        for j in 0..g as i64 {
            fine.push(read(r0 + i, c0 + j));
        }
    }

    let s = cfg.scale;
    let big = g * s;
    let (br0, bc0) = (cr - (big / 2) as i64, cc - (big / 2) as i64);
    let denom = (s * s) as f64;
    let mut coarse = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let mut acc = 0.0;
            for a in 0..s {
                for b in 0..s {
                    acc += read(br0 + (i * s + a) as i64, bc0 + (j * s + b) as i64);
                }
            }
            coarse.push(acc / denom);
        }
    }

    Ok(Glimpse {
        fine: Tensor::new(vec![1, g, g], fine)?,
        coarse: Tensor::new(vec![1, g, g], coarse)?,
        center: loc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping() {
        assert_eq!(loc_to_pixel(Location::CENTER, 256), (127.5, 127.5));
        assert_eq!(loc_to_pixel(Location::new(1.0, 1.0), 256), (255.0, 255.0));
        assert_eq!(loc_to_pixel(Location::new(-1.0, -1.0), 256), (0.0, 0.0));
        assert_eq!(anchor_pixel(Location::CENTER, 256), (128, 128));
    }

    #[test]
    fn locations_are_clamped() {
        let l = Location::new(2.0, -3.0);
        assert_eq!((l.x, l.y), (1.0, -1.0));
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = Tensor::filled(&[1, 32, 32], 0.5);
        let cfg = GlimpseConfig { size: 8, scale: 2, pad_value: 0.0 };
        let gl = extract_glimpse(&img, Location::new(0.1, -0.2), &cfg).unwrap();
        assert!(gl.fine.data().iter().all(|&v| v == 0.5));
        assert!(gl.coarse.data().iter().all(|&v| v == 0.5));
        assert_eq!(gl.fine.shape(), &[1, 8, 8]);
        assert_eq!(gl.coarse.shape(), &[1, 8, 8]);
    }

    #[test]
    fn corner_is_mostly_padding() {
        let img = Tensor::filled(&[1, 16, 16], 1.0);
        let cfg = GlimpseConfig { size: 4, scale: 2, pad_value: 0.0 };
        let gl = extract_glimpse(&img, Location::new(-1.0, -1.0), &cfg).unwrap();
        // anchor (0,0): rows/cols -2..=1, so only the 2×2 bottom-right block is inside
        let zeros = gl.fine.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 12);
    }

    #[test]
    fn rejects_non_square_or_multichannel() {
        let cfg = GlimpseConfig { size: 4, scale: 2, pad_value: 0.0 };
        assert!(matches!(
            extract_glimpse(&Tensor::zeros(&[1, 16, 12]), Location::CENTER, &cfg),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            extract_glimpse(&Tensor::zeros(&[3, 16, 16]), Location::CENTER, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn context_window_must_fit() {
        let cfg = GlimpseConfig { size: 12, scale: 2, pad_value: 0.0 };
        assert!(matches!(
            extract_glimpse(&Tensor::zeros(&[1, 16, 16]), Location::CENTER, &cfg),
            Err(Error::Config(_))
        ));
    }
}
