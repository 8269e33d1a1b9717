//! Synthetic chest-radiograph stand-ins with known geometry.
//!
//! Two binary tasks are rendered on a dark background with a bright thorax
//! ellipse:
//!
//! * `cardio`: an inner brighter cardiac ellipse; positive when its width
//!   exceeds `ctr_threshold` times the thorax width.
//! * `device`: clutter blobs plus, half the time, a small saturated implant in
//!   the upper-chest band; positive when the implant is present.
//!
//! All geometry is specified as fractions of the image side so the same
//! generator serves 64×64 desk runs and 256×256 runs.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

pub const THORAX_LEVEL: f64 = 0.30;
pub const HEART_LEVEL: f64 = 0.25;
pub const CLUTTER_MAX: f64 = 0.15;
/// Highest intensity non-implant content can reach before noise.
pub const BACKGROUND_MAX: f64 = THORAX_LEVEL + HEART_LEVEL + CLUTTER_MAX;
pub const IMPLANT_LEVEL: f64 = 1.0;

/// Rows and columns (as fractions of the side) implant centres are drawn from.
pub const DEVICE_BAND_ROWS: (f64, f64) = (0.16, 0.34);
pub const DEVICE_BAND_COLS: (f64, f64) = (0.22, 0.78);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Cardio,
    Device,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cardio" => Ok(Task::Cardio),
            "device" => Ok(Task::Device),
            other => Err(Error::Config(format!("unknown task {other:?} (cardio|device)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Cardio => "cardio",
            Task::Device => "device",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    pub task: Task,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Number of clutter blobs (device task).
    pub clutter: usize,
    pub ctr_threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 64,
            task: Task::Cardio,
            noise: 0.03,
            clutter: 4,
            ctr_threshold: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::Config(format!("image side {} is too small", self.side)));
        }
        if !(self.ctr_threshold > 0.0 && self.ctr_threshold < 1.0) {
            return Err(Error::Config(format!(
                "ctr_threshold must be in (0, 1), got {}",
                self.ctr_threshold
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[1×S×S]` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Target centre `(x = col, y = row)` in pixels.
    pub meta: Option<(f64, f64)>,
}

/// Geometry of a cardio sample, exposed so tests can pin the label rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CardioGeometry {
    pub thorax_center: (f64, f64),
    pub thorax_width: f64,
    pub thorax_height: f64,
    pub heart_center: (f64, f64),
    pub heart_width: f64,
    pub heart_height: f64,
}

impl CardioGeometry {
    pub fn ratio(&self) -> f64 {
        self.heart_width / self.thorax_width
    }

    /// Draws a geometry. Heart-to-thorax ratios come from two bands on either
    /// side of `threshold` so that labels are balanced with a margin.
    pub fn sample(side: usize, threshold: f64, rng: &mut impl Rng) -> Self {
        let s = side as f64;
        let thorax_width = s * rng.gen_range(0.70..0.86);
        let thorax_height = s * rng.gen_range(0.74..0.84);
        let thorax_center = (
            s * (0.5 + rng.gen_range(-0.02..0.02)),
            s * (0.52 + rng.gen_range(-0.02..0.02)),
        );
        let ratio = if rng.gen_bool(0.5) {
            threshold * rng.gen_range(1.1..1.45)
        } else {
            threshold * rng.gen_range(0.6..0.9)
        };
        let heart_width = ratio * thorax_width;
        let heart_height = 0.75 * heart_width;
        let heart_center = (
            thorax_center.0 + s * (0.07 + rng.gen_range(-0.04..0.04)),
            thorax_center.1 + s * (0.14 + rng.gen_range(-0.03..0.03)),
        );
        Self {
            thorax_center,
            thorax_width,
            thorax_height,
            heart_center,
            heart_width,
            heart_height,
        }
    }
}

fn inside_ellipse(px: f64, py: f64, center: (f64, f64), width: f64, height: f64) -> bool {
    let dx = (px - center.0) / (width / 2.0);
    let dy = (py - center.1) / (height / 2.0);
    dx * dx + dy * dy <= 1.0
}

fn blank(side: usize) -> Vec<f64> {
    vec![0.0; side * side]
}

fn paint_ellipse(px: &mut [f64], side: usize, center: (f64, f64), width: f64, height: f64, level: f64) {
    for r in 0..side {
        for c in 0..side {
            if inside_ellipse(c as f64, r as f64, center, width, height) {
                px[r * side + c] += level;
            }
        }
    }
}

fn finish(mut px: Vec<f64>, side: usize, noise: f64, rng: &mut impl Rng) -> Tensor {
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("noise is non-negative");
        px.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![1, side, side], px).expect("side² pixels")
}

/// Renders a cardio sample from explicit geometry.
pub fn render_cardio(cfg: &SynthConfig, geom: &CardioGeometry, rng: &mut impl Rng) -> LabeledImage {
    let side = cfg.side;
    let mut px = blank(side);
    paint_ellipse(&mut px, side, geom.thorax_center, geom.thorax_width, geom.thorax_height, THORAX_LEVEL);
    paint_ellipse(&mut px, side, geom.heart_center, geom.heart_width, geom.heart_height, HEART_LEVEL);
    LabeledImage {
        image: finish(px, side, cfg.noise, rng),
        label: usize::from(geom.ratio() > cfg.ctr_threshold),
        meta: Some(geom.heart_center),
    }
}

pub fn gen_cardio(cfg: &SynthConfig, rng: &mut impl Rng) -> LabeledImage {
    let geom = CardioGeometry::sample(cfg.side, cfg.ctr_threshold, rng);
    render_cardio(cfg, &geom, rng)
}

/// Renders a device sample; `implant` is the implant centre `(x, y)` when present.
pub fn render_device(cfg: &SynthConfig, implant: Option<(f64, f64)>, rng: &mut impl Rng) -> LabeledImage {
    let side = cfg.side;
    let s = side as f64;
    let geom = CardioGeometry::sample(side, 0.5, rng);
    let mut px = blank(side);
    paint_ellipse(&mut px, side, geom.thorax_center, geom.thorax_width, geom.thorax_height, THORAX_LEVEL);
    // a normal-sized heart as anatomical distraction
    let heart_w = geom.thorax_width * rng.gen_range(0.35..0.5);
    paint_ellipse(&mut px, side, geom.heart_center, heart_w, 0.75 * heart_w, HEART_LEVEL);

    for _ in 0..cfg.clutter {
        let cx = s * rng.gen_range(0.15..0.85);
        let cy = s * rng.gen_range(0.15..0.85);
        let radius = s * rng.gen_range(0.02..0.05);
        let amp = rng.gen_range(0.5..1.0) * CLUTTER_MAX;
        for r in 0..side {
            for c in 0..side {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                px[r * side + c] += amp * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    // clutter never exceeds its own cap where blobs overlap
    let cap = BACKGROUND_MAX;
    px.iter_mut().for_each(|v| *v = v.min(cap));

    if let Some((ix, iy)) = implant {
        let half_w = (0.045 * s).max(1.5);
        let half_h = (0.03 * s).max(1.0);
        let corner = 0.5 * half_h;
        for r in 0..side {
            for c in 0..side {
                let dx = ((c as f64 - ix).abs() - (half_w - corner)).max(0.0);
                let dy = ((r as f64 - iy).abs() - (half_h - corner)).max(0.0);
                if dx * dx + dy * dy <= corner * corner {
                    px[r * side + c] = IMPLANT_LEVEL;
                }
            }
        }
    }
    LabeledImage {
        image: finish(px, side, cfg.noise, rng),
        label: usize::from(implant.is_some()),
        meta: implant,
    }
}

pub fn gen_device(cfg: &SynthConfig, rng: &mut impl Rng) -> LabeledImage {
    let s = cfg.side as f64;
    let implant = rng.gen_bool(0.5).then(|| {
        (
            s * rng.gen_range(DEVICE_BAND_COLS.0..DEVICE_BAND_COLS.1),
            s * rng.gen_range(DEVICE_BAND_ROWS.0..DEVICE_BAND_ROWS.1),
        )
    });
    render_device(cfg, implant, rng)
}

pub fn generate_one(cfg: &SynthConfig, rng: &mut impl Rng) -> LabeledImage {
    match cfg.task {
        Task::Cardio => gen_cardio(cfg, rng),
        Task::Device => gen_device(cfg, rng),
    }
}

/// `count` samples, sample `i` drawn from its own stream of `cfg.seed`.
pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut rng = stream(cfg.seed, &[tag::GENERATE, i as u64]);
            generate_one(cfg, &mut rng)
        })
        .collect())
}

/// Area-average resampling of `[1×H×W]` down to `[1×S×S]`.
pub fn downscale_to(image: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("expected [1, H, W], got {s:?}"))),
    };
    if side == 0 || side > h.min(w) {
        return Err(Error::Argument(format!(
            "cannot resample {h}x{w} to {side}x{side} (no upscaling)"
        )));
    }
    if h == side && w == side {
        return Ok(image.clone());
    }
    let rows = box_weights(h, side);
    let cols = box_weights(w, side);
    let px = image.data();
    let mut out = Vec::with_capacity(side * side);
    for row_w in &rows {
        for col_w in &cols {
            let mut acc = 0.0;
            for &(r, wr) in row_w {
                let mut line = 0.0;
                for &(c, wc) in col_w {
                    line += wc * px[r * w + c];
                }
                acc += wr * line;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![1, side, side], out)
}

/// For each of `m` output cells, the input indices it overlaps and their
/// normalised overlap weights.
fn box_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let lo = i as f64 * step;
            let hi = lo + step;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|k| {
                    let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                    (overlap > 0.0).then_some((k, overlap / step))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clean(task: Task) -> SynthConfig {
        SynthConfig {
            task,
            noise: 0.0,
            clutter: 0,
            ..SynthConfig::default()
        }
    }

    fn geometry_with_ratio(ratio: f64) -> CardioGeometry {
        CardioGeometry {
            thorax_center: (32.0, 33.0),
            thorax_width: 50.0,
            thorax_height: 50.0,
            heart_center: (36.0, 42.0),
            heart_width: 50.0 * ratio,
            heart_height: 0.75 * 50.0 * ratio,
        }
    }

    #[test]
    fn cardio_label_follows_ratio() {
        let cfg = clean(Task::Cardio);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(render_cardio(&cfg, &geometry_with_ratio(0.8), &mut rng).label, 1);
        assert_eq!(render_cardio(&cfg, &geometry_with_ratio(0.3), &mut rng).label, 0);
    }

    #[test]
    fn pixels_in_unit_range() {
        let cfg = SynthConfig {
            noise: 0.2,
            ..SynthConfig::default()
        };
        for img in generate(&cfg, 20).unwrap() {
            assert!(img.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn bright_components(img: &Tensor, side: usize, thresh: f64) -> usize {
        let px = img.data();
        let mut seen = vec![false; side * side];
        let mut count = 0;
        for start in 0..side * side {
            if seen[start] || px[start] <= thresh {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = (i / side, i % side);
                let mut nb = Vec::new();
                if r > 0 { nb.push(i - side); }
                if r + 1 < side { nb.push(i + side); }
                if c > 0 { nb.push(i - 1); }
                if c + 1 < side { nb.push(i + 1); }
                for j in nb {
                    if !seen[j] && px[j] > thresh {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn clean_device_positive_has_one_bright_region() {
        let cfg = clean(Task::Device);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = render_device(&cfg, Some((30.0, 15.0)), &mut rng);
        assert_eq!(img.label, 1);
        assert_eq!(bright_components(&img.image, 64, 0.9), 1);
    }

    #[test]
    fn clean_device_negative_stays_below_background_max() {
        let cfg = SynthConfig {
            noise: 0.0,
            clutter: 6,
            ..clean(Task::Device)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let img = render_device(&cfg, None, &mut rng);
            assert_eq!(img.label, 0);
            assert!(img.meta.is_none());
            assert!(img.image.data().iter().all(|&v| v <= BACKGROUND_MAX));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 5).unwrap(), generate(&cfg, 5).unwrap());
    }

    #[test]
    fn downscale_constant_and_identity() {
        let img = Tensor::filled(&[1, 90, 70], 0.7);
        let out = downscale_to(&img, 33).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let sq = Tensor::new(vec![1, 16, 16], (0..256).map(|v| v as f64 / 256.0).collect()).unwrap();
        assert_eq!(downscale_to(&sq, 16).unwrap(), sq);
        assert!(matches!(downscale_to(&sq, 17), Err(Error::Argument(_))));
    }

    #[test]
    fn task_parsing() {
        assert_eq!("cardio".parse::<Task>().unwrap(), Task::Cardio);
        assert!("lungs".parse::<Task>().is_err());
    }
}
