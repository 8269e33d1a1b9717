//! Reference implementations and measurement helpers shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ram_core::autodiff::Padding;
use ram_core::glimpse::{GlimpseConfig, Location};
use ram_core::ram::ModelConfig;
use ram_core::{RamModel, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients that are
/// both essentially zero compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for inputs of kinked ops.
pub fn nonzero_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Reduces any node to a scalar with fixed, non-uniform weights so that every
/// output element contributes distinctly to the checked gradient.
pub fn project(tape: &mut Tape<'_>, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + ((i * 37) % 11) as f64 / 7.0).collect()).unwrap();
    let w = tape.constant(w);
    let m = tape.mul(v, w).unwrap();
    tape.sum(m)
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// finite differences, over every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.shape(out), &[1], "checked function must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], |g| g.to_vec()))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Worst relative error of every primitive operator, by name.
pub fn per_op_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| random_tensor(s, rng);
    let mut out = Vec::new();

    let ins = [r(&[3, 4], &mut rng), r(&[4, 2], &mut rng)];
    out.push(("matmul", grad_check(&ins, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y)
    })));
    let ins = [r(&[3, 5], &mut rng), r(&[5], &mut rng), r(&[3], &mut rng)];
    out.push(("matvec", grad_check(&ins[..2], |t, v| {
        let y = t.matvec(v[0], v[1]).unwrap();
        project(t, y)
    })));
    out.push(("linear", grad_check(&ins, |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        project(t, y)
    })));
    for (name, pad) in [("conv2d_same", Padding::Same), ("conv2d_valid", Padding::Valid)] {
        let ins = [r(&[2, 6, 5], &mut rng), r(&[3, 2, 3, 3], &mut rng), r(&[3], &mut rng)];
        out.push((name, grad_check(&ins, move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], pad).unwrap();
            project(t, y)
        })));
    }
    // distinct values keep the arg-max of every window stable under the probe step
    let mut pool_in = Tensor::zeros(&[2, 4, 6]);
    let mut perm: Vec<usize> = (0..pool_in.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    for (v, p) in pool_in.data_mut().iter_mut().zip(perm) {
        *v = p as f64 * 0.01;
    }
    out.push(("maxpool2d", grad_check(&[pool_in], |t, v| {
        let y = t.maxpool2d(v[0]).unwrap();
        project(t, y)
    })));
    out.push(("upsample2x", grad_check(&[r(&[2, 3, 4], &mut rng)], |t, v| {
        let y = t.upsample2x(v[0]).unwrap();
        project(t, y)
    })));
    out.push(("relu", grad_check(&[nonzero_tensor(&[7], &mut rng)], |t, v| {
        let y = t.relu(v[0]);
        project(t, y)
    })));
    out.push(("tanh", grad_check(&[r(&[7], &mut rng)], |t, v| {
        let y = t.tanh(v[0]);
        project(t, y)
    })));
    out.push(("sigmoid", grad_check(&[r(&[7], &mut rng)], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y)
    })));
    out.push(("scale", grad_check(&[r(&[4], &mut rng)], |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y)
    })));
    let pair = [r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)];
    out.push(("add", grad_check(&pair, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y)
    })));
    out.push(("sub", grad_check(&pair, |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y)
    })));
    out.push(("mul", grad_check(&pair, |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y)
    })));
    out.push(("sum", grad_check(&[r(&[3, 2], &mut rng)], |t, v| t.sum(v[0]))));
    out.push(("concat", grad_check(&[r(&[3], &mut rng), r(&[2, 2], &mut rng)], |t, v| {
        let y = t.concat(&[v[0], v[1]]).unwrap();
        project(t, y)
    })));
    out.push(("reshape", grad_check(&[r(&[2, 6], &mut rng)], |t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        project(t, y)
    })));
    out.push(("softmax_cross_entropy", grad_check(&[r(&[4], &mut rng)], |t, v| {
        let s = t.scale(v[0], 3.0);
        t.softmax_cross_entropy(s, 2).unwrap()
    })));
    let point = [0.3, -0.2];
    out.push(("gaussian_log_pdf", grad_check(&[r(&[2], &mut rng)], move |t, v| {
        t.gaussian_log_pdf(&point, v[0], 0.4).unwrap()
    })));
    let target: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
    out.push(("mse", grad_check(&[r(&[1, 2, 3], &mut rng)], move |t, v| t.mse(v[0], &target).unwrap())));
    out
}

/// A reduced architecture for checks that must visit every parameter.
pub fn small_model_config(n_glimpses: usize) -> ModelConfig {
    ModelConfig {
        image_side: 24,
        glimpse: GlimpseConfig {
            size: 8,
            scale: 2,
            pad_value: 0.0,
        },
        conv_channels: [2, 3],
        kernel: 3,
        loc_dim: 4,
        fuse_dim: 6,
        hidden: 5,
        classes: 2,
        n_glimpses,
        sigma: 0.1,
    }
}

/// Smooth textured image with distinct pixel values.
pub fn textured_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            0.5 + 0.3 * (0.7 * r).sin() * (0.4 * c).cos() + rng.gen_range(-0.1..0.1)
        })
        .collect();
    Tensor::new(vec![1, side, side], data).unwrap()
}

/// Worst relative error of the cross-entropy gradient with respect to every
/// parameter of the unrolled model, glimpse locations held fixed.
pub fn composed_model_grad_error(n_glimpses: usize, seed: u64) -> f64 {
    let mut model = RamModel::new(small_model_config(n_glimpses), seed).unwrap();
    // Zero-initialised biases put ReLU pre-activations exactly on the kink
    // (centre location, zero-padded borders), where a central difference
    // measures half a slope. Move every bias vector off zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.get(id).rank() == 1 {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.gen_range(0.05..0.15) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    let model = model;
    let image = textured_image(model.cfg.image_side, seed);
    let locations: Vec<Location> = [(0.0, 0.0), (-0.4, 0.3), (0.5, 0.5), (0.2, -0.6), (-0.7, -0.1)]
        .iter()
        .cycle()
        .take(n_glimpses)
        .map(|&(x, y)| Location::new(x, y))
        .collect();
    let label = 1;

    let loss_of = |params: &ram_core::ParamStore| -> f64 {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let logits = model.logits_at(&mut tape, &p, &image, &locations).unwrap();
        let loss = tape.softmax_cross_entropy(logits, label).unwrap();
        tape.scalar(loss)
    };

    let analytic = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let logits = model.logits_at(&mut tape, &p, &image, &locations).unwrap();
        let loss = tape.softmax_cross_entropy(logits, label).unwrap();
        tape.backward(loss).unwrap();
        p.grads(&tape, &model.params)
    };

    let mut params = model.params.clone();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let fp = loss_of(&params);
            params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let fm = loss_of(&params);
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(analytic.get(id).data()[j], numeric);
            if e > worst {
                worst = e;
                worst_at = format!("{}[{j}]: analytic {} numeric {numeric}", params.name(id), analytic.get(id).data()[j]);
            }
        }
    }
    eprintln!("composed gradient check: worst relative error {worst:e} at {worst_at}");
    worst
}

/// Per-pixel glimpse reference built from the definition: a `g × g` crop
/// around the rounded centre pixel, and a `(g·s)`-sided crop whose
/// non-overlapping `s × s` blocks are averaged (summed row by row, then divided).
pub fn glimpse_reference(image: &Tensor, loc: Location, cfg: &GlimpseConfig) -> (Vec<f64>, Vec<f64>) {
    let side = image.shape()[1];
    let span = (side - 1) as f64;
    let row = ((loc.y.clamp(-1.0, 1.0) + 1.0) / 2.0 * span).round() as i64;
    let col = ((loc.x.clamp(-1.0, 1.0) + 1.0) / 2.0 * span).round() as i64;
    let pixel = |r: i64, c: i64| -> f64 {
        if (0..side as i64).contains(&r) && (0..side as i64).contains(&c) {
            image.at(&[0, r as usize, c as usize])
        } else {
            cfg.pad_value
        }
    };
    let g = cfg.size as i64;
    let s = cfg.scale as i64;
    let mut fine = vec![];
    for i in 0..g {
        for j in 0..g {
            fine.push(pixel(row - g / 2 + i, col - g / 2 + j));
        }
    }
    let top = row - (g * s) / 2;
    let left = col - (g * s) / 2;
    let mut coarse = vec![];
    for i in 0..g {
        for j in 0..g {
            let mut acc = 0.0;
            for a in 0..s {
                for b in 0..s {
                    acc += pixel(top + i * s + a, left + j * s + b);
                }
            }
            coarse.push(acc / (s * s) as f64);
        }
    }
    (fine, coarse)
}

/// Runs `count` random extractions (plus the four corners) against the
/// reference; returns `(mismatching extractions, total extractions)`.
pub fn glimpse_oracle_sweep(count: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(usize, GlimpseConfig, Location)> = Vec::new();
    for &(x, y) in &[(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        cases.push((64, GlimpseConfig::default(), Location::new(x, y)));
    }
    while cases.len() < count + 4 {
        let size = rng.gen_range(2..=12);
        let scale = rng.gen_range(1..=3);
        let side = rng.gen_range(size * scale..=48);
        let cfg = GlimpseConfig {
            size,
            scale,
            pad_value: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-1.0..1.0) },
        };
        // a quarter of the draws land exactly on the border
        let coord = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.25) {
                if rng.gen_bool(0.5) { -1.0 } else { 1.0 }
            } else {
                rng.gen_range(-1.0..=1.0)
            }
        };
        let loc = Location::new(coord(&mut rng), coord(&mut rng));
        cases.push((side, cfg, loc));
    }
    let mut bad = 0;
    for (k, (side, cfg, loc)) in cases.iter().enumerate() {
        let image = {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1));
            random_tensor(&[1, *side, *side], &mut r)
        };
        let got = ram_core::extract_glimpse(&image, *loc, cfg).unwrap();
        let (fine, coarse) = glimpse_reference(&image, *loc, cfg);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len();
        if !same(got.fine.data(), &fine) || !same(got.coarse.data(), &coarse) {
            bad += 1;
        }
    }
    (bad, cases.len())
}

/// One-step Gaussian bandit: action `a ~ N(μ, σ²I)` in two dimensions,
/// reward `−‖a − a*‖²`. Exact policy gradient is `−2(μ − a*)`.
pub struct Bandit {
    pub mean: [f64; 2],
    pub target: [f64; 2],
    pub sigma: f64,
}

impl Bandit {
    pub fn reward(&self, a: &[f64; 2]) -> f64 {
        -((a[0] - self.target[0]).powi(2) + (a[1] - self.target[1]).powi(2))
    }

    pub fn closed_form_gradient(&self) -> [f64; 2] {
        [-2.0 * (self.mean[0] - self.target[0]), -2.0 * (self.mean[1] - self.target[1])]
    }

    /// `E[R(a) ∇_μ log π(a)]` by a tensor-product midpoint rule over ±10σ.
    pub fn integrated_gradient(&self, points: usize) -> [f64; 2] {
        let half = 10.0 * self.sigma;
        let h = 2.0 * half / points as f64;
        let pdf = |x: f64, m: f64| {
            (-(x - m).powi(2) / (2.0 * self.sigma * self.sigma)).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut g = [0.0; 2];
        for i in 0..points {
            let a0 = self.mean[0] - half + (i as f64 + 0.5) * h;
            let p0 = pdf(a0, self.mean[0]);
            for j in 0..points {
                let a1 = self.mean[1] - half + (j as f64 + 0.5) * h;
                let w = p0 * pdf(a1, self.mean[1]) * h * h;
                let r = self.reward(&[a0, a1]);
                let s2 = self.sigma * self.sigma;
                g[0] += w * r * (a0 - self.mean[0]) / s2;
                g[1] += w * r * (a1 - self.mean[1]) / s2;
            }
        }
        g
    }

    /// Mean and standard error of `samples` single-sample estimates
    /// `(R − b)·∇_μ log π(a)`, with the score computed by the autodiff engine.
    pub fn empirical_gradient(&self, samples: usize, baseline: f64, seed: u64) -> ([f64; 2], [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut sum, mut sumsq) = ([0.0; 2], [0.0; 2]);
        for _ in 0..samples {
            let draw = ram_core::ram::sample_location(self.mean, self.sigma, &mut rng, ram_core::LocationMode::Sample)
                .draw
                .expect("sampling mode draws");
            let mut tape = Tape::new();
            let mu = tape.leaf(Tensor::vector(self.mean.to_vec()));
            let logp = tape.gaussian_log_pdf(&draw, mu, self.sigma).unwrap();
            tape.backward(logp).unwrap();
            let score = tape.grad(mu).unwrap();
            let adv = self.reward(&draw) - baseline;
            for k in 0..2 {
                let e = adv * score[k];
                sum[k] += e;
                sumsq[k] += e * e;
            }
        }
        let n = samples as f64;
        let mut mean = [0.0; 2];
        let mut se = [0.0; 2];
        for k in 0..2 {
            mean[k] = sum[k] / n;
            let var = (sumsq[k] / n - mean[k] * mean[k]) * n / (n - 1.0);
            se[k] = (var / n).sqrt();
        }
        (mean, se)
    }
}

pub fn default_bandit() -> Bandit {
    Bandit {
        mean: [0.2, -0.3],
        target: [0.5, 0.1],
        sigma: 0.1,
    }
}
