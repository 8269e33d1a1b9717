//! Glimpse encoder: a stack of two convolutional autoencoders whose encoder
//! halves compress each glimpse patch, plus the dense layer fusing the patch
//! code with a location embedding into the LSTM input `b_t`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::glimpse::{Glimpse, Location};
use crate::init::{uniform_fan_in, uniform_relu, zeros};
use crate::params::{Bound, Grads, ParamId, ParamStore, SgdMomentum};
use crate::tensor::Tensor;

/// One conv + max-pool encoder with a nearest-upsample + conv + sigmoid decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAutoencoder {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub enc_kernels: ParamId,
    pub enc_bias: ParamId,
    pub dec_kernels: ParamId,
    pub dec_bias: ParamId,
}

impl ConvAutoencoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("even kernel size {kernel}")));
        }
        let enc_fan = in_channels * kernel * kernel;
        let dec_fan = channels * kernel * kernel;
        Ok(Self {
            in_channels,
            channels,
            kernel,
            enc_kernels: store.add(
                format!("{prefix}.enc.kernels"),
                uniform_relu(&[channels, in_channels, kernel, kernel], enc_fan, rng),
            ),
            enc_bias: store.add(format!("{prefix}.enc.bias"), zeros(&[channels])),
            dec_kernels: store.add(
                format!("{prefix}.dec.kernels"),
                uniform_fan_in(&[in_channels, channels, kernel, kernel], dec_fan, rng),
            ),
            dec_bias: store.add(format!("{prefix}.dec.bias"), zeros(&[in_channels])),
        })
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        match tape.shape(x) {
            [c, h, w] if *c == self.in_channels && h % 2 == 0 && w % 2 == 0 => Ok(()),
            s => dim_err(format!(
                "autoencoder expects [{}, even H, even W], got {s:?}",
                self.in_channels
            )),
        }
    }

    /// `maxpool(relu(conv(x)))`.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let y = tape.conv2d(x, p.var(self.enc_kernels), p.var(self.enc_bias), Padding::Same)?;
        let y = tape.relu(y);
        tape.maxpool2d(y)
    }

    /// `sigmoid(conv(upsample(code)))`.
    pub fn decode(&self, tape: &mut Tape<'_>, p: &Bound, code: Var) -> Result<Var> {
        let up = tape.upsample2x(code)?;
        let y = tape.conv2d(up, p.var(self.dec_kernels), p.var(self.dec_bias), Padding::Same)?;
        Ok(tape.sigmoid(y))
    }

    /// Returns `(code, reconstruction)`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let code = self.encode(tape, p, x)?;
        let recon = self.decode(tape, p, code)?;
        Ok((code, recon))
    }

    fn param_ids(&self) -> [ParamId; 4] {
        [self.enc_kernels, self.enc_bias, self.dec_kernels, self.dec_bias]
    }
}

/// Two autoencoders applied in sequence; both glimpse patches share it.
#[derive(Clone, Debug, PartialEq)]
pub struct CaeStack {
    pub layers: [ConvAutoencoder; 2],
}

impl CaeStack {
    pub fn new(
        store: &mut ParamStore,
        channels: [usize; 2],
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let first = ConvAutoencoder::new(store, "cae1", 1, channels[0], kernel, rng)?;
        let second = ConvAutoencoder::new(store, "cae2", channels[0], channels[1], kernel, rng)?;
        Ok(Self {
            layers: [first, second],
        })
    }

    /// Length of the flattened code for one `g×g` patch.
    pub fn code_len(&self, patch_side: usize) -> usize {
        self.layers[1].channels * (patch_side / 4) * (patch_side / 4)
    }

    /// Runs a `[1×g×g]` patch through both encoder halves.
    pub fn encode_patch(&self, tape: &mut Tape<'_>, p: &Bound, patch: Var) -> Result<Var> {
        let c1 = self.layers[0].encode(tape, p, patch)?;
        self.layers[1].encode(tape, p, c1)
    }

    /// Encodes fine and coarse patches and concatenates the flattened codes.
    pub fn encode_glimpse(&self, tape: &mut Tape<'_>, p: &Bound, glimpse: &Glimpse) -> Result<Var> {
        let fine = tape.constant(glimpse.fine.clone());
        let coarse = tape.constant(glimpse.coarse.clone());
        let f = self.encode_patch(tape, p, fine)?;
        let c = self.encode_patch(tape, p, coarse)?;
        tape.concat(&[f, c])
    }
}

/// `b_t = relu(W_fuse·[img_feat, relu(W_loc·l + b_loc)] + b_fuse)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseNet {
    pub img_dim: usize,
    pub loc_dim: usize,
    pub out_dim: usize,
    pub loc_w: ParamId,
    pub loc_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl GlimpseNet {
    pub fn new(
        store: &mut ParamStore,
        img_dim: usize,
        loc_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fuse_in = img_dim + loc_dim;
        Self {
            img_dim,
            loc_dim,
            out_dim,
            loc_w: store.add("glimpse.loc.w", uniform_relu(&[loc_dim, 2], 2, rng)),
            loc_b: store.add("glimpse.loc.b", zeros(&[loc_dim])),
            fuse_w: store.add("glimpse.fuse.w", uniform_relu(&[out_dim, fuse_in], fuse_in, rng)),
            fuse_b: store.add("glimpse.fuse.b", zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, img_feat: Var, loc: Location) -> Result<Var> {
        if tape.value(img_feat).len() != self.img_dim {
            return dim_err(format!(
                "glimpse net expects {} image features, got {}",
                self.img_dim,
                tape.value(img_feat).len()
            ));
        }
        let l = tape.constant(Tensor::vector(vec![loc.x, loc.y]));
        let lf = tape.linear(p.var(self.loc_w), l, p.var(self.loc_b))?;
        let lf = tape.relu(lf);
        let joined = tape.concat(&[img_feat, lf])?;
        let b = tape.linear(p.var(self.fuse_w), joined, p.var(self.fuse_b))?;
        Ok(tape.relu(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            momentum: 0.9,
            batch_size: 16,
        }
    }
}

/// Fine and context patches of `count` glimpses taken at uniformly random
/// locations over uniformly chosen images.
pub fn sample_glimpse_patches(
    images: &[Tensor],
    cfg: &crate::glimpse::GlimpseConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::Argument("no images to sample patches from".into()));
    }
    let mut out = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        let loc = Location::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        let g = crate::glimpse::extract_glimpse(img, loc, cfg)?;
        out.push(g.fine);
        out.push(g.coarse);
    }
    Ok(out)
}

/// Per-epoch mean training MSE for each stacked layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub layer_losses: [Vec<f64>; 2],
}

/// Mean reconstruction MSE of one autoencoder over `inputs`.
pub fn reconstruction_mse(
    store: &ParamStore,
    cae: &ConvAutoencoder,
    inputs: &[Tensor],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Argument("no inputs to evaluate".into()));
    }
    let mut total = 0.0;
    for x in inputs {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, recon) = cae.forward(&mut tape, &p, xv)?;
        let loss = tape.mse(recon, x.data())?;
        total += tape.scalar(loss);
    }
    Ok(total / inputs.len() as f64)
}

/// Codes produced by one autoencoder's encoder for each input.
pub fn encode_all(store: &ParamStore, cae: &ConvAutoencoder, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    inputs
        .iter()
        .map(|x| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let code = cae.encode(&mut tape, &p, xv)?;
            Ok(tape.tensor(code))
        })
        .collect()
}

/// Trains one autoencoder to reconstruct `inputs`; returns per-epoch mean MSE.
pub fn train_autoencoder(
    store: &mut ParamStore,
    cae: &ConvAutoencoder,
    inputs: &[Tensor],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::Argument("empty pretraining dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    let mut opt = SgdMomentum::new(store, 0.0, cfg.momentum)?;
    for id in cae.param_ids() {
        opt.set_lr(id, cfg.lr);
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(store);
            for &i in batch {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let x = tape.constant(inputs[i].clone());
                let (_, recon) = cae.forward(&mut tape, &p, x)?;
                let loss = tape.mse(recon, inputs[i].data())?;
                epoch_loss += tape.scalar(loss);
                tape.backward(loss)?;
                grads.add_assign(&p.grads(&tape, store));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(store, &grads)?;
        }
        curve.push(epoch_loss / inputs.len() as f64);
    }
    warn_if_not_decreasing(&curve);
    Ok(curve)
}

fn warn_if_not_decreasing(curve: &[f64]) {
    for e in 0..curve.len().saturating_sub(5) {
        if curve[e + 5] > curve[e] {
            log::warn!(
                "pretraining loss rose over epochs {e}..{}: {:.6} -> {:.6}",
                e + 5,
                curve[e],
                curve[e + 5]
            );
            return;
        }
    }
}

/// Layer-wise pretraining: the first autoencoder on raw patches, then the
/// second on the first one's codes.
pub fn cae_pretrain(
    store: &mut ParamStore,
    stack: &CaeStack,
    patches: &[Tensor],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    if patches.is_empty() {
        return Err(Error::Argument("empty pretraining dataset".into()));
    }
    let first = train_autoencoder(store, &stack.layers[0], patches, cfg, rng)?;
    let codes = if cfg.epochs == 0 {
        Vec::new()
    } else {
        encode_all(store, &stack.layers[0], patches)?
    };
    let second = if cfg.epochs == 0 {
        Vec::new()
    } else {
        train_autoencoder(store, &stack.layers[1], &codes, cfg, rng)?
    };
    Ok(PretrainReport {
        layer_losses: [first, second],
    })
}
