//! The recurrent attention core: LSTM state update, Gaussian locator,
//! classifier head, baseline head, and episode rollout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{CaeStack, GlimpseNet};
use crate::error::{dim_err, Error, Result};
use crate::glimpse::{extract_glimpse, image_side, loc_to_pixel, GlimpseConfig, Location};
use crate::init::{uniform_fan_in, zeros};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Architecture and policy hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub glimpse: GlimpseConfig,
    pub conv_channels: [usize; 2],
    pub kernel: usize,
    pub loc_dim: usize,
    pub fuse_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub n_glimpses: usize,
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            glimpse: GlimpseConfig::default(),
            conv_channels: [8, 16],
            kernel: 3,
            loc_dim: 32,
            fuse_dim: 128,
            hidden: 128,
            classes: 2,
            n_glimpses: 6,
            sigma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.glimpse.validate(self.image_side)?;
        if self.glimpse.size % 4 != 0 {
            return Err(Error::Config(format!(
                "glimpse size {} must be a multiple of 4 (two 2x pooling stages)",
                self.glimpse.size
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("even kernel size {}", self.kernel)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.n_glimpses == 0 {
            return Err(Error::Config("n_glimpses must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        let dims = [
            self.conv_channels[0],
            self.conv_channels[1],
            self.loc_dim,
            self.fuse_dim,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

/// LSTM state as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// One weight matrix and bias per gate over the concatenated `[b_t, h_{t-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    /// `(weights, bias)` for the input, forget, output, and candidate gates, in that order.
    pub gates: [(ParamId, ParamId); 4],
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl Lstm {
    pub fn new(store: &mut ParamStore, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan = input_dim + hidden;
        let gates = GATE_NAMES.map(|g| {
            let w = store.add(format!("lstm.{g}.w"), uniform_fan_in(&[hidden, fan], fan, rng));
            let bias = if g == "forget" {
                Tensor::filled(&[hidden], 1.0)
            } else {
                zeros(&[hidden])
            };
            let b = store.add(format!("lstm.{g}.b"), bias);
            (w, b)
        });
        Self {
            input_dim,
            hidden,
            gates,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, p: &Bound, b_t: Var, state: LstmVars) -> Result<LstmVars> {
        if tape.value(b_t).len() != self.input_dim || tape.value(state.h).len() != self.hidden {
            return dim_err(format!(
                "lstm expects input {} and hidden {}, got {} and {}",
                self.input_dim,
                self.hidden,
                tape.value(b_t).len(),
                tape.value(state.h).len()
            ));
        }
        let z = tape.concat(&[b_t, state.h])?;
        let mut pre = [z; 4];
        for (slot, &(w, b)) in pre.iter_mut().zip(&self.gates) {
            *slot = tape.linear(p.var(w), z, p.var(b))?;
        }
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let g = tape.tanh(pre[3]);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h = tape.mul(o, squashed)?;
        Ok(LstmVars { h, c })
    }
}

/// `o_t = tanh(W·h_t + b)`; the next location is drawn from `N(o_t, σ²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Locator {
    pub w: ParamId,
    pub b: ParamId,
    pub sigma: f64,
}

impl Locator {
    pub fn new(store: &mut ParamStore, hidden: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add("locator.w", uniform_fan_in(&[2, hidden], hidden, rng)),
            b: store.add("locator.b", zeros(&[2])),
            sigma,
        }
    }

    pub fn locate(&self, tape: &mut Tape<'_>, p: &Bound, h: Var) -> Result<Var> {
        let y = tape.linear(p.var(self.w), h, p.var(self.b))?;
        Ok(tape.tanh(y))
    }
}

/// How the next location is chosen during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocationMode {
    /// Draw from `N(o_t, σ²I)` and clamp.
    Sample,
    /// Clamped policy mean.
    Greedy,
    /// Uniform over `[-1, 1]²`, ignoring the locator.
    UniformRandom,
}

/// Outcome of drawing a location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationDraw {
    pub location: Location,
    /// Pre-clamp sample; `None` for modes that do not sample the policy.
    pub draw: Option<[f64; 2]>,
}

pub fn sample_location(mean: [f64; 2], sigma: f64, rng: &mut impl Rng, mode: LocationMode) -> LocationDraw {
    match mode {
        LocationMode::Greedy => LocationDraw {
            location: Location::new(mean[0], mean[1]),
            draw: None,
        },
        LocationMode::Sample => {
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            let d = [mean[0] + sigma * zx, mean[1] + sigma * zy];
            LocationDraw {
                location: Location::new(d[0], d[1]),
                draw: Some(d),
            }
        }
        LocationMode::UniformRandom => LocationDraw {
            location: Location::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)),
            draw: None,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), uniform_fan_in(&[output, input], input, rng)),
            b: store.add(format!("{name}.b"), zeros(&[output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(p.var(self.w), x, p.var(self.b))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// One glimpse step of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Location the glimpse at this step was taken at.
    pub location: Location,
    /// `(row, col)` pixel coordinates of `location`.
    pub pixel: (f64, f64),
    /// Locator mean `o_t` computed from this step's hidden state.
    pub mean: [f64; 2],
    /// Pre-clamp draw of the next location (absent at the last step and in non-sampling modes).
    pub draw: Option<[f64; 2]>,
    /// `log N(draw; mean, σ²I)`.
    pub log_density: Option<f64>,
    /// Baseline reward prediction from this step's hidden state.
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    pub logits: Vec<f64>,
    pub predicted: usize,
    /// Set once the label is known.
    pub reward: Option<f64>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn locations(&self) -> impl Iterator<Item = Location> + '_ {
        self.steps.iter().map(|s| s.location)
    }
}

/// Tape handles needed to build the training loss for an episode.
#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    pub logits: Var,
    /// Per step: log-density of the sampled next location, when one was sampled.
    pub log_probs: Vec<Option<Var>>,
    pub baselines: Vec<Var>,
}

/// The full model: parameters plus the layout of every sub-network inside them.
#[derive(Clone, Debug, PartialEq)]
pub struct RamModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: CaeStack,
    pub glimpse_net: GlimpseNet,
    pub lstm: Lstm,
    pub locator: Locator,
    pub classifier: Dense,
    pub baseline: Dense,
}

impl RamModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut params = ParamStore::new();
        let encoder = CaeStack::new(&mut params, cfg.conv_channels, cfg.kernel, &mut rng)?;
        let img_dim = 2 * encoder.code_len(cfg.glimpse.size);
        let glimpse_net = GlimpseNet::new(&mut params, img_dim, cfg.loc_dim, cfg.fuse_dim, &mut rng);
        let lstm = Lstm::new(&mut params, cfg.fuse_dim, cfg.hidden, &mut rng);
        let locator = Locator::new(&mut params, cfg.hidden, cfg.sigma, &mut rng);
        let classifier = Dense::new(&mut params, "classifier", cfg.hidden, cfg.classes, &mut rng);
        let baseline = Dense::new(&mut params, "baseline", cfg.hidden, 1, &mut rng);
        Ok(Self {
            cfg,
            params,
            encoder,
            glimpse_net,
            lstm,
            locator,
            classifier,
            baseline,
        })
    }

    pub fn locator_ids(&self) -> [ParamId; 2] {
        [self.locator.w, self.locator.b]
    }

    pub fn baseline_ids(&self) -> [ParamId; 2] {
        [self.baseline.w, self.baseline.b]
    }

    /// Encodes the glimpse at `loc` and folds it into the recurrent state.
    pub fn observe(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        image: &Tensor,
        loc: Location,
        state: LstmVars,
    ) -> Result<LstmVars> {
        let glimpse = extract_glimpse(image, loc, &self.cfg.glimpse)?;
        let feat = self.encoder.encode_glimpse(tape, p, &glimpse)?;
        let b_t = self.glimpse_net.forward(tape, p, feat, loc)?;
        self.lstm.step(tape, p, b_t, state)
    }

    /// Runs one episode on `tape`, returning the trace and the nodes needed for the loss.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        image: &Tensor,
        mode: LocationMode,
        rng: &mut impl Rng,
    ) -> Result<(EpisodeTrace, EpisodeGraph)> {
        let side = image_side(image)?;
        if side != self.cfg.image_side {
            return dim_err(format!(
                "model expects {0}x{0} images, got {side}x{side}",
                self.cfg.image_side
            ));
        }
        let n = self.cfg.n_glimpses;
        let sigma = self.cfg.sigma;
        let mut state = LstmVars {
            h: tape.constant(Tensor::zeros(&[self.cfg.hidden])),
            c: tape.constant(Tensor::zeros(&[self.cfg.hidden])),
        };
        let mut loc = Location::CENTER;
        let mut steps = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut baselines = Vec::with_capacity(n);

        for t in 0..n {
            state = self.observe(tape, p, image, loc, state)?;
            // Policy and baseline heads read a detached copy of h_t, so neither
            // the REINFORCE term nor the baseline regression reaches the LSTM.
            let h_fixed = tape.detach(state.h);
            let mean_var = self.locator.locate(tape, p, h_fixed)?;
            let mean = [tape.value(mean_var)[0], tape.value(mean_var)[1]];
            let v = self.baseline.forward(tape, p, h_fixed)?;
            baselines.push(v);

            let mut record = StepRecord {
                location: loc,
                pixel: loc_to_pixel(loc, side),
                mean,
                draw: None,
                log_density: None,
                baseline: tape.scalar(v),
            };
            let mut lp = None;
            if t + 1 < n {
                let next = sample_location(mean, sigma, rng, mode);
                if let Some(d) = next.draw {
                    let logp = tape.gaussian_log_pdf(&d, mean_var, sigma)?;
                    record.draw = Some(d);
                    record.log_density = Some(tape.scalar(logp));
                    lp = Some(logp);
                }
                loc = next.location;
            }
            log_probs.push(lp);
            steps.push(record);
        }

        let logits = self.classifier.forward(tape, p, state.h)?;
        let logit_vals = tape.value(logits).to_vec();
        let trace = EpisodeTrace {
            steps,
            predicted: argmax(&logit_vals),
            logits: logit_vals,
            reward: None,
        };
        Ok((
            trace,
            EpisodeGraph {
                logits,
                log_probs,
                baselines,
            },
        ))
    }

    /// Runs one episode without keeping the graph.
    pub fn rollout(&self, image: &Tensor, mode: LocationMode, rng: &mut impl Rng) -> Result<EpisodeTrace> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        Ok(self.rollout_on_tape(&mut tape, &p, image, mode, rng)?.0)
    }

    /// Classification logits after glimpses at exactly the given locations.
    pub fn logits_at(&self, tape: &mut Tape<'_>, p: &Bound, image: &Tensor, locations: &[Location]) -> Result<Var> {
        if locations.is_empty() {
            return Err(Error::Argument("need at least one location".into()));
        }
        let mut state = LstmVars {
            h: tape.constant(Tensor::zeros(&[self.cfg.hidden])),
            c: tape.constant(Tensor::zeros(&[self.cfg.hidden])),
        };
        for &loc in locations {
            state = self.observe(tape, p, image, loc, state)?;
        }
        self.classifier.forward(tape, p, state.h)
    }
}
