//! Command implementations behind the `ram` binary.
//!
//! Every command resolves and validates its configuration before touching
//! the filesystem, so a rejected config never leaves partial output behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ram_core::dataset::{load_dataset, save_dataset};
use ram_core::encoder::{cae_pretrain, reconstruction_mse, sample_glimpse_patches, PretrainReport};
use ram_core::glimpse::anchor_pixel;
use ram_core::pgm;
use ram_core::rng::{stream, tag};
use ram_core::trainer::{random_policy_ablation, run_training, validate, EpochMetrics, TrainEvent};
use ram_core::{Checkpoint, Error, EpisodeTrace, LabeledImage, LocationMode, RamModel, RunConfig, Tensor};
use serde::Serialize;

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Consistency(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Common {
    /// Config file (or defaults) with the seed override applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// Config for a command that may start from a checkpoint: an explicit
    /// `--config` wins, then the checkpoint's stored config, then defaults.
    fn resolve_with(&self, ck: Option<&Checkpoint>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, ck) {
            (None, Some(ck)) => ck.config.clone(),
            _ => self.resolve()?,
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(ck) = ck {
            if ck.config.model != cfg.model {
                return Err(Error::Config(
                    "model dimensions in the config differ from the checkpoint's".into(),
                ));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Balance {
    pub count: usize,
    pub positives: usize,
}

impl Balance {
    pub fn of(data: &[LabeledImage]) -> Self {
        Self {
            count: data.len(),
            positives: data.iter().filter(|d| d.label == 1).count(),
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.positives as f64 / self.count as f64
        }
    }
}

pub fn gen_data(common: &Common, out: &Path, count: usize) -> Result<Balance> {
    let cfg = common.resolve()?;
    let data = ram_core::synth::generate(&cfg.synth, count)?;
    save_dataset(out, &data)?;
    let b = Balance::of(&data);
    println!(
        "wrote {} {} images to {}: {} positive ({:.1}%)",
        b.count,
        cfg.synth.task,
        out.display(),
        b.positives,
        100.0 * b.fraction()
    );
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    /// First-layer reconstruction MSE before and after pretraining.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub report: PretrainReport,
}

pub fn pretrain(common: &Common, data_dir: &Path, out: &Path) -> Result<PretrainSummary> {
    let cfg = common.resolve()?;
    let data = load_dataset(data_dir)?;
    let mut model = RamModel::new(cfg.model.clone(), cfg.seed)?;
    let images: Vec<Tensor> = data.into_iter().map(|d| d.image).collect();
    let mut rng = stream(cfg.seed, &[tag::PRETRAIN]);
    let patches = sample_glimpse_patches(&images, &cfg.model.glimpse, cfg.pretrain_glimpses, &mut rng)?;
    let stack = model.encoder.clone();
    let initial_mse = reconstruction_mse(&model.params, &stack.layers[0], &patches)?;
    let report = cae_pretrain(&mut model.params, &stack, &patches, &cfg.pretrain, &mut rng)?;
    let final_mse = reconstruction_mse(&model.params, &stack.layers[0], &patches)?;
    Checkpoint::from_model(&model, &cfg, 0).save(out)?;
    println!("pretraining reconstruction MSE: initial {initial_mse:.6} final {final_mse:.6}");
    Ok(PretrainSummary {
        initial_mse,
        final_mse,
        report,
    })
}

/// Where `train` writes its side outputs, derived from the output checkpoint path.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    dir: PathBuf,
    stem: String,
}

impl TrainOutputs {
    pub fn new(checkpoint: &Path) -> Self {
        let dir = checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let stem = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Self {
            checkpoint: checkpoint.to_path_buf(),
            metrics: dir.join(format!("{stem}.metrics.jsonl")),
            dir,
            stem,
        }
    }

    pub fn heatmap_pgm(&self, chunk: usize) -> PathBuf {
        self.dir.join(format!("{}.chunk{chunk:03}.heatmap.pgm", self.stem))
    }

    pub fn heatmap_csv(&self, chunk: usize) -> PathBuf {
        self.dir.join(format!("{}.chunk{chunk:03}.heatmap.csv", self.stem))
    }

    pub fn chunk_checkpoint(&self, chunk: usize) -> PathBuf {
        self.dir.join(format!("{}.chunk{chunk:03}.ckpt", self.stem))
    }
}

/// One line of the metrics stream.
#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricsLine<'a> {
    Epoch(&'a EpochMetrics),
    Chunk {
        chunk: usize,
        end_epoch: usize,
        accuracy: f64,
        final_target_distance: Option<f64>,
        heatmap_total: u64,
    },
}

fn json_line(w: &mut impl Write, line: &MetricsLine<'_>) -> Result<()> {
    let text = serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{text}")?;
    Ok(())
}

pub fn train(
    common: &Common,
    data_dir: &Path,
    in_ckpt: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
) -> Result<ram_core::trainer::TrainingHistory> {
    let ck = in_ckpt.map(Checkpoint::load).transpose()?;
    let mut cfg = common.resolve_with(ck.as_ref())?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    if cfg.train.epochs == 0 {
        match in_ckpt {
            Some(src) => {
                fs::copy(src, out)?;
            }
            None => Checkpoint::from_model(&RamModel::new(cfg.model.clone(), cfg.seed)?, &cfg, 0).save(out)?,
        }
        return Ok(Default::default());
    }

    let data = load_dataset(data_dir)?;
    let (train_set, val_set) = cfg.split(&data);
    let mut model = match &ck {
        Some(ck) => ck.to_model()?,
        None => RamModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let start_epoch = ck.as_ref().map_or(0, |c| c.epoch);
    let outputs = TrainOutputs::new(out);
    let mut metrics = BufWriter::new(File::create(&outputs.metrics)?);
    let side = cfg.model.image_side;
    let history = run_training(&mut model, train_set, val_set, &cfg.train, |event| match event {
        TrainEvent::Epoch(m) => json_line(&mut metrics, &MetricsLine::Epoch(m)),
        TrainEvent::Chunk(report, model) => {
            let v = &report.validation;
            let hm = &v.heatmap;
            fs::write(outputs.heatmap_csv(report.chunk), hm.to_csv())?;
            pgm::write_bytes(&outputs.heatmap_pgm(report.chunk), side, side, &hm.to_pixels(side))?;
            Checkpoint::from_model(model, &cfg, start_epoch + report.end_epoch as u64)
                .save(&outputs.chunk_checkpoint(report.chunk))?;
            json_line(
                &mut metrics,
                &MetricsLine::Chunk {
                    chunk: report.chunk,
                    end_epoch: report.end_epoch,
                    accuracy: v.accuracy,
                    final_target_distance: v.final_target_distance,
                    heatmap_total: hm.total(),
                },
            )
        }
    })?;
    metrics.flush()?;
    Checkpoint::from_model(&model, &cfg, start_epoch + cfg.train.epochs as u64).save(out)?;
    if let Some(last) = history.chunks.last() {
        println!(
            "trained {} epochs; validation accuracy {:.4}",
            cfg.train.epochs, last.validation.accuracy
        );
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ablation: Option<f64>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = format!("accuracy {:.6}\n", self.accuracy);
        if let Some(a) = self.ablation {
            s += &format!("random_policy_accuracy {a:.6}\n");
            s += &format!("gap {:.6}\n", self.accuracy - a);
        }
        s
    }
}

/// Greedy accuracy of a checkpoint on a whole dataset, optionally alongside
/// the same model driven by uniformly random glimpse locations.
pub fn eval(common: &Common, ckpt: &Path, data_dir: &Path, ablation: bool) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = common.resolve_with(Some(&ck))?;
    let data = load_dataset(data_dir)?;
    let model = ck.to_model()?;
    let repeats = cfg.train.validation_repeats;
    let v = validate(&model, &data, LocationMode::Greedy, 1, cfg.train.heatmap_cell, cfg.seed)?;
    let ablation = ablation
        .then(|| random_policy_ablation(&model, &data, repeats, cfg.seed))
        .transpose()?;
    let report = EvalReport {
        accuracy: v.accuracy,
        ablation,
    };
    print!("{}", report.render());
    Ok(report)
}

/// One trace record per glimpse step.
#[derive(Serialize)]
struct TraceStep {
    t: usize,
    x: f64,
    y: f64,
    row: f64,
    col: f64,
    mean: [f64; 2],
    log_density: Option<f64>,
}

#[derive(Serialize)]
struct TraceResult<'a> {
    predicted: usize,
    logits: &'a [f64],
}

/// Greedy rollout of a checkpoint on one image. Writes JSON lines to `out`
/// (one per step, then the prediction) and optionally the image with the
/// glimpse path drawn on it.
pub fn trace(common: &Common, ckpt: &Path, image: &Path, out: &Path, path_image: Option<&Path>) -> Result<EpisodeTrace> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = common.resolve_with(Some(&ck))?;
    let img = pgm::read_image(image)?;
    let model = ck.to_model()?;
    let mut rng = stream(cfg.seed, &[tag::VALIDATE]);
    let tr = model.rollout(&img, LocationMode::Greedy, &mut rng)?;
    let mut w = BufWriter::new(File::create(out)?);
    for (t, s) in tr.steps.iter().enumerate() {
        let rec = TraceStep {
            t,
            x: s.location.x,
            y: s.location.y,
            row: s.pixel.0,
            col: s.pixel.1,
            mean: s.mean,
            log_density: s.log_density,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    let res = TraceResult {
        predicted: tr.predicted,
        logits: &tr.logits,
    };
    writeln!(w, "{}", serde_json::to_string(&res).map_err(|e| Error::Format(e.to_string()))?)?;
    w.flush()?;
    if let Some(p) = path_image {
        let side = cfg.model.image_side;
        pgm::write_bytes(p, side, side, &annotate_path(&img, &tr, side))?;
    }
    Ok(tr)
}

/// Grayscale copy of `image` with the glimpse centres joined by dim lines;
/// the first step is marked with a white ring, the last with a black filled square.
pub fn annotate_path(image: &Tensor, trace: &EpisodeTrace, side: usize) -> Vec<u8> {
    let mut px: Vec<u8> = image.data().iter().map(|&v| pgm::quantize(v)).collect();
    let mut put = |r: i64, c: i64, v: u8| {
        if (0..side as i64).contains(&r) && (0..side as i64).contains(&c) {
            px[r as usize * side + c as usize] = v;
        }
    };
    let pts: Vec<(i64, i64)> = trace.locations().map(|l| anchor_pixel(l, side)).collect();
    for w in pts.windows(2) {
        let ((r0, c0), (r1, c1)) = (w[0], w[1]);
        let n = (r1 - r0).abs().max((c1 - c0).abs()).max(1);
        for k in 0..=n {
            let r = r0 + (r1 - r0) * k / n;
            let c = c0 + (c1 - c0) * k / n;
            put(r, c, 128);
        }
    }
    if let (Some(&(fr, fc)), Some(&(lr, lc))) = (pts.first(), pts.last()) {
        for d in -2..=2i64 {
            for e in -2..=2i64 {
                if d.abs() == 2 || e.abs() == 2 {
                    put(fr + d, fc + e, 255);
                }
            }
        }
        for d in -1..=1 {
            for e in -1..=1 {
                put(lr + d, lc + e, 0);
            }
        }
    }
    px
}
