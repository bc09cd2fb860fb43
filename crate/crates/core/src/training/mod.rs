//! Joint optimisation of the five pretraining objectives, with checkpointing
//! and a per-step loss log.

pub mod checkpoint;
pub mod model;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datapipe::{build_vocab, tokenize, Dataset, SampleRecord, SplitSpec, Vocabulary};
use crate::encoders::{patchify, GeoCoordinate, ImageArray, TokenSequence};
use crate::error::{Error, Result};
use crate::masking::{sample_image_mask, sample_text_mask, MaskAction, MaskPlan, MaskingConfig};
use crate::objectives::{
    contrastive_loss, fit_patch_codebook, itm_loss, mim_loss, mlm_loss, quantize_patch, LossBreakdown, LossWeights,
    PatchCodebook,
};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{FlavarsModel, MimTarget, ModelConfig, Modules};
pub use optim::{learning_rate, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Patches drawn from the training images to fit the MIM codebook.
    #[serde(default = "default_codebook_samples")]
    pub codebook_samples: usize,
    /// Probability that a sample's caption is swapped for another batch member's.
    #[serde(default = "default_itm_negative_prob")]
    pub itm_negative_prob: f64,
    /// Upper bound on the vocabulary built from training captions.
    #[serde(default = "default_vocab_max_size")]
    pub vocab_max_size: usize,
}

fn default_codebook_samples() -> usize {
    4096
}
fn default_itm_negative_prob() -> f64 {
    0.5
}
fn default_vocab_max_size() -> usize {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            seed: 0,
            loss_weights: LossWeights::default(),
            masking: MaskingConfig::default(),
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
            codebook_samples: default_codebook_samples(),
            itm_negative_prob: default_itm_negative_prob(),
            vocab_max_size: default_vocab_max_size(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2 so contrastive losses have negatives",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.itm_negative_prob) {
            return Err(Error::Config("itm_negative_prob must lie in [0, 1]".into()));
        }
        self.loss_weights.validate()?;
        self.masking.validate()
    }
}

/// One fully paired training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: ImageArray<f32>,
    pub tokens: TokenSequence,
    pub coord: GeoCoordinate,
}

/// A batch with every random choice already made, so the loss is a pure
/// function of the parameters.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T> {
    pub batch: usize,
    pub patches: Tensor<T>,
    pub image_plans: Vec<MaskPlan>,
    /// Rows of the masked vision states that hold masked patches.
    pub mim_rows: Vec<usize>,
    pub mim_codes: Vec<usize>,
    pub mim_pixels: Tensor<T>,
    pub tokens: Vec<TokenSequence>,
    pub corrupted: Vec<TokenSequence>,
    /// Rows of the corrupted text states that were selected for MLM.
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    /// Caption index paired with each image for matching; label true when it is the image's own.
    pub itm_caption: Vec<usize>,
    pub itm_labels: Vec<bool>,
    pub coords: Vec<GeoCoordinate>,
}

pub fn prepare_batch<T: Scalar>(
    samples: &[TrainSample],
    config: &ModelConfig,
    masking: &MaskingConfig,
    itm_negative_prob: f64,
    codebook: Option<&PatchCodebook>,
    rng: &mut Rng,
) -> Result<PreparedBatch<T>> {
    let b = samples.len();
    if b < 2 {
        return Err(Error::InvalidBatch(format!("batch of {b} samples; at least 2 are needed")));
    }
    let vc = &config.vision;
    let p = vc.num_patches();
    let per_image: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| patchify(&s.image, vc.patch_size))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = per_image.iter().collect();
    let stacked = Tensor::vstack(&refs)?;
    if stacked.shape() != (b * p, vc.patch_dim()) {
        return Err(Error::Config(format!(
            "images do not match the vision config ({}px, {} channels)",
            vc.image_size, vc.channels
        )));
    }
    let mut image_plans = Vec::with_capacity(b);
    let mut mim_rows = Vec::new();
    let mut mim_codes = Vec::new();
    let mut pixel_rows = Vec::new();
    let mut tokens = Vec::with_capacity(b);
    let mut corrupted = Vec::with_capacity(b);
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut itm_caption = Vec::with_capacity(b);
    let mut itm_labels = Vec::with_capacity(b);
    let len = samples[0].tokens.len();
    for (i, s) in samples.iter().enumerate() {
        let plan = sample_image_mask(p, masking.image_mask_ratio, rng)?;
        for &pos in plan.positions() {
            mim_rows.push(i * (p + 1) + 1 + pos);
            let patch = per_image[i].row(pos);
            match config.mim_target {
                MimTarget::Codebook => {
                    let cb = codebook.ok_or_else(|| Error::Config("codebook MIM needs a fitted codebook".into()))?;
                    mim_codes.push(quantize_patch(patch, cb)?);
                }
                MimTarget::Pixels => pixel_rows.push(patch.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>()),
            }
        }
        image_plans.push(plan);
        if s.tokens.len() != len {
            return Err(Error::InvalidBatch("captions in a batch must share one length".into()));
        }
        let (tplan, bad) = sample_text_mask(
            &s.tokens,
            masking.text_mask_prob,
            masking.mlm_actions,
            config.text.vocab_size,
            rng,
        )?;
        for &pos in tplan.positions() {
            mlm_rows.push(i * len + pos);
            mlm_targets.push(s.tokens.ids()[pos] as usize);
        }
        tokens.push(s.tokens.clone());
        corrupted.push(bad);
        if rng.random::<f64>() < itm_negative_prob {
            let mut j = rng.random_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            itm_caption.push(j);
            itm_labels.push(false);
        } else {
            itm_caption.push(i);
            itm_labels.push(true);
        }
    }
    let mim_pixels = if pixel_rows.is_empty() {
        Tensor::zeros(0, vc.patch_dim())
    } else {
        Tensor::from_rows(&pixel_rows)?
    };
    Ok(PreparedBatch {
        batch: b,
        patches: stacked.cast(),
        image_plans,
        mim_rows,
        mim_codes,
        mim_pixels,
        tokens,
        corrupted,
        mlm_rows,
        mlm_targets,
        itm_caption,
        itm_labels,
        coords: samples.iter().map(|s| s.coord).collect(),
    })
}

/// Graph handles of every loss component and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mim: Var,
    pub mlm: Var,
    pub itm: Var,
    pub contrastive_it: Var,
    pub contrastive_il: Var,
    pub contrastive_tl: Option<Var>,
    pub total: Var,
}

fn mask_all(n: usize) -> Result<MaskPlan> {
    MaskPlan::new((0..n).collect(), vec![MaskAction::Mask; n])
}

/// Builds the full forward pass: clean and masked vision, clean and corrupted
/// text, fusion over (possibly mismatched) pairs, and the location encoder.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    modules: &Modules,
    config: &ModelConfig,
    batch: &PreparedBatch<T>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let b = batch.batch;
    let temp = &config.temperature;
    let clean = modules.vision.forward(g, &batch.patches, None)?;
    let masked = modules.vision.forward(g, &batch.patches, Some(&batch.image_plans))?;
    let text = modules.text.forward(g, &batch.tokens)?;
    let text_bad = modules.text.forward(g, &batch.corrupted)?;
    let loc = modules.location.forward(g, &batch.coords);
    let log_tau = g.param(modules.log_tau);

    let masked_rows = g.gather_rows(masked.states, &batch.mim_rows)?;
    let mim_pred = modules.mim_head.forward(g, masked_rows);
    let mim = match config.mim_target {
        MimTarget::Codebook => mim_loss(g, mim_pred, &batch.mim_codes, &mask_all(batch.mim_rows.len())?)?,
        MimTarget::Pixels if batch.mim_rows.is_empty() => g.constant(Tensor::scalar(T::zero())),
        MimTarget::Pixels => g.mse(mim_pred, batch.mim_pixels.clone())?,
    };

    let mlm_states = g.gather_rows(text_bad.states, &batch.mlm_rows)?;
    let mlm_logits = modules.mlm_head.forward(g, mlm_states);
    let mlm = mlm_loss(g, mlm_logits, &batch.mlm_targets, &mask_all(batch.mlm_rows.len())?)?;

    let len = text.seq_len;
    let mut rows = Vec::with_capacity(b * len);
    let mut pad = Vec::with_capacity(b * len);
    for &c in &batch.itm_caption {
        rows.extend(c * len..(c + 1) * len);
        pad.extend_from_slice(batch.tokens[c].pad_mask());
    }
    let paired_text = g.gather_rows(text.states, &rows)?;
    let fused = modules
        .fusion
        .forward(g, clean.states, clean.seq_len, paired_text, len, &pad)?;
    let itm_logits = modules.itm_head.forward(g, fused.cls);
    let itm = itm_loss(g, itm_logits, &batch.itm_labels)?;

    let contrastive_it = contrastive_loss(g, clean.pooled, text.pooled, log_tau, temp)?;
    let contrastive_il = contrastive_loss(g, clean.pooled, loc, log_tau, temp)?;
    let contrastive_tl = if weights.w_contrastive_tl > 0.0 {
        Some(contrastive_loss(g, text.pooled, loc, log_tau, temp)?)
    } else {
        None
    };
    let mut terms = vec![
        (mim, weights.w_mim),
        (mlm, weights.w_mlm),
        (itm, weights.w_itm),
        (contrastive_it, weights.w_contrastive_it),
        (contrastive_il, weights.w_contrastive_il),
    ];
    if let Some(tl) = contrastive_tl {
        terms.push((tl, weights.w_contrastive_tl));
    }
    let total = g.weighted_sum(&terms);
    Ok(LossVars {
        mim,
        mlm,
        itm,
        contrastive_it,
        contrastive_il,
        contrastive_tl,
        total,
    })
}

/// Reads loss values out of a built graph, failing on the first non-finite component.
pub fn breakdown<T: Scalar>(g: &Graph<T>, vars: &LossVars) -> Result<LossBreakdown> {
    let read = |name: &str, v: Var| -> Result<f64> {
        let x = g.value(v).item().as_f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFiniteLoss { component: name.into() })
        }
    };
    Ok(LossBreakdown {
        mim: read("mim", vars.mim)?,
        mlm: read("mlm", vars.mlm)?,
        itm: read("itm", vars.itm)?,
        contrastive_it: read("contrastive_it", vars.contrastive_it)?,
        contrastive_il: read("contrastive_il", vars.contrastive_il)?,
        contrastive_tl: vars.contrastive_tl.map(|v| read("contrastive_tl", v)).transpose()?,
        total: read("total", vars.total)?,
    })
}

/// One structured line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub mim: f64,
    pub mlm: f64,
    pub itm: f64,
    pub c_it: f64,
    pub c_il: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_tl: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

impl LogLine {
    pub fn new(step: u64, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            step,
            mim: b.mim,
            mlm: b.mlm,
            itm: b.itm,
            c_it: b.contrastive_it,
            c_il: b.contrastive_il,
            c_tl: b.contrastive_tl,
            total: b.total,
            lr,
        }
    }
}

/// Model, optimiser, and the step counter + random stream that make runs resumable.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlavarsModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    pub rng: Rng,
}

impl Trainer {
    pub fn new(model: FlavarsModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.adamw.clone(), &model.store);
        let rng = rng::derived(config.seed, "train", 0);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
            rng,
        })
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        learning_rate(c.learning_rate, self.step, c.warmup_steps, c.steps)
    }

    /// Forward, backward and one optimiser update at the scheduled learning rate.
    pub fn train_step(&mut self, samples: &[TrainSample]) -> Result<LossBreakdown> {
        let lr = self.current_lr();
        self.train_step_with_lr(samples, lr)
    }

    pub fn train_step_with_lr(&mut self, samples: &[TrainSample], lr: f64) -> Result<LossBreakdown> {
        let model = &self.model;
        let batch: PreparedBatch<f32> = prepare_batch(
            samples,
            &model.config,
            &self.config.masking,
            self.config.itm_negative_prob,
            model.codebook.as_ref(),
            &mut self.rng,
        )?;
        let (losses, grads) = {
            let mut g = Graph::new(&model.store);
            let vars = compute_losses(&mut g, &model.modules, &model.config, &batch, &self.config.loss_weights)?;
            let losses = breakdown(&g, &vars)?;
            (losses, g.backward(vars.total))
        };
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                component: "gradient".into(),
            });
        }
        self.optimizer
            .step(&mut self.model.store, &grads, lr, self.config.weight_decay);
        self.step += 1;
        Ok(losses)
    }
}

/// Where `fit` writes and whether it continues an earlier run.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Overwrite an existing run directory.
    pub force: bool,
}

pub struct FitOutcome {
    pub trainer: Trainer,
    pub vocab: Vocabulary,
    pub log_path: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<LogLine>,
}

pub const LOG_FILE: &str = "loss_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}"))
}

/// Loads, tokenizes and pairs records for training.
pub fn load_samples(dataset: &Dataset, records: &[SampleRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainSample>> {
    let samples: Vec<Result<TrainSample>> = par::map_slice(records, |r| {
        Ok(TrainSample {
            image: dataset.load_image(r)?,
            tokens: tokenize(&r.caption, vocab, max_len)?,
            coord: r.coordinate()?,
        })
    });
    samples.into_iter().collect()
}

/// Fits the MIM codebook on a seeded sample of training patches.
pub fn fit_codebook(samples: &[TrainSample], config: &ModelConfig, max_patches: usize, seed: u64) -> Result<PatchCodebook> {
    let mut all = Vec::new();
    for s in samples {
        let p = patchify(&s.image, config.vision.patch_size)?;
        all.extend((0..p.rows()).map(|r| p.row(r).to_vec()));
    }
    let mut r = rng::derived(seed, "codebook", 0);
    if all.len() > max_patches {
        all.shuffle(&mut r);
        all.truncate(max_patches.max(config.codebook_size));
    }
    fit_patch_codebook(&Tensor::from_rows(&all)?, config.codebook_size, &mut r)
}

/// Seeded per-epoch order of training indices.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(seed, "epoch", epoch));
    order
}

/// Completes a model config with the vocabulary size.
pub fn resolve_model_config(config: &ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut c = config.clone();
    if c.text.vocab_size == 0 {
        c.text.vocab_size = vocab.len();
    } else if c.text.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "text.vocab_size {} disagrees with the vocabulary's {} tokens",
            c.text.vocab_size,
            vocab.len()
        )));
    }
    c.validate()?;
    Ok(c)
}

/// Trains on the split's train ids; logs every step and checkpoints every
/// `checkpoint_every` steps and at the end.
pub fn fit(
    model_config: &ModelConfig,
    config: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    options: &FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    let records = dataset.select(&split.train)?;
    if records.len() < config.batch_size {
        return Err(Error::Config(format!(
            "train split has {} records, fewer than batch_size {}",
            records.len(),
            config.batch_size
        )));
    }
    let log_path = options.out_dir.join(LOG_FILE);
    if options.resume.is_none() && log_path.exists() && !options.force {
        return Err(Error::Config(format!(
            "{} already holds a run; pass force to overwrite",
            options.out_dir.display()
        )));
    }
    fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(format!("creating {}", options.out_dir.display()), e))?;

    let (mut trainer, vocab, mut history) = match &options.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, None, false)?;
            let resolved = resolve_model_config(model_config, &ck.vocab)?;
            if resolved.fingerprint() != ck.model.config.fingerprint() {
                return Err(Error::Fingerprint {
                    checkpoint: ck.model.config.fingerprint(),
                    config: resolved.fingerprint(),
                });
            }
            let history = read_log(&log_path, ck.step)?;
            let vocab = ck.vocab.clone();
            (ck.into_trainer(config.clone())?, vocab, history)
        }
        None => {
            let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
            let vocab = build_vocab(&captions, config.vocab_max_size)?;
            let resolved = resolve_model_config(model_config, &vocab)?;
            let model = FlavarsModel::new(&resolved, config.seed)?;
            (Trainer::new(model, config.clone())?, vocab, Vec::new())
        }
    };
    let max_len = trainer.model.config.text.max_len;
    let samples = load_samples(dataset, &records, &vocab, max_len)?;
    if trainer.model.config.mim_target == MimTarget::Codebook && trainer.model.codebook.is_none() {
        trainer.model.codebook = Some(fit_codebook(
            &samples,
            &trainer.model.config,
            config.codebook_samples,
            config.seed,
        )?);
    }

    let mut log = String::new();
    for line in &history {
        log.push_str(&serde_json::to_string(line)?);
        log.push('\n');
    }
    fs::write(&log_path, log.as_bytes()).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;

    let b = config.batch_size;
    let per_epoch = (samples.len() / b) as u64;
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut last_checkpoint = None;
    while trainer.step < config.steps {
        let step = trainer.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, samples.len());
            order_epoch = epoch;
        }
        let start = (step % per_epoch) as usize * b;
        let batch: Vec<TrainSample> = order[start..start + b].iter().map(|&i| samples[i].clone()).collect();
        let lr = trainer.current_lr();
        let losses = trainer.train_step(&batch)?;
        let line = LogLine::new(trainer.step, &losses, lr);
        writeln!(log_file, "{}", serde_json::to_string(&line)?)
            .map_err(|e| Error::io(format!("appending to {}", log_path.display()), e))?;
        log::info!(
            "step {} total {:.4} (mim {:.3} mlm {:.3} itm {:.3} c_it {:.3} c_il {:.3}) lr {:.2e}",
            line.step,
            line.total,
            line.mim,
            line.mlm,
            line.itm,
            line.c_it,
            line.c_il,
            lr
        );
        history.push(line);
        let done = trainer.step == config.steps;
        if done || (config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0) {
            let dir = checkpoint_path(&options.out_dir, trainer.step);
            save_checkpoint(&dir, &trainer, &vocab)?;
            fs::write(options.out_dir.join(CHECKPOINT_DIR).join("latest"), format!("{}\n", dir.display()))
                .map_err(|e| Error::io("writing latest checkpoint pointer", e))?;
            last_checkpoint = Some(dir);
        }
    }
    let checkpoint = last_checkpoint.unwrap_or_else(|| checkpoint_path(&options.out_dir, trainer.step));
    Ok(FitOutcome {
        trainer,
        vocab,
        log_path,
        checkpoint,
        history,
    })
}

/// Log lines with `step <= up_to`; missing file means no history.
pub fn read_log(path: &Path, up_to: u64) -> Result<Vec<LogLine>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: LogLine = serde_json::from_str(line)?;
        if l.step <= up_to {
            out.push(l);
        }
    }
    Ok(out)
}
