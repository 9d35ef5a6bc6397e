//! Conditional and permutation-invariant L1 training with Adam.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditions::ConceptValue;
use crate::corpus::Partition;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_conditional, evaluate_pit_oracle, Pool};
use crate::mixgen::{GenerationConfig, MixtureGenerator, MixtureSample};
use crate::model::{Checkpoint, ModelConfig, SeparationModel};
use crate::nn::{row, ParamGrads, ParamStore, Tape};
use crate::signal::{check_compatible, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Conditional,
    Pit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub concepts: Vec<ConceptValue>,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_halving_period: u64,
    pub epochs: u64,
    pub epoch_size: u64,
    pub objective: Objective,
    pub generation: GenerationConfig,
    pub seed: u64,
    pub grad_clip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            initial_lr: 1e-3,
            lr_halving_period: 20,
            epochs: 120,
            epoch_size: 20_000,
            objective: Objective::Conditional,
            generation: GenerationConfig::default(),
            seed: 0,
            grad_clip: 5.0,
            validation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.epoch_size == 0 || self.lr_halving_period == 0 {
            return Err(Error::Config("batch size, epochs, epoch size and halving period must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        let wants_conditioned = self.objective == Objective::Conditional;
        if wants_conditioned != model.conditioned {
            return Err(Error::Config(format!(
                "{:?} objective does not match a {} model",
                self.objective,
                if model.conditioned { "conditioned" } else { "unconditional" }
            )));
        }
        self.generation.validate()
    }
}

/// Step size for an epoch: halved every `lr_halving_period` epochs.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * 0.5f64.powi((epoch / cfg.lr_halving_period) as i32)
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// `mean|est_t - s_t| + mean|est_o - s_o|`.
pub fn conditional_loss(est_t: &Waveform, est_o: &Waveform, s_t: &Waveform, s_o: &Waveform) -> Result<f64> {
    check_compatible(est_t, s_t)?;
    check_compatible(est_o, s_o)?;
    check_compatible(est_t, est_o)?;
    Ok(mean_abs(&est_t.samples, &s_t.samples) + mean_abs(&est_o.samples, &s_o.samples))
}

/// Minimum summed L1 over the two assignments; ties keep the identity.
/// Returns the loss and `perm`, where estimate `i` is matched to reference
/// `perm[i]`.
pub fn pit_loss(estimates: [&Waveform; 2], references: [&Waveform; 2]) -> Result<(f64, [usize; 2])> {
    for e in estimates {
        for r in references {
            check_compatible(e, r)?;
        }
    }
    let cost = |i: usize, j: usize| mean_abs(&estimates[i].samples, &references[j].samples);
    let identity = cost(0, 0) + cost(1, 1);
    let swapped = cost(0, 1) + cost(1, 0);
    Ok(if swapped < identity { (swapped, [1, 0]) } else { (identity, [0, 1]) })
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

pub fn grad_norm(grads: &ParamGrads) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale gradients to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Loss of one sample, with `weight * d(loss)/d(theta)` added into `grads`.
pub fn accumulate_sample(
    model: &SeparationModel,
    sample: &MixtureSample,
    objective: Objective,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let cond = match objective {
        Objective::Conditional => Some(&sample.meta.c),
        Objective::Pit => None,
    };
    let out = model.forward_taped(&mut tape, &sample.x.samples, cond)?;
    let targets = match objective {
        Objective::Conditional => [&sample.s_t, &sample.s_o],
        Objective::Pit => {
            let est = [out.target, out.other].map(|v| Waveform::new(tape.value(v).row(0).to_vec(), sample.x.sample_rate));
            let refs = [&sample.sources[0], &sample.sources[1]];
            let (_, perm) = pit_loss([&est[0], &est[1]], refs)?;
            [refs[perm[0]], refs[perm[1]]]
        }
    };
    let lt = tape.l1(out.target, row(&targets[0].samples));
    let lo = tape.l1(out.other, row(&targets[1].samples));
    let loss = tape.add(lt, lo);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss, weight, grads)?;
    Ok(value)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradients(model: &SeparationModel, batch: &[MixtureSample], objective: Objective) -> Result<(f64, ParamGrads)> {
    let mut grads = model.params.zeros_like();
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        total += accumulate_sample(model, s, objective, w, &mut grads)?;
    }
    Ok((total * w, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: SeparationModel,
    pub optimizer: Adam,
    pub objective: Objective,
    pub grad_clip: f64,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: SeparationModel, objective: Objective, grad_clip: f64) -> Self {
        let optimizer = Adam::new(&model.params);
        Self { model, optimizer, objective, grad_clip, step: 0 }
    }

    pub fn train_step(&mut self, batch: &[MixtureSample], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let (loss, mut grads) = batch_gradients(&self.model, batch, self.objective)?;
        if !loss.is_finite() {
            let seeds: Vec<String> = batch
                .iter()
                .map(|s| format!("({}, {}, {})", s.meta.seed.base_seed, s.meta.seed.split.as_str(), s.meta.seed.index))
                .collect();
            return Err(Error::NonFinite(format!("loss {loss} at step {} on samples {}", self.step, seeds.join(" "))));
        }
        let norm = clip_grad_norm(&mut grads, self.grad_clip);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepStats { loss, grad_norm: norm })
    }
}

/// Resumable training state written after every epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub checkpoint: Checkpoint,
    pub optimizer: Adam,
    /// Epochs completed so far.
    pub epochs_done: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let state: TrainState =
            bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("corrupt training state: {e}")))?;
        // round-trip through the checked decoder
        Checkpoint::from_bytes(&state.checkpoint.to_bytes()?)?;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default)]
    pub validation: Vec<(ConceptValue, f64)>,
}

pub fn state_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.state"))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Latest per-epoch state in `dir`, if any.
pub fn latest_state(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".state"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Run (or resume) the epoch loop, writing per-epoch states, a JSON-lines
/// metrics log and a final checkpoint under `out_dir`.
pub fn train(
    model: SeparationModel,
    cfg: &TrainConfig,
    generator: &MixtureGenerator,
    out_dir: &Path,
    resume: bool,
) -> Result<(SeparationModel, Vec<EpochLog>)> {
    cfg.validate(&model.config)?;
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(model, cfg.objective, cfg.grad_clip);
    let mut start = 0;
    let metrics_path = out_dir.join(METRICS_FILE);
    if resume {
        if let Some(path) = latest_state(out_dir)? {
            let state = TrainState::load(&path)?;
            if state.seed != cfg.seed {
                return Err(Error::Checkpoint(format!("state was trained with seed {}, config has {}", state.seed, cfg.seed)));
            }
            trainer.step = state.checkpoint.step;
            trainer.model = state.checkpoint.into_model()?;
            trainer.optimizer = state.optimizer;
            start = state.epochs_done;
            truncate_metrics(&metrics_path, start)?;
            log::info!("resuming {} after epoch {start}", out_dir.display());
        }
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let validation_sets: Vec<(ConceptValue, Vec<MixtureSample>)> = match &cfg.validation {
        Some(v) => v
            .concepts
            .iter()
            .map(|&c| Ok((c, generator.make_eval_set(c, v.size, v.seed, Partition::Val, 1)?)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut logs = read_metrics(&metrics_path)?;
    let bs = cfg.batch_size as u64;
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0u64);
        let first = epoch * cfg.epoch_size;
        let mut i = 0;
        while i < cfg.epoch_size {
            let n = bs.min(cfg.epoch_size - i);
            let batch: Vec<MixtureSample> = (first + i..first + i + n)
                .map(|k| generator.sample_mixture(Partition::Train, k, cfg.seed))
                .collect::<Result<_>>()?;
            let st = trainer.train_step(&batch, lr)?;
            loss_sum += st.loss;
            norm_sum += st.grad_norm;
            steps += 1;
            i += n;
        }
        let mut validation = Vec::new();
        for (c, set) in &validation_sets {
            let report = match cfg.objective {
                Objective::Conditional => evaluate_conditional(&trainer.model, set)?,
                Objective::Pit => evaluate_pit_oracle(&trainer.model, set)?,
            };
            if let Some(m) = report.median(*c, Pool::Discriminative) {
                validation.push((*c, m));
            }
        }
        let entry = EpochLog {
            epoch,
            step: trainer.step,
            loss: loss_sum / steps as f64,
            lr,
            grad_norm: norm_sum / steps as f64,
            validation,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {lr:.2e} ({:.1}s)",
            entry.loss,
            t0.elapsed().as_secs_f64()
        );
        let mut f = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
        writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        logs.push(entry);
        TrainState {
            checkpoint: Checkpoint::new(&trainer.model, trainer.step),
            optimizer: trainer.optimizer.clone(),
            epochs_done: epoch + 1,
            seed: cfg.seed,
        }
        .save(&state_path(out_dir, epoch))?;
    }
    trainer.model.save(&out_dir.join(FINAL_CHECKPOINT), trainer.step)?;
    Ok((trainer.model, logs))
}

fn read_metrics(path: &Path) -> Result<Vec<EpochLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Drop log lines for epochs that were not checkpointed.
fn truncate_metrics(path: &Path, epochs_done: u64) -> Result<()> {
    let kept: Vec<EpochLog> = read_metrics(path)?.into_iter().filter(|e| e.epoch < epochs_done).collect();
    let mut text = String::new();
    for e in &kept {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
