//! Training loop, Adam optimizer, checkpoint state and evaluation.
//!
//! Seed discipline: episode seeds are even for training (`(base + step) * 2`)
//! and odd for validation/evaluation (`(base + i) * 2 + 1`), so the two
//! populations can never collide for any base seed.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::apsp::{apsp_forward, apsp_train_forward, ContextPair};
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint, ReportRow};
use crate::losses;
use crate::metrics;
use crate::net::{ModelParams, NetConfig, Network};
use crate::taskgen::{sample_episode, sample_task_kind, Episode, TaskKind, TaskSpec};
use crate::tensor::{Dtype, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Configuration.

/// Everything a training run needs, serializable to flat `key = value` text.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub dtype: Dtype,
    pub side: usize,
    pub tasks: Vec<TaskKind>,
    pub net: NetConfig,
    /// Mini-context size used for streaming in both phases.
    pub mini_context: usize,
    /// Fixed context size of the first schedule phase.
    pub phase1_context: usize,
    /// Final phase draws the context size uniformly from 1..=this.
    pub phase2_max_context: usize,
    /// Steps between validation passes (0 = auto: max(50, steps / 20)).
    pub val_interval: u64,
    /// Size of the fixed validation episode bank.
    pub val_episodes: usize,
    /// Validations without improvement before the learning rate halves.
    pub plateau_patience: u64,
    pub augment: bool,
    pub bias_coeff_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-4,
            seed: 0,
            dtype: Dtype::F32,
            side: 16,
            tasks: TaskKind::ALL.to_vec(),
            net: NetConfig::default(),
            mini_context: 3,
            phase1_context: 3,
            phase2_max_context: 8,
            val_interval: 0,
            val_episodes: 32,
            plateau_patience: 4,
            augment: false,
            bias_coeff_scale: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// First-phase length: five sixths of the schedule runs at the fixed
    /// context size, the remainder with uniformly drawn context sizes.
    pub fn phase1_steps(&self) -> u64 {
        self.steps * 5 / 6
    }

    pub fn effective_val_interval(&self) -> u64 {
        if self.val_interval > 0 {
            self.val_interval
        } else {
            (self.steps / 20).max(50)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.tasks.is_empty() {
            return Err(Error::invalid("task list is empty"));
        }
        if self.mini_context == 0 || self.phase1_context == 0 || self.phase2_max_context == 0 {
            return Err(Error::invalid("context sizes must be >= 1"));
        }
        if self.val_episodes == 0 {
            return Err(Error::invalid("validation bank must hold at least one episode"));
        }
        self.net.validate()?;
        self.net.validate_side(self.side)?;
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("steps".into(), self.steps.to_string());
        m.insert("lr".into(), format!("{:e}", self.lr));
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "dtype".into(),
            match self.dtype {
                Dtype::F32 => "f32".into(),
                Dtype::F64 => "f64".into(),
            },
        );
        m.insert("side".into(), self.side.to_string());
        let tasks: Vec<&str> = self.tasks.iter().map(|k| k.name()).collect();
        m.insert("tasks".into(), tasks.join(","));
        m.insert("net.stages".into(), self.net.stages.to_string());
        m.insert("net.base_channels".into(), self.net.base_channels.to_string());
        let fusion: Vec<String> = self.net.fusion_stages.iter().map(|s| s.to_string()).collect();
        m.insert("net.fusion_stages".into(), fusion.join(","));
        m.insert(
            "net.residual_blocks".into(),
            self.net.residual_blocks_per_stage.to_string(),
        );
        m.insert("mini_context".into(), self.mini_context.to_string());
        m.insert("phase1_context".into(), self.phase1_context.to_string());
        m.insert("phase2_max_context".into(), self.phase2_max_context.to_string());
        m.insert("val_interval".into(), self.val_interval.to_string());
        m.insert("val_episodes".into(), self.val_episodes.to_string());
        m.insert("plateau_patience".into(), self.plateau_patience.to_string());
        m.insert("augment".into(), self.augment.to_string());
        m.insert("bias_coeff_scale".into(), self.bias_coeff_scale.to_string());
        m.insert("beta1".into(), self.beta1.to_string());
        m.insert("beta2".into(), self.beta2.to_string());
        m.insert("eps".into(), format!("{:e}", self.eps));
        m.insert("log_every".into(), self.log_every.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        io::render_config(&self.to_map())
    }

    /// Parse a config map. Unknown keys are rejected (except the `state.`
    /// namespace used by checkpoints). Missing keys keep their defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (key, value) in map {
            let fail = |what: &str| {
                Error::invalid(format!("config key '{key}': bad {what} value '{value}'"))
            };
            match key.as_str() {
                "steps" => cfg.steps = value.parse().map_err(|_| fail("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| fail("float"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| fail("integer"))?,
                "dtype" => {
                    cfg.dtype = match value.as_str() {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        _ => return Err(fail("dtype (f32 or f64)")),
                    }
                }
                "side" => cfg.side = value.parse().map_err(|_| fail("integer"))?,
                "tasks" => {
                    let mut tasks = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        if !part.is_empty() {
                            tasks.push(TaskKind::parse(part)?);
                        }
                    }
                    cfg.tasks = tasks;
                }
                "net.stages" => cfg.net.stages = value.parse().map_err(|_| fail("integer"))?,
                "net.base_channels" => {
                    cfg.net.base_channels = value.parse().map_err(|_| fail("integer"))?
                }
                "net.fusion_stages" => {
                    if value.trim() == "all" {
                        cfg.net.fusion_stages = Vec::new(); // filled below
                    } else {
                        let mut stages = Vec::new();
                        for part in value.split(',') {
                            let part = part.trim();
                            if !part.is_empty() {
                                stages.push(part.parse().map_err(|_| fail("stage list"))?);
                            }
                        }
                        cfg.net.fusion_stages = stages;
                    }
                }
                "net.residual_blocks" => {
                    cfg.net.residual_blocks_per_stage =
                        value.parse().map_err(|_| fail("integer"))?
                }
                "mini_context" => cfg.mini_context = value.parse().map_err(|_| fail("integer"))?,
                "phase1_context" => {
                    cfg.phase1_context = value.parse().map_err(|_| fail("integer"))?
                }
                "phase2_max_context" => {
                    cfg.phase2_max_context = value.parse().map_err(|_| fail("integer"))?
                }
                "val_interval" => cfg.val_interval = value.parse().map_err(|_| fail("integer"))?,
                "val_episodes" => cfg.val_episodes = value.parse().map_err(|_| fail("integer"))?,
                "plateau_patience" => {
                    cfg.plateau_patience = value.parse().map_err(|_| fail("integer"))?
                }
                "augment" => cfg.augment = value.parse().map_err(|_| fail("boolean"))?,
                "bias_coeff_scale" => {
                    cfg.bias_coeff_scale = value.parse().map_err(|_| fail("float"))?
                }
                "beta1" => cfg.beta1 = value.parse().map_err(|_| fail("float"))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| fail("float"))?,
                "eps" => cfg.eps = value.parse().map_err(|_| fail("float"))?,
                "log_every" => cfg.log_every = value.parse().map_err(|_| fail("integer"))?,
                k if k.starts_with("state.") => {}
                _ => {
                    return Err(Error::invalid(format!("unknown config key '{key}'")));
                }
            }
        }
        if cfg.net.fusion_stages.is_empty() {
            cfg.net.fusion_stages = (1..=cfg.net.stages).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        TrainConfig::from_map(&io::parse_config(text)?)
    }
}

// ---------------------------------------------------------------------------
// Adam.

/// Bias-corrected Adam state. Moments are kept in f64 regardless of the
/// training precision; they serialize to f32 in checkpoints.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ModelParams<T>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
            v.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        AdamState { m, v, t: 0 }
    }
}

/// One optimizer step. A non-finite gradient aborts before touching any
/// state, naming the offending parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for parameter '{name}' contains NaN or Inf"
            )));
        }
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::invalid(format!(
                "gradient table is missing parameter '{name}'"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for name in &names {
        let g = &grads[name];
        let p = params.get(name)?.clone();
        let m = state.m.get_mut(name).expect("moment mirrors params");
        let mut mdata = m.data().to_vec();
        let v = state.v.get_mut(name).expect("moment mirrors params");
        let mut vdata = v.data().to_vec();
        let mut pdata = p.data().to_vec();
        for i in 0..pdata.len() {
            let gi = g.data()[i].to_f64();
            mdata[i] = beta1 * mdata[i] + (1.0 - beta1) * gi;
            vdata[i] = beta2 * vdata[i] + (1.0 - beta2) * gi * gi;
            let mhat = mdata[i] / bc1;
            let vhat = vdata[i] / bc2;
            let step = lr * mhat / (vhat.sqrt() + eps);
            pdata[i] = T::from_f64(pdata[i].to_f64() - step);
        }
        *m = Tensor::new(p.shape(), mdata)?;
        *v = Tensor::new(p.shape(), vdata)?;
        params.set(name, Tensor::new(p.shape(), pdata)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop.

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct LogLine {
    pub step: u64,
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} phase={} loss={:.6} lr={:.3e}",
            self.step, self.phase, self.loss, self.lr
        )
    }
}

/// What a (possibly resumed) run returns: the best-validation parameters,
/// the final parameters and optimizer state for further resumption, and
/// summary numbers.
pub struct TrainResult<T: Scalar> {
    pub best: Network<T>,
    pub last: Network<T>,
    pub adam: AdamState,
    pub steps_done: u64,
    pub lr: f64,
    pub best_val: f64,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// State carried across an interrupt/resume boundary.
pub struct ResumeState<T: Scalar> {
    pub net: Network<T>,
    pub adam: AdamState,
    pub step: u64,
    pub lr: f64,
    pub best_val: f64,
}

fn build_val_bank(cfg: &TrainConfig) -> Result<Vec<Episode>> {
    let mut bank = Vec::with_capacity(cfg.val_episodes);
    for i in 0..cfg.val_episodes {
        let seed = (cfg.seed + i as u64) * 2 + 1;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let kind = sample_task_kind(&mut rng, &cfg.tasks)?;
        // Validation always uses the fixed phase-1 context size so the loss
        // stays comparable across the whole run.
        let mut spec = TaskSpec::new(kind, cfg.side);
        spec.params.bias_coeff_scale = cfg.bias_coeff_scale;
        bank.push(sample_episode(&spec, cfg.phase1_context, seed)?);
    }
    Ok(bank)
}

/// Weighted mean loss of the streaming forward pass over an episode bank.
pub fn validation_loss<T: Scalar>(
    net: &Network<T>,
    bank: &[Episode],
    mini: usize,
) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::invalid("validation bank is empty"));
    }
    let mut total = 0.0;
    for ep in bank {
        let pairs = ep.context_pairs::<T>()?;
        let x = ep.target_input::<T>();
        let y = ep.target_output::<T>();
        let pred = apsp_forward(net, &x, &pairs, mini)?;
        let loss = losses::task_loss(ep.kind, &pred, &y)?.to_f64();
        total += losses::task_loss_weight(ep.kind) * loss;
    }
    Ok(total / bank.len() as f64)
}

/// Run (or continue) training. `on_log` receives one line per `log_every`
/// steps plus the first step of the run and every validation result.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    resume: Option<ResumeState<T>>,
    mut on_log: impl FnMut(&LogLine),
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let (mut net, mut adam, start_step, mut lr, mut best_val) = match resume {
        Some(r) => (r.net, r.adam, r.step, r.lr, r.best_val),
        None => {
            let net = Network::<T>::init(cfg.net.clone(), cfg.seed)?;
            let adam = AdamState::new(&net.params);
            (net, adam, 0, cfg.lr, f64::INFINITY)
        }
    };
    if start_step >= cfg.steps {
        return Err(Error::invalid(format!(
            "resume step {start_step} is already past the configured {} steps",
            cfg.steps
        )));
    }
    let bank = build_val_bank(cfg)?;
    let val_interval = cfg.effective_val_interval();
    let phase1 = cfg.phase1_steps();
    let mut best_params = net.params.clone();
    let mut stale_evals = 0u64;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for step in start_step..cfg.steps {
        let in_phase1 = step < phase1;
        let episode_seed = (cfg.seed + step) * 2;
        let mut rng = ChaCha12Rng::seed_from_u64(episode_seed);
        let kind = sample_task_kind(&mut rng, &cfg.tasks)?;
        let context_len = if in_phase1 {
            cfg.phase1_context
        } else {
            rng.random_range(1..=cfg.phase2_max_context)
        };
        let shuffle_seed = rng.next_u64();
        let mut spec = TaskSpec::new(kind, cfg.side).with_augment(cfg.augment);
        spec.params.bias_coeff_scale = cfg.bias_coeff_scale;
        let episode = sample_episode(&spec, context_len, episode_seed)?;
        let pairs: Vec<ContextPair<T>> = episode.context_pairs()?;
        let x = episode.target_input::<T>();
        let y = episode.target_output::<T>();
        let (loss, grads) = apsp_train_forward(
            &net,
            &x,
            &y,
            &pairs,
            cfg.mini_context,
            kind,
            shuffle_seed,
        )
        .map_err(|e| Error::NonFinite(format!("step {}: {e}", step + 1)))?;
        adam_step(
            &mut net.params,
            &grads,
            &mut adam,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        )
        .map_err(|e| Error::NonFinite(format!("step {}: {e}", step + 1)))?;
        if first_loss.is_nan() {
            first_loss = loss;
        }
        last_loss = loss;
        let line = LogLine {
            step: step + 1,
            phase: if in_phase1 { 1 } else { 2 },
            loss,
            lr,
        };
        if step == start_step || (step + 1) % cfg.log_every.max(1) == 0 {
            on_log(&line);
        }
        if (step + 1) % val_interval == 0 || step + 1 == cfg.steps {
            let val = validation_loss(&net, &bank, cfg.mini_context)?;
            on_log(&LogLine {
                step: step + 1,
                phase: if in_phase1 { 1 } else { 2 },
                loss: val,
                lr,
            });
            if val < best_val {
                best_val = val;
                best_params = net.params.clone();
                stale_evals = 0;
            } else {
                stale_evals += 1;
                if stale_evals >= cfg.plateau_patience {
                    lr *= 0.5;
                    stale_evals = 0;
                }
            }
        }
    }

    let best = Network::from_params(cfg.net.clone(), best_params)?;
    Ok(TrainResult {
        best,
        last: net,
        adam,
        steps_done: cfg.steps,
        lr,
        best_val,
        first_loss,
        last_loss,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint packing.

/// Pack training state into the on-disk checkpoint structure. Model weights
/// keep their parameter names; Adam moments get `adam.m.` / `adam.v.`
/// prefixes; the step counter, learning rate and best validation loss ride
/// in the config blob under the `state.` namespace.
pub fn pack_checkpoint<T: Scalar>(
    cfg: &TrainConfig,
    net: &Network<T>,
    adam: Option<&AdamState>,
    step: u64,
    lr: f64,
    best_val: f64,
) -> Checkpoint {
    let mut config = cfg.to_map();
    config.insert("state.step".into(), step.to_string());
    config.insert("state.lr".into(), format!("{lr:e}"));
    config.insert("state.best_val".into(), format!("{best_val:e}"));
    let mut tensors = BTreeMap::new();
    for (name, t) in net.params.iter() {
        tensors.insert(name.clone(), t.cast::<f32>());
    }
    if let Some(adam) = adam {
        for (name, t) in &adam.m {
            tensors.insert(format!("adam.m.{name}"), t.cast::<f32>());
        }
        for (name, t) in &adam.v {
            tensors.insert(format!("adam.v.{name}"), t.cast::<f32>());
        }
        config.insert("state.adam_t".into(), adam.t.to_string());
    }
    Checkpoint {
        config: io::render_config(&config),
        tensors,
    }
}

/// Unpack a checkpoint into a network (and optimizer state if the moments
/// were saved). Returns the config, the resume state, and whether Adam
/// moments were present.
pub fn unpack_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(TrainConfig, ResumeState<T>)> {
    let map = io::parse_config(&ck.config)?;
    let cfg = TrainConfig::from_map(&map)?;
    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut adam_m: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for (name, t) in &ck.tensors {
        if let Some(p) = name.strip_prefix("adam.m.") {
            adam_m.insert(p.to_string(), t.cast::<f64>());
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            adam_v.insert(p.to_string(), t.cast::<f64>());
        } else {
            params.insert(name.clone(), t.cast::<T>());
        }
    }
    let net = Network::from_params(cfg.net.clone(), ModelParams::new(params))?;
    let step: u64 = map
        .get("state.step")
        .map(|s| s.parse())
        .transpose()
        .map_err(|_| Error::invalid("bad state.step in checkpoint"))?
        .unwrap_or(0);
    let lr: f64 = map
        .get("state.lr")
        .map(|s| s.parse())
        .transpose()
        .map_err(|_| Error::invalid("bad state.lr in checkpoint"))?
        .unwrap_or(cfg.lr);
    let best_val: f64 = map
        .get("state.best_val")
        .map(|s| s.parse())
        .transpose()
        .map_err(|_| Error::invalid("bad state.best_val in checkpoint"))?
        .unwrap_or(f64::INFINITY);
    let adam = if adam_m.is_empty() {
        AdamState::new(&net.params)
    } else {
        let t: u64 = map
            .get("state.adam_t")
            .map(|s| s.parse())
            .transpose()
            .map_err(|_| Error::invalid("bad state.adam_t in checkpoint"))?
            .unwrap_or(step);
        AdamState {
            m: adam_m,
            v: adam_v,
            t,
        }
    };
    Ok((
        cfg,
        ResumeState {
            net,
            adam,
            step,
            lr,
            best_val,
        },
    ))
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Evaluate a predictor over freshly sampled held-out episodes: for every
/// (task, context size) cell, `repeats` episodes are scored with Dice
/// (mask tasks, threshold 0.5) or PSNR (everything else).
///
/// `predict` maps an episode to a predicted target volume; pass
/// [`network_predictor`] for the real model. Infinite PSNR values (exact
/// match) make the cell mean infinite with std 0.
pub fn evaluate_with<T: Scalar>(
    mut predict: impl FnMut(&Episode) -> Result<Tensor<T>>,
    tasks: &[TaskKind],
    context_sizes: &[usize],
    repeats: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    if tasks.is_empty() || context_sizes.is_empty() || repeats == 0 {
        return Err(Error::invalid(
            "evaluation needs at least one task, one context size and one repeat",
        ));
    }
    let mut rows = Vec::new();
    let mut counter: u64 = 0;
    for &kind in tasks {
        for &l in context_sizes {
            let mut values = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let ep_seed = (seed + counter) * 2 + 1;
                counter += 1;
                let spec = TaskSpec::new(kind, side);
                let ep = sample_episode(&spec, l, ep_seed)?;
                let pred = predict(&ep)?;
                let truth = ep.target_output::<T>();
                let v = if losses::is_mask_task(kind) {
                    metrics::dice(&pred, &truth)?
                } else {
                    metrics::psnr(&pred, &truth)?
                };
                values.push(v);
            }
            let metric = if losses::is_mask_task(kind) { "dice" } else { "psnr" };
            let (mean, std) = if values.iter().any(|v| v.is_infinite()) {
                (f64::INFINITY, 0.0)
            } else {
                metrics::mean_std(&values)?
            };
            rows.push(ReportRow {
                task: kind.name().to_string(),
                context_size: l,
                metric: metric.to_string(),
                mean,
                std,
                repeats,
            });
        }
    }
    Ok(rows)
}

/// The standard predictor: stream the episode context through the network.
pub fn network_predictor<T: Scalar>(
    net: &Network<T>,
    mini: usize,
) -> impl FnMut(&Episode) -> Result<Tensor<T>> + '_ {
    move |ep: &Episode| {
        let pairs = ep.context_pairs::<T>()?;
        let x = ep.target_input::<T>();
        apsp_forward(net, &x, &pairs, mini)
    }
}

pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    tasks: &[TaskKind],
    context_sizes: &[usize],
    repeats: usize,
    side: usize,
    mini: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    evaluate_with(
        network_predictor(net, mini),
        tasks,
        context_sizes,
        repeats,
        side,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ModelParams<f64>, AdamState) {
        let mut map = BTreeMap::new();
        map.insert("theta".to_string(), Tensor::new(vec![1], vec![value]).unwrap());
        let params = ModelParams::new(map);
        let adam = AdamState::new(&params);
        (params, adam)
    }

    fn grad_of(params: &ModelParams<f64>) -> BTreeMap<String, Tensor<f64>> {
        // d/dθ θ² = 2θ
        let theta = params.get("theta").unwrap().data()[0];
        BTreeMap::from([(
            "theta".to_string(),
            Tensor::new(vec![1], vec![2.0 * theta]).unwrap(),
        )])
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let (mut params, mut adam) = one_param(1.0);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let theta = params.get("theta").unwrap().data()[0];
            losses.push(theta * theta);
            let grads = grad_of(&params);
            adam_step(&mut params, &grads, &mut adam, 0.1, 0.9, 0.999, 1e-8).unwrap();
        }
        let final_theta = params.get("theta").unwrap().data()[0];
        assert!(
            final_theta * final_theta < 1e-3,
            "theta after 100 steps: {final_theta}"
        );
        // Early descent is monotone while far from the optimum.
        for w in losses[..8].windows(2) {
            assert!(w[1] < w[0], "loss increased early: {:?}", &losses[..8]);
        }
        assert_eq!(adam.t, 100);
    }

    #[test]
    fn first_adam_step_has_magnitude_close_to_lr() {
        for &scale in &[1e-6, 1.0, 1e6] {
            let (mut params, mut adam) = one_param(3.0);
            let grads = BTreeMap::from([(
                "theta".to_string(),
                Tensor::new(vec![1], vec![scale]).unwrap(),
            )]);
            adam_step(&mut params, &grads, &mut adam, 0.01, 0.9, 0.999, 1e-8).unwrap();
            let moved = (params.get("theta").unwrap().data()[0] - 3.0).abs();
            assert!(
                (moved - 0.01).abs() < 1e-4,
                "first step {moved} for gradient scale {scale}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut params, mut adam) = one_param(0.7);
        let grads = BTreeMap::from([(
            "theta".to_string(),
            Tensor::new(vec![1], vec![0.0]).unwrap(),
        )]);
        adam_step(&mut params, &grads, &mut adam, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params.get("theta").unwrap().data()[0], 0.7);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn nan_gradient_aborts_with_the_parameter_name() {
        let (mut params, mut adam) = one_param(0.7);
        let grads = BTreeMap::from([(
            "theta".to_string(),
            Tensor::new(vec![1], vec![f64::NAN]).unwrap(),
        )]);
        let err = adam_step(&mut params, &grads, &mut adam, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(adam.t, 0, "failed step must not advance the counter");
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 123;
        cfg.tasks = vec![TaskKind::Segmentation, TaskKind::Inpainting];
        cfg.net.stages = 2;
        cfg.net.fusion_stages = vec![2];
        cfg.side = 8;
        cfg.augment = true;
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.steps, 123);
        assert_eq!(back.tasks, cfg.tasks);
        assert_eq!(back.net.stages, 2);
        assert_eq!(back.net.fusion_stages, vec![2]);
        assert!(back.augment);
        assert_eq!(back.dtype, Dtype::F32);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = TrainConfig::from_text("stepz = 10\n").unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let tasks = [TaskKind::Segmentation, TaskKind::GaussianDenoise];
        let rows = evaluate_with::<f64>(
            |ep| Ok(ep.target_output::<f64>()),
            &tasks,
            &[1, 2],
            3,
            8,
            5,
        )
        .unwrap();
        assert_eq!(rows.len(), 4, "one row per (task, context size)");
        for row in &rows {
            match row.metric.as_str() {
                "dice" => {
                    assert_eq!(row.mean, 1.0);
                    assert_eq!(row.std, 0.0);
                }
                "psnr" => {
                    assert!(row.mean.is_infinite());
                    assert_eq!(row.std, 0.0);
                }
                other => panic!("unexpected metric {other}"),
            }
            assert_eq!(row.repeats, 3);
        }
    }

    #[test]
    fn single_repeat_reports_zero_std() {
        let rows = evaluate_with::<f64>(
            |ep| Ok(ep.target_input::<f64>()), // imperfect predictor
            &[TaskKind::GaussianDenoise],
            &[1],
            1,
            8,
            2,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].std, 0.0);
        assert!(rows[0].mean.is_finite());
    }
}
