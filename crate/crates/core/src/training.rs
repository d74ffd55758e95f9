//! Optimizer, learning-rate schedules, synthetic data and the training loop.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{decision_gates, ep_load_fractions, logit_rank_medians, LogitRankSnapshot, MetricRecord};
use crate::autodiff::Graph;
use crate::configplan::{granularity_transform, ArchSpec};
use crate::error::{shape_err, Error, Result};
use crate::model::{forward, init_params, loss, param_specs, Mode, ModelConfig, ModelParams, ModelVars};
use crate::moe::SoftmaxOrder;
use crate::tensor::{Real, Tensor};

/// Optimizer, schedule and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    /// Main-phase final learning rate as a fraction of `peak_lr`.
    pub end_lr_frac: f64,
    pub warmup_frac: f64,
    pub clip_threshold: f64,
    /// Sequences per batch; tokens per batch is this times the sequence length.
    pub batch_size: usize,
    pub steps: usize,
    /// Validation and gate-snapshot interval in steps.
    pub eval_every: usize,
    pub aux_coeff: f64,
    pub z_coeff: f64,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            peak_lr: 2e-4,
            end_lr_frac: 0.1,
            warmup_frac: 0.01,
            clip_threshold: 1.0,
            batch_size: 8,
            steps: 2000,
            eval_every: 50,
            aux_coeff: 1e-2,
            z_coeff: 1e-3,
            seed: 0,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must be in (0, 1)");
        }
        let coeffs = [
            self.weight_decay,
            self.peak_lr,
            self.end_lr_frac,
            self.clip_threshold,
            self.aux_coeff,
            self.z_coeff,
            self.eps,
        ];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("coefficients must be finite and >= 0");
        }
        if self.end_lr_frac > 1.0 {
            return bad("end_lr_frac must not exceed 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return bad("batch_size, steps and eval_every must be positive");
        }
        Ok(())
    }

    /// Main-phase schedule: warmup then cosine to `end_lr_frac · peak_lr`.
    pub fn schedule(&self) -> Result<ScheduleSpec> {
        ScheduleSpec::cosine_with_warmup(self.peak_lr, self.peak_lr * self.end_lr_frac, self.steps, self.warmup_frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineWithWarmup,
    ContinuedPretrain,
}

/// A learning-rate schedule over `0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub steps: usize,
    pub warmup_steps: usize,
}

impl ScheduleSpec {
    /// Linear warmup over `ceil(warmup_frac · steps)` steps (at least one
    /// and fewer than `steps`), then cosine from `peak` to `end`.
    pub fn cosine_with_warmup(peak: f64, end: f64, steps: usize, warmup_frac: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(end <= peak && end >= 0.0) {
            return Err(Error::InvalidConfig(format!("need 0 <= end_lr {end} <= peak_lr {peak}")));
        }
        let raw = warmup_frac * steps as f64;
        let warmup = ((raw - raw * 1e-12).ceil() as usize).clamp(1, steps.saturating_sub(1).max(1));
        let warmup = if steps == 1 { 0 } else { warmup };
        Ok(ScheduleSpec {
            kind: ScheduleKind::CosineWithWarmup,
            peak_lr: peak,
            end_lr: end,
            steps,
            warmup_steps: warmup,
        })
    }
}

/// Learning rate at `step`. The optimizer step numbered `s` (from 1) uses
/// `lr_at(s)`.
pub fn lr_at(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    if step > spec.steps {
        return Err(Error::StepOutOfRange {
            step,
            steps: spec.steps,
        });
    }
    let w = spec.warmup_steps;
    if step < w {
        return Ok(spec.peak_lr * step as f64 / w as f64);
    }
    let span = spec.steps - w;
    if span == 0 {
        return Ok(spec.peak_lr);
    }
    let progress = (step - w) as f64 / span as f64;
    Ok(spec.end_lr + 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()) * (spec.peak_lr - spec.end_lr))
}

/// Schedule for a second training phase: cosine from `prior_end` down to
/// `0.1 · prior_end` over `budget_frac · prior_steps` steps, no warmup.
pub fn continued_schedule(prior_end: f64, budget_frac: f64, prior_steps: usize) -> Result<ScheduleSpec> {
    if !(prior_end > 0.0 && prior_end.is_finite()) {
        return Err(Error::InvalidConfig(format!("prior_end must be > 0, got {prior_end}")));
    }
    let steps = ((budget_frac * prior_steps as f64).round() as usize).max(1);
    Ok(ScheduleSpec {
        kind: ScheduleKind::ContinuedPretrain,
        peak_lr: prior_end,
        end_lr: 0.1 * prior_end,
        steps,
        warmup_steps: 0,
    })
}

/// First and second moment estimates, kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled and
/// applied first, and only to tensors whose `decay` flag is set.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut AdamState,
    lr: f64,
    hp: &TrainHyperparams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.m.len() {
        return Err(shape_err("adamw", "parameter, gradient, decay and state counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient);
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[i] { hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (theta, grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = grad.as_f64();
            let mut th = theta.as_f64();
            th -= lr * wd * th;
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            th -= lr * mhat / (vhat.sqrt() + hp.eps);
            *theta = T::from_f64_lossy(th);
        }
    }
    Ok(())
}

/// Scales all gradients by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], threshold: f64) -> Result<f64> {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if norm > threshold {
        let s = T::from_f64_lossy(threshold / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    Ok(norm)
}

/// Parameters of the synthetic language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub n_val_sequences: usize,
    /// Weight of the order-2 component; the rest is a bigram component.
    pub order2_weight: f64,
    /// Scale applied to Gaussian scores before the per-row softmax; larger
    /// values make transitions more deterministic.
    pub sharpness: f64,
    /// Per-position probability of starting a copied span.
    pub copy_prob: f64,
    pub copy_min: usize,
    pub copy_max: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_size: 32,
            seq_len: 32,
            seed: 0,
            n_val_sequences: 64,
            order2_weight: 0.85,
            sharpness: 5.0,
            copy_prob: 0.02,
            copy_min: 4,
            copy_max: 8,
        }
    }
}

impl DataConfig {
    pub fn for_model(cfg: &ModelConfig, seed: u64) -> Self {
        DataConfig {
            vocab_size: cfg.vocab_size(),
            seq_len: cfg.seq_len(),
            seed,
            ..DataConfig::default()
        }
    }
}

/// Inputs and next-token targets for `batch` packed sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

/// Deterministic synthetic corpus: an order-2 Markov chain mixed with a
/// bigram chain, with occasional spans copied from earlier in the same
/// sequence. A fixed validation split is drawn first and never reappears
/// in training batches.
#[derive(Debug, Clone)]
pub struct SynthData {
    cfg: DataConfig,
    /// `P(c | a, b)` at `[(a·V + b)·V + c]`.
    trans: Vec<f64>,
    /// Stationary distribution over pairs `(a, b)` at `[a·V + b]`.
    pair_dist: Vec<f64>,
    val: Vec<Vec<usize>>,
    val_set: HashSet<Vec<usize>>,
    rng: ChaCha8Rng,
}

fn row_softmax(rng: &mut ChaCha8Rng, n: usize, sharpness: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            sharpness * x
        })
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

impl SynthData {
    pub fn new(cfg: DataConfig) -> Result<Self> {
        let v = cfg.vocab_size;
        if v < 2 || cfg.seq_len == 0 {
            return Err(Error::InvalidConfig("synthetic data needs vocab >= 2 and seq_len >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.order2_weight) || !(0.0..=1.0).contains(&cfg.copy_prob) {
            return Err(Error::InvalidConfig("order2_weight and copy_prob must be in [0, 1]".into()));
        }
        if cfg.copy_min == 0 || cfg.copy_min > cfg.copy_max {
            return Err(Error::InvalidConfig("need 1 <= copy_min <= copy_max".into()));
        }
        let mut chain_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bigram: Vec<Vec<f64>> = (0..v).map(|_| row_softmax(&mut chain_rng, v, cfg.sharpness)).collect();
        let mut trans = Vec::with_capacity(v * v * v);
        for _a in 0..v {
            for b in 0..v {
                let o2 = row_softmax(&mut chain_rng, v, cfg.sharpness);
                for c in 0..v {
                    trans.push(cfg.order2_weight * o2[c] + (1.0 - cfg.order2_weight) * bigram[b][c]);
                }
            }
        }
        let pair_dist = stationary_pairs(&trans, v);
        let mut data = SynthData {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0000_0000_0001),
            trans,
            pair_dist,
            val: Vec::new(),
            val_set: HashSet::new(),
            cfg,
        };
        let mut val_rng = ChaCha8Rng::seed_from_u64(data.cfg.seed ^ 0x5EED_0000_0000_0002);
        for _ in 0..data.cfg.n_val_sequences {
            let s = data.sequence(&mut val_rng);
            data.val_set.insert(s.clone());
            data.val.push(s);
        }
        Ok(data)
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    /// One sequence of `seq_len + 1` tokens.
    fn sequence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let v = self.cfg.vocab_size;
        let len = self.cfg.seq_len + 1;
        let pair = sample_index(rng, &self.pair_dist);
        let mut s = vec![pair / v, pair % v];
        while s.len() < len {
            let n = s.len();
            if n >= self.cfg.copy_min && rng.random::<f64>() < self.cfg.copy_prob {
                let l = rng.random_range(self.cfg.copy_min..=self.cfg.copy_max).min(n);
                let start = rng.random_range(0..=n - l);
                for i in 0..l {
                    if s.len() == len {
                        break;
                    }
                    s.push(s[start + i]);
                }
                continue;
            }
            let (a, b) = (s[n - 2], s[n - 1]);
            let row = &self.trans[(a * v + b) * v..(a * v + b + 1) * v];
            s.push(sample_index(rng, row));
        }
        s.truncate(len);
        s
    }

    /// Next training sequence, skipping any that appear in the validation split.
    pub fn next_sequence(&mut self) -> Vec<usize> {
        let mut rng = self.rng.clone();
        let s = loop {
            let s = self.sequence(&mut rng);
            if !self.val_set.contains(&s) {
                break s;
            }
        };
        self.rng = rng;
        s
    }

    pub fn next_batch(&mut self, batch: usize) -> Batch {
        let seqs: Vec<Vec<usize>> = (0..batch).map(|_| self.next_sequence()).collect();
        pack(&seqs)
    }

    pub fn validation(&self) -> &[Vec<usize>] {
        &self.val
    }

    /// Validation split in batches of at most `batch` sequences.
    pub fn validation_batches(&self, batch: usize) -> Vec<Batch> {
        self.val.chunks(batch.max(1)).map(pack).collect()
    }

    /// Stationary unigram distribution of the chain (copies excluded).
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let v = self.cfg.vocab_size;
        (0..v)
            .map(|c| (0..v).map(|b| self.pair_dist[b * v + c]).sum())
            .collect()
    }

    /// Entropy in nats of [`SynthData::stationary_unigram`].
    pub fn unigram_entropy(&self) -> f64 {
        entropy(&self.stationary_unigram())
    }

    /// Conditional entropy of the next token given only the previous one,
    /// in nats, under the stationary distribution (copies excluded).
    pub fn bigram_entropy(&self) -> f64 {
        let v = self.cfg.vocab_size;
        (0..v)
            .map(|b| {
                let mut joint = vec![0.0; v];
                let mut mass = 0.0;
                for a in 0..v {
                    let w = self.pair_dist[a * v + b];
                    mass += w;
                    for (c, p) in self.trans[(a * v + b) * v..(a * v + b + 1) * v].iter().enumerate() {
                        joint[c] += w * p;
                    }
                }
                if mass == 0.0 {
                    return 0.0;
                }
                joint.iter_mut().for_each(|p| *p /= mass);
                mass * entropy(&joint)
            })
            .sum()
    }

    /// Conditional entropy of the next token given the previous two, in
    /// nats, under the stationary distribution (copies excluded).
    pub fn entropy_rate(&self) -> f64 {
        let v = self.cfg.vocab_size;
        (0..v * v)
            .map(|ab| self.pair_dist[ab] * entropy(&self.trans[ab * v..(ab + 1) * v]))
            .sum()
    }
}

fn pack(seqs: &[Vec<usize>]) -> Batch {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        inputs.extend_from_slice(&s[..s.len() - 1]);
        targets.extend_from_slice(&s[1..]);
    }
    Batch {
        inputs,
        targets,
        batch: seqs.len(),
    }
}

/// Power iteration for the stationary distribution over consecutive pairs.
fn stationary_pairs(trans: &[f64], v: usize) -> Vec<f64> {
    let mut mu = vec![1.0 / (v * v) as f64; v * v];
    for _ in 0..100_000 {
        let mut next = vec![0.0; v * v];
        for a in 0..v {
            for b in 0..v {
                let w = mu[a * v + b];
                let row = &trans[(a * v + b) * v..(a * v + b + 1) * v];
                for c in 0..v {
                    next[b * v + c] += w * row[c];
                }
            }
        }
        let delta: f64 = mu.iter().zip(&next).map(|(x, y)| (x - y).abs()).sum();
        mu = next;
        if delta < 1e-14 {
            break;
        }
    }
    mu
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub records: Vec<MetricRecord>,
    pub snapshots: Vec<LogitRankSnapshot>,
    pub params: ModelParams<T>,
    pub schedule: ScheduleSpec,
}

impl<T> TrainOutcome<T> {
    pub fn final_lr(&self) -> f64 {
        self.schedule.end_lr
    }
}

/// Default expert-parallel group count: 8 when it divides the expert count,
/// otherwise the largest common divisor with 8.
pub fn default_ep_size(n_experts: usize) -> usize {
    let mut a = n_experts;
    let mut b = 8;
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Stepwise training loop over a model, optimizer and data stream.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    cfg: ModelConfig,
    hp: TrainHyperparams,
    schedule: ScheduleSpec,
    params: ModelParams<T>,
    opt: AdamState,
    decay: Vec<bool>,
    data: SynthData,
    ep_size: usize,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters initialised from `hp.seed` and the main schedule.
    pub fn new(cfg: &ModelConfig, hp: &TrainHyperparams, data: SynthData, ep_size: usize) -> Result<Self> {
        let params = init_params(cfg, hp.seed);
        Self::with_params(cfg, hp, data, params, hp.schedule()?, ep_size)
    }

    /// Starts from given parameters with a fresh optimizer state. The run
    /// length is `schedule.steps`.
    pub fn with_params(
        cfg: &ModelConfig,
        hp: &TrainHyperparams,
        data: SynthData,
        params: ModelParams<T>,
        schedule: ScheduleSpec,
        ep_size: usize,
    ) -> Result<Self> {
        hp.validate()?;
        let moe = cfg.moe().clone().with_loss_coeffs(hp.aux_coeff, hp.z_coeff)?;
        let cfg = cfg.clone().with_moe(moe)?;
        if data.config().vocab_size != cfg.vocab_size() || data.config().seq_len > cfg.seq_len() {
            return Err(Error::InvalidConfig(format!(
                "data (vocab {}, seq_len {}) does not fit model (vocab {}, seq_len {})",
                data.config().vocab_size,
                data.config().seq_len,
                cfg.vocab_size(),
                cfg.seq_len()
            )));
        }
        if ep_size == 0 || cfg.moe().n_experts() % ep_size != 0 {
            return Err(Error::NotDivisible(ep_size, cfg.moe().n_experts()));
        }
        let params = ModelParams::from_tensors(&cfg, params.tensors().to_vec())?;
        let decay = param_specs(&cfg).iter().map(|s| !s.kind.is_norm()).collect();
        Ok(Trainer {
            opt: AdamState::new(params.tensors()),
            decay,
            cfg,
            hp: hp.clone(),
            schedule,
            params,
            data,
            ep_size,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }
    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }
    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }
    pub fn steps_done(&self) -> usize {
        self.step
    }
    pub fn data(&self) -> &SynthData {
        &self.data
    }

    fn dropout_seed(&self, step: usize) -> u64 {
        self.hp
            .seed
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
            .wrapping_add(step as u64)
    }

    /// One optimizer step. Validation loss is filled in on every
    /// `eval_every`-th step and on the last step.
    pub fn step(&mut self) -> Result<MetricRecord> {
        if self.step >= self.schedule.steps {
            return Err(Error::StepOutOfRange {
                step: self.step + 1,
                steps: self.schedule.steps,
            });
        }
        let step = self.step + 1;
        let batch = self.data.next_batch(self.hp.batch_size);
        let mut g = Graph::new();
        let vars = self.params.register(&mut g);
        let mv = ModelVars::from_flat(&self.cfg, &vars)?;
        let mode = if self.cfg.attn_dropout_p() > 0.0 {
            Mode::Train {
                dropout_seed: self.dropout_seed(step),
            }
        } else {
            Mode::Eval
        };
        let out = loss(&mut g, &self.cfg, &mv, &batch.inputs, &batch.targets, batch.batch, mode)?;
        let task = g.value(out.task).item().as_f64();
        let aux = g.value(out.aux).item().as_f64();
        let z = g.value(out.z).item().as_f64();
        let total = g.value(out.total).item().as_f64();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostic: format!("task {task}, aux {aux}, z {z}"),
            });
        }
        let mut grads_map = g.backward(out.total)?;
        let mut grads: Vec<Tensor<T>> = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads_map.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let grad_norm = clip_grad_norm(&mut grads, self.hp.clip_threshold)?;
        let lr = lr_at(step, &self.schedule)?;
        adamw_step(self.params.tensors_mut(), &grads, &self.decay, &mut self.opt, lr, &self.hp)?;
        self.step = step;

        let dropped_frac =
            out.decisions.iter().map(|d| d.dropped_fraction()).sum::<f64>() / out.decisions.len() as f64;
        let mut ep_load = vec![0.0; self.ep_size];
        for d in &out.decisions {
            for (acc, f) in ep_load.iter_mut().zip(ep_load_fractions(d, self.ep_size)?) {
                *acc += f / out.decisions.len() as f64;
            }
        }
        let val_loss = if step.is_multiple_of(self.hp.eval_every) || step == self.schedule.steps {
            Some(self.validation_loss()?)
        } else {
            None
        };
        Ok(MetricRecord {
            step,
            loss: task,
            val_loss,
            lr,
            aux_loss: aux,
            z_loss: z,
            dropped_frac,
            grad_norm,
            ep_load,
        })
    }

    /// Mean next-token cross-entropy over the validation split, without
    /// dropout.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in self.data.validation_batches(self.hp.batch_size) {
            let mut g = Graph::new();
            let vars: Vec<_> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
            let mv = ModelVars::from_flat(&self.cfg, &vars)?;
            let out = forward(&mut g, &self.cfg, &mv, &b.inputs, b.batch, Mode::Eval)?;
            let ce = g.cross_entropy(out.logits, &b.targets)?;
            sum += g.value(ce).item().as_f64() * b.targets.len() as f64;
            count += b.targets.len();
        }
        let v = sum / count as f64;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostic: "validation loss".into(),
            });
        }
        Ok(v)
    }

    /// Per-layer gate medians on the first validation batch.
    pub fn rank_snapshots(&self) -> Result<Vec<LogitRankSnapshot>> {
        let probe = self
            .data
            .validation_batches(self.hp.batch_size)
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty validation split".into()))?;
        let mut g = Graph::new();
        let vars: Vec<_> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let mv = ModelVars::from_flat(&self.cfg, &vars)?;
        let out = forward(&mut g, &self.cfg, &mv, &probe.inputs, probe.batch, Mode::Eval)?;
        out.decisions
            .iter()
            .enumerate()
            .map(|(l, d)| logit_rank_medians(&decision_gates(d), l, self.step))
            .collect()
    }

    /// Runs to the end of the schedule, handing each record to `sink` as it
    /// is produced. Gate snapshots are taken at step 0 and on every
    /// validation step.
    pub fn run(mut self, mut sink: impl FnMut(&MetricRecord) -> Result<()>) -> Result<TrainOutcome<T>> {
        let mut records = Vec::with_capacity(self.schedule.steps - self.step);
        let mut snapshots = if self.step == 0 { self.rank_snapshots()? } else { Vec::new() };
        while self.step < self.schedule.steps {
            let r = self.step()?;
            sink(&r)?;
            if r.val_loss.is_some() {
                snapshots.extend(self.rank_snapshots()?);
            }
            records.push(r);
        }
        Ok(TrainOutcome {
            records,
            snapshots,
            schedule: self.schedule,
            params: self.params,
        })
    }
}

/// Full run with fresh parameters on synthetic data seeded by `hp.seed`.
pub fn train<T: Real>(cfg: &ModelConfig, hp: &TrainHyperparams, ep_size: usize) -> Result<TrainOutcome<T>> {
    let data = SynthData::new(DataConfig::for_model(cfg, hp.seed))?;
    Trainer::<T>::new(cfg, hp, data, ep_size)?.run(|_| Ok(()))
}

/// Second phase from `prior`'s parameters: the continued schedule over 10%
/// of the prior steps and a reset optimizer.
pub fn continued_pretrain<T: Real>(
    cfg: &ModelConfig,
    hp: &TrainHyperparams,
    data: SynthData,
    prior: &TrainOutcome<T>,
    ep_size: usize,
) -> Result<Trainer<T>> {
    let schedule = continued_schedule(prior.final_lr(), 0.1, prior.schedule.steps)?;
    Trainer::with_params(cfg, hp, data, prior.params.clone(), schedule, ep_size)
}

/// A scaled-down training setup shaped like one of the planning presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskPreset {
    pub name: String,
    pub model: ModelConfig,
    pub hp: TrainHyperparams,
}

pub const DESK_PRESET_NAMES: [&str; 4] = ["toy-g1", "toy-g8", "toy-2x-g1", "toy-2x-g8"];

/// Peak learning rate of the desk presets. Tiny models on short horizons
/// need a larger step than the large-scale default.
pub const DESK_PEAK_LR: f64 = 3e-3;

/// Two-layer `d_model = 64` models with 8 base experts of width 128, with
/// granularity 1 or 8 and base Top-k 1 or 2. Softmax is applied after
/// Top-k whenever `k > 1`.
pub fn desk_preset(name: &str) -> Result<DeskPreset> {
    let unknown = || Error::UnknownPreset(name.to_string());
    let (k, g) = match name {
        "toy-g1" => (1, 1),
        "toy-g8" => (1, 8),
        "toy-2x-g1" => (2, 1),
        "toy-2x-g8" => (2, 8),
        _ => return Err(unknown()),
    };
    let base = ArchSpec::base(name, 2, 64, 128, 32, 8, k)?;
    let spec = granularity_transform(&base, g)?;
    let order = if spec.top_k > 1 {
        SoftmaxOrder::AfterTopK
    } else {
        SoftmaxOrder::BeforeTopK
    };
    let model = spec.model_config(4, 32, order)?;
    let hp = TrainHyperparams {
        peak_lr: DESK_PEAK_LR,
        batch_size: 32,
        steps: 2000,
        ..TrainHyperparams::default()
    };
    Ok(DeskPreset {
        name: name.into(),
        model,
        hp,
    })
}
