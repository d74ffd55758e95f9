//! The Mixture-of-Experts layer.
//!
//! A linear router scores every token against every expert. Top-k selection
//! picks `k` experts per token, and gate values come from one of two
//! orderings:
//!
//! - [`SoftmaxOrder::BeforeTopK`]: softmax over all experts, then keep the
//!   top-k probabilities (not renormalised, so gates sum to at most 1).
//! - [`SoftmaxOrder::AfterTopK`]: keep the top-k logits, then softmax over
//!   only those (gates sum to exactly 1). With `k = 1` that gate would be the
//!   constant 1 and the router would receive no gradient, so this
//!   combination is rejected when the config is built.
//!
//! Each expert processes at most `C = ceil(CF · k · T / N)` token
//! assignments; later tokens beyond that are dropped and contribute zero
//! (the residual connection around the layer carries them). The layer
//! output is `y_t = Σ gate · E_i(x_t)` over the surviving selections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{topk_select, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Where softmax normalisation sits relative to the Top-k choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxOrder {
    BeforeTopK,
    AfterTopK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MoeConfigFields {
    n_experts: usize,
    top_k: usize,
    d_model: usize,
    d_expert: usize,
    #[serde(default = "default_cf")]
    capacity_factor: Option<f64>,
    softmax_order: SoftmaxOrder,
    #[serde(default = "default_aux")]
    aux_coeff: f64,
    #[serde(default = "default_z")]
    z_coeff: f64,
}

fn default_cf() -> Option<f64> {
    Some(MoeConfig::DEFAULT_CAPACITY_FACTOR)
}
fn default_aux() -> f64 {
    MoeConfig::DEFAULT_AUX_COEFF
}
fn default_z() -> f64 {
    MoeConfig::DEFAULT_Z_COEFF
}

/// Validated MoE layer configuration. Construct with [`MoeConfig::new`]; an
/// invalid combination never exists as a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MoeConfigFields", into = "MoeConfigFields")]
pub struct MoeConfig {
    n_experts: usize,
    top_k: usize,
    d_model: usize,
    d_expert: usize,
    capacity_factor: Option<f64>,
    softmax_order: SoftmaxOrder,
    aux_coeff: f64,
    z_coeff: f64,
}

impl TryFrom<MoeConfigFields> for MoeConfig {
    type Error = Error;

    fn try_from(f: MoeConfigFields) -> Result<Self> {
        MoeConfig::new(f.n_experts, f.top_k, f.d_model, f.d_expert, f.softmax_order)?
            .with_capacity_factor(f.capacity_factor)?
            .with_loss_coeffs(f.aux_coeff, f.z_coeff)
    }
}

impl From<MoeConfig> for MoeConfigFields {
    fn from(c: MoeConfig) -> Self {
        MoeConfigFields {
            n_experts: c.n_experts,
            top_k: c.top_k,
            d_model: c.d_model,
            d_expert: c.d_expert,
            capacity_factor: c.capacity_factor,
            softmax_order: c.softmax_order,
            aux_coeff: c.aux_coeff,
            z_coeff: c.z_coeff,
        }
    }
}

impl MoeConfig {
    pub const DEFAULT_CAPACITY_FACTOR: f64 = 1.5;
    pub const DEFAULT_AUX_COEFF: f64 = 1e-2;
    pub const DEFAULT_Z_COEFF: f64 = 1e-3;

    /// New config with capacity factor 1.5 and loss coefficients 1e-2 / 1e-3.
    pub fn new(
        n_experts: usize,
        top_k: usize,
        d_model: usize,
        d_expert: usize,
        softmax_order: SoftmaxOrder,
    ) -> Result<Self> {
        if top_k == 0 || n_experts == 0 {
            return Err(Error::InvalidConfig(
                "n_experts and top_k must be at least 1".into(),
            ));
        }
        if top_k > n_experts {
            return Err(Error::KExceedsExperts {
                k: top_k,
                n: n_experts,
            });
        }
        if d_model == 0 || d_expert == 0 {
            return Err(Error::InvalidConfig("d_model and d_expert must be at least 1".into()));
        }
        if softmax_order == SoftmaxOrder::AfterTopK && top_k < 2 {
            return Err(Error::InvalidConfig(
                "softmax after Top-k needs k >= 2: with one expert the gate is constant and the router gets no gradient".into(),
            ));
        }
        Ok(MoeConfig {
            n_experts,
            top_k,
            d_model,
            d_expert,
            capacity_factor: Some(Self::DEFAULT_CAPACITY_FACTOR),
            softmax_order,
            aux_coeff: Self::DEFAULT_AUX_COEFF,
            z_coeff: Self::DEFAULT_Z_COEFF,
        })
    }

    /// `None` disables dropping. `Some(0.0)` drops every assignment, which is
    /// only useful as an ablation.
    pub fn with_capacity_factor(mut self, cf: Option<f64>) -> Result<Self> {
        if let Some(v) = cf {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "capacity factor must be finite and non-negative, got {v}"
                )));
            }
        }
        self.capacity_factor = cf;
        Ok(self)
    }

    pub fn with_loss_coeffs(mut self, aux_coeff: f64, z_coeff: f64) -> Result<Self> {
        if !(aux_coeff >= 0.0 && z_coeff >= 0.0) {
            return Err(Error::InvalidConfig("loss coefficients must be >= 0".into()));
        }
        self.aux_coeff = aux_coeff;
        self.z_coeff = z_coeff;
        Ok(self)
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }
    pub fn top_k(&self) -> usize {
        self.top_k
    }
    pub fn d_model(&self) -> usize {
        self.d_model
    }
    pub fn d_expert(&self) -> usize {
        self.d_expert
    }
    pub fn capacity_factor(&self) -> Option<f64> {
        self.capacity_factor
    }
    pub fn softmax_order(&self) -> SoftmaxOrder {
        self.softmax_order
    }
    pub fn aux_coeff(&self) -> f64 {
        self.aux_coeff
    }
    pub fn z_coeff(&self) -> f64 {
        self.z_coeff
    }

    /// Per-expert capacity for `n_tokens` tokens, `None` when unbounded.
    pub fn capacity(&self, n_tokens: usize) -> Option<usize> {
        self.capacity_factor
            .map(|cf| expert_capacity(cf, self.top_k, n_tokens, self.n_experts))
    }
}

/// `ceil(cf · k · tokens / experts)`, with a relative 1e-12 guard so that
/// products which are integers in exact arithmetic are not pushed up by
/// rounding.
pub fn expert_capacity(cf: f64, top_k: usize, n_tokens: usize, n_experts: usize) -> usize {
    let raw = cf * (top_k * n_tokens) as f64 / n_experts as f64;
    (raw - raw.abs() * 1e-12).ceil().max(0.0) as usize
}

/// Per-token expert choice, gates and drop flags for one layer invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub n_tokens: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Selected expert per `(token, rank)`, `[n_tokens * top_k]`, rank 0 first.
    pub experts: Vec<usize>,
    /// Gate value per `(token, rank)`.
    pub gates: Vec<f64>,
    /// Drop flag per `(token, rank)`.
    pub dropped: Vec<bool>,
    /// Assignments each expert actually processes.
    pub expert_load: Vec<usize>,
    /// Capacity applied by [`dispatch`], if any.
    pub capacity: Option<usize>,
}

impl RoutingDecision {
    /// Builds an undispatched decision from per-token selections.
    pub fn from_selections(
        n_experts: usize,
        top_k: usize,
        experts: Vec<usize>,
        gates: Vec<f64>,
    ) -> Result<Self> {
        if experts.len() != gates.len() || !experts.len().is_multiple_of(top_k) {
            return Err(Error::Ragged(format!(
                "{} experts / {} gates for top_k = {top_k}",
                experts.len(),
                gates.len()
            )));
        }
        if let Some(&e) = experts.iter().find(|&&e| e >= n_experts) {
            return Err(shape_err("routing", format!("expert {e} of {n_experts}")));
        }
        let n_tokens = experts.len() / top_k;
        let mut d = RoutingDecision {
            n_tokens,
            n_experts,
            top_k,
            dropped: vec![false; experts.len()],
            expert_load: vec![0; n_experts],
            experts,
            gates,
            capacity: None,
        };
        d.expert_load = d.assigned_counts();
        Ok(d)
    }

    pub fn token_experts(&self, t: usize) -> &[usize] {
        &self.experts[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn token_gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.top_k..(t + 1) * self.top_k]
    }

    /// Assignments per expert before any dropping.
    pub fn assigned_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts];
        for &e in &self.experts {
            c[e] += 1;
        }
        c
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }

    /// Fraction of `(token, expert)` assignments that were dropped.
    pub fn dropped_fraction(&self) -> f64 {
        if self.dropped.is_empty() {
            0.0
        } else {
            self.dropped_count() as f64 / self.dropped.len() as f64
        }
    }
}

/// Graph handles produced by [`route`] alongside the decision.
#[derive(Debug, Clone)]
pub struct Routing {
    pub decision: RoutingDecision,
    /// `[T, N]` router logits.
    pub logits: Var,
    /// `[T, N]` softmax over all experts (feeds the balancing loss).
    pub probs: Var,
    /// `[T, k]` differentiable gate values, rank 0 first.
    pub gates: Var,
}

/// Router logits `tokens · router_weight` followed by [`gates_from_logits`].
pub fn route<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    router_weight: Var,
    cfg: &MoeConfig,
) -> Result<Routing> {
    if g.shape(router_weight) != [cfg.d_model, cfg.n_experts] {
        return Err(shape_err(
            "route",
            format!(
                "router weight {:?}, expected [{}, {}]",
                g.shape(router_weight),
                cfg.d_model,
                cfg.n_experts
            ),
        ));
    }
    let logits = g.matmul(tokens, router_weight)?;
    gates_from_logits(g, logits, cfg)
}

/// Top-k selection and gates from precomputed `[T, N]` logits.
pub fn gates_from_logits<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    cfg: &MoeConfig,
) -> Result<Routing> {
    let (n_tokens, n) = match g.shape(logits) {
        [t, n] if *n == cfg.n_experts => (*t, *n),
        s => {
            return Err(shape_err(
                "route",
                format!("logits {s:?} for {} experts", cfg.n_experts),
            ))
        }
    };
    let k = cfg.top_k;
    let probs = g.softmax(logits, 1)?;

    let mut experts = Vec::with_capacity(n_tokens * k);
    let mut pos = Vec::with_capacity(n_tokens * k);
    {
        let scores = match cfg.softmax_order {
            SoftmaxOrder::BeforeTopK => g.value(probs),
            SoftmaxOrder::AfterTopK => g.value(logits),
        };
        for t in 0..n_tokens {
            let (idx, _) = topk_select(scores.row(t), k)?;
            for &e in &idx {
                pos.push(t * n + e);
            }
            experts.extend(idx);
        }
    }
    let gates = match cfg.softmax_order {
        SoftmaxOrder::BeforeTopK => {
            let picked = g.gather_flat(probs, &pos)?;
            g.reshape(picked, vec![n_tokens, k])?
        }
        SoftmaxOrder::AfterTopK => {
            let picked = g.gather_flat(logits, &pos)?;
            let picked = g.reshape(picked, vec![n_tokens, k])?;
            g.softmax(picked, 1)?
        }
    };
    let gate_values = g.value(gates).to_f64_vec();
    let decision = RoutingDecision::from_selections(n, k, experts, gate_values)?;
    Ok(Routing {
        decision,
        logits,
        probs,
        gates,
    })
}

/// Applies per-expert capacity. Assignments are admitted in token order, so
/// earlier tokens win; once an expert is full, later assignments to it are
/// flagged dropped.
pub fn dispatch(mut decision: RoutingDecision, cfg: &MoeConfig) -> RoutingDecision {
    let capacity = cfg.capacity(decision.n_tokens);
    let mut load = vec![0usize; decision.n_experts];
    for (slot, &e) in decision.experts.iter().enumerate() {
        let full = capacity.is_some_and(|c| load[e] >= c);
        decision.dropped[slot] = full;
        if !full {
            load[e] += 1;
        }
    }
    decision.expert_load = load;
    decision.capacity = capacity;
    decision
}

/// Graph handles for one expert's SwiGLU weights.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    /// `[d_model, d_expert]`
    pub w_gate: Var,
    /// `[d_model, d_expert]`
    pub w_up: Var,
    /// `[d_expert, d_model]`
    pub w_down: Var,
}

/// Everything one MoE layer call produces.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `[T, d_model]`
    pub output: Var,
    /// Unscaled load-balancing loss (one-element).
    pub aux_loss: Var,
    /// Unscaled router z-loss (one-element).
    pub z_loss: Var,
    /// Dispatched decision (drop flags set).
    pub decision: RoutingDecision,
    pub logits: Var,
    pub probs: Var,
    pub gates: Var,
}

impl MoeOutput {
    pub fn dropped_fraction(&self) -> f64 {
        self.decision.dropped_fraction()
    }
}

/// Full MoE layer on `tokens: [T, d_model]`.
pub fn moe_forward<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    experts: &[ExpertVars],
    router_weight: Var,
    cfg: &MoeConfig,
) -> Result<MoeOutput> {
    let n_tokens = match g.shape(tokens) {
        [t, d] if *d == cfg.d_model => *t,
        s => return Err(shape_err("moe_forward", format!("tokens {s:?}, d_model {}", cfg.d_model))),
    };
    if experts.len() != cfg.n_experts {
        return Err(shape_err(
            "moe_forward",
            format!("{} experts for n_experts = {}", experts.len(), cfg.n_experts),
        ));
    }
    let routing = route(g, tokens, router_weight, cfg)?;
    let decision = dispatch(routing.decision, cfg);
    let k = cfg.top_k;
    let gates_flat = g.reshape(routing.gates, vec![n_tokens * k])?;

    // Surviving (token, slot) pairs grouped by expert id, in token order.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
    for (slot, (&e, &dropped)) in decision.experts.iter().zip(&decision.dropped).enumerate() {
        if !dropped {
            rows[e].push(slot / k);
            slots[e].push(slot);
        }
    }

    let mut parts = Vec::new();
    let mut dest = Vec::new();
    for (e, w) in experts.iter().enumerate() {
        if rows[e].is_empty() {
            continue;
        }
        let x = g.gather_rows(tokens, &rows[e])?;
        let y = g.swiglu(x, w.w_gate, w.w_up, w.w_down)?;
        let gate = g.gather_flat(gates_flat, &slots[e])?;
        parts.push(g.scale_rows(y, gate)?);
        dest.extend_from_slice(&rows[e]);
    }
    let output = if parts.is_empty() {
        g.constant(Tensor::zeros(vec![n_tokens, cfg.d_model]))
    } else {
        let stacked = g.concat_rows(&parts)?;
        g.scatter_add_rows(stacked, &dest, n_tokens)?
    };

    let aux = aux_loss(g, routing.probs, &decision)?;
    let z = z_loss(g, routing.logits)?;
    Ok(MoeOutput {
        output,
        aux_loss: aux,
        z_loss: z,
        decision,
        logits: routing.logits,
        probs: routing.probs,
        gates: routing.gates,
    })
}

/// Load-balancing loss `N · Σ_i f_i · P_i`, where `f_i` is the pre-drop
/// share of assignments going to expert `i` (a constant) and `P_i` the mean
/// router probability of expert `i` (differentiable).
pub fn aux_loss<T: Real>(g: &mut Graph<T>, probs: Var, decision: &RoutingDecision) -> Result<Var> {
    let n = decision.n_experts;
    if g.shape(probs) != [decision.n_tokens, n] {
        return Err(shape_err(
            "aux_loss",
            format!("probs {:?} for {} tokens x {n} experts", g.shape(probs), decision.n_tokens),
        ));
    }
    let total = (decision.top_k * decision.n_tokens) as f64;
    let f: Vec<f64> = decision
        .assigned_counts()
        .iter()
        .map(|&c| c as f64 / total)
        .collect();
    let f = g.constant(Tensor::from_f64(vec![n], &f)?);
    let p = g.mean_axis(probs, 0)?;
    let fp = g.mul(f, p)?;
    let s = g.sum(fp);
    Ok(g.scale(s, T::from_usize(n).unwrap()))
}

/// Router z-loss `(1/T) Σ_t (log Σ_j exp(logits[t, j]))²`.
pub fn z_loss<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    if g.shape(logits).len() != 2 {
        return Err(shape_err("z_loss", format!("logits {:?}", g.shape(logits))));
    }
    let lse = g.log_sum_exp(logits, 1)?;
    let sq = g.mul(lse, lse)?;
    Ok(g.mean(sq))
}

/// Loss values for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub task_loss: f64,
    /// Unscaled.
    pub aux_loss: f64,
    /// Unscaled.
    pub z_loss: f64,
    pub total: f64,
    pub dropped_fraction: f64,
}

impl LossComponents {
    pub fn new(
        task_loss: f64,
        aux_loss: f64,
        z_loss: f64,
        aux_coeff: f64,
        z_coeff: f64,
        dropped_fraction: f64,
    ) -> Self {
        LossComponents {
            task_loss,
            aux_loss,
            z_loss,
            total: task_loss + aux_coeff * aux_loss + z_coeff * z_loss,
            dropped_fraction,
        }
    }
}
