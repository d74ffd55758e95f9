//! Architecture planning: the granularity transform and exact parameter and
//! FLOPs accounting for MoE transformer specs.
//!
//! Granularity `G` multiplies the expert count and Top-k by `G` and divides
//! the expert hidden width by `G`. Every parameter and matmul outside the
//! router is unchanged by the transform, and the router grows by exactly `G`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::{MoeConfig, SoftmaxOrder};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchSpecFields {
    name: String,
    n_layers: usize,
    d_model: usize,
    d_ff: usize,
    vocab_size: usize,
    n_experts: usize,
    top_k: usize,
    #[serde(default = "one")]
    granularity: usize,
    #[serde(default)]
    d_expert: Option<usize>,
    #[serde(default)]
    tied_embeddings: bool,
}

fn one() -> usize {
    1
}

/// Shape of an MoE transformer for accounting purposes. `n_experts` and
/// `top_k` are the effective values after any granularity transform, so
/// `n_experts = G · N_E` and `top_k = G · k` for base values `N_E`, `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchSpecFields")]
pub struct ArchSpec {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    /// Baseline SwiGLU hidden width.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub granularity: usize,
    pub d_expert: usize,
    pub tied_embeddings: bool,
}

impl TryFrom<ArchSpecFields> for ArchSpec {
    type Error = Error;

    fn try_from(f: ArchSpecFields) -> Result<Self> {
        let g = f.granularity.max(1);
        let spec = ArchSpec {
            name: f.name,
            n_layers: f.n_layers,
            d_model: f.d_model,
            d_ff: f.d_ff,
            vocab_size: f.vocab_size,
            n_experts: f.n_experts,
            top_k: f.top_k,
            granularity: f.granularity,
            d_expert: f.d_expert.unwrap_or(if f.d_ff.is_multiple_of(g) { f.d_ff / g } else { 0 }),
            tied_embeddings: f.tied_embeddings,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ArchSpec {
    /// A granularity-1 spec with untied embeddings.
    pub fn base(
        name: impl Into<String>,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        n_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        let spec = ArchSpec {
            name: name.into(),
            n_layers,
            d_model,
            d_ff,
            vocab_size,
            n_experts,
            top_k,
            granularity: 1,
            d_expert: d_ff,
            tied_embeddings: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if [self.n_layers, self.d_model, self.d_ff, self.vocab_size, self.n_experts, self.top_k, self.granularity]
            .contains(&0)
        {
            return bad(format!("{}: all sizes must be positive", self.name));
        }
        if !self.d_ff.is_multiple_of(self.granularity) {
            return Err(Error::NotDivisible(self.granularity, self.d_ff));
        }
        if self.d_expert != self.d_ff / self.granularity {
            return bad(format!(
                "{}: d_expert = {} but d_ff / G = {}",
                self.name,
                self.d_expert,
                self.d_ff / self.granularity
            ));
        }
        if !self.n_experts.is_multiple_of(self.granularity) || !self.top_k.is_multiple_of(self.granularity) {
            return bad(format!(
                "{}: experts {} and top_k {} must be multiples of G = {}",
                self.name, self.n_experts, self.top_k, self.granularity
            ));
        }
        if self.top_k > self.n_experts {
            return Err(Error::KExceedsExperts {
                k: self.top_k,
                n: self.n_experts,
            });
        }
        Ok(())
    }

    /// Experts before granularity (`N_E`).
    pub fn base_experts(&self) -> usize {
        self.n_experts / self.granularity
    }

    /// Top-k before granularity.
    pub fn base_top_k(&self) -> usize {
        self.top_k / self.granularity
    }

    /// A trainable model config with the same shape. Dropout, rotary
    /// fraction and init scale take their defaults.
    pub fn model_config(
        &self,
        n_heads: usize,
        seq_len: usize,
        softmax_order: SoftmaxOrder,
    ) -> Result<ModelConfig> {
        let moe = MoeConfig::new(self.n_experts, self.top_k, self.d_model, self.d_expert, softmax_order)?;
        Ok(ModelConfig::new(self.n_layers, n_heads, self.vocab_size, seq_len, moe)?
            .with_tied_embeddings(self.tied_embeddings))
    }
}

/// Expert count and Top-k times `g`, expert width divided by `g`.
pub fn granularity_transform(base: &ArchSpec, g: usize) -> Result<ArchSpec> {
    if g == 0 {
        return Err(Error::InvalidConfig("granularity must be at least 1".into()));
    }
    let gran = base.granularity * g;
    if !base.d_ff.is_multiple_of(gran) {
        return Err(Error::NotDivisible(gran, base.d_ff));
    }
    let out = ArchSpec {
        name: base.name.clone(),
        n_experts: base.n_experts * g,
        top_k: base.top_k * g,
        granularity: gran,
        d_expert: base.d_ff / gran,
        ..base.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Parameters by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Input embedding plus (untied) unembedding.
    pub embeddings: u64,
    pub attention: u64,
    /// All expert weights.
    pub experts_total: u64,
    /// Expert weights touched per token.
    pub experts_active: u64,
    pub router: u64,
    /// LayerNorm gains and biases.
    pub norms: u64,
}

/// Exact counts for one spec. FLOPs are forward, per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub active_params: u64,
    pub total_params: u64,
    pub router_params: u64,
    pub flops_per_token: u64,
    pub flops_per_token_excl_router: u64,
    pub breakdown: ParamBreakdown,
}

impl CountReport {
    pub fn non_router_total(&self) -> u64 {
        self.total_params - self.router_params
    }

    pub fn non_router_active(&self) -> u64 {
        self.active_params - self.router_params
    }
}

/// Counts parameters and per-token FLOPs. Linear layers have no bias;
/// attention holds `4·d_model²`; each expert `3·d_model·d_expert`; the
/// router `d_model · n_experts`; each LayerNorm `2·d_model` (two per layer
/// plus a final one). FLOPs are `2 ×` the matmul parameters on the active
/// path, including the unembedding.
pub fn count_params(spec: &ArchSpec) -> CountReport {
    let l = spec.n_layers as u64;
    let d = spec.d_model as u64;
    let v = spec.vocab_size as u64;
    let n = spec.n_experts as u64;
    let k = spec.top_k as u64;
    let expert = 3 * d * spec.d_expert as u64;

    let breakdown = ParamBreakdown {
        embeddings: if spec.tied_embeddings { v * d } else { 2 * v * d },
        attention: l * 4 * d * d,
        experts_total: l * n * expert,
        experts_active: l * k * expert,
        router: l * d * n,
        norms: l * 2 * 2 * d + 2 * d,
    };
    let shared = breakdown.embeddings + breakdown.attention + breakdown.router + breakdown.norms;
    let matmul_active = breakdown.attention + breakdown.experts_active + breakdown.router + v * d;
    CountReport {
        active_params: shared + breakdown.experts_active,
        total_params: shared + breakdown.experts_total,
        router_params: breakdown.router,
        flops_per_token: 2 * matmul_active,
        flops_per_token_excl_router: 2 * (matmul_active - breakdown.router),
        breakdown,
    }
}

/// Forward FLOPs per token spent on attention scores and the weighted sum
/// of values, for a token attending over `context` positions. Kept apart
/// from [`CountReport`] because it depends on sequence length.
pub fn attention_score_flops(spec: &ArchSpec, context: usize) -> u64 {
    4 * spec.n_layers as u64 * context as u64 * spec.d_model as u64
}

/// One compared quantity in a [`ParityReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDiff {
    pub component: String,
    pub a: u64,
    pub b: u64,
}

impl ComponentDiff {
    pub fn equal(&self) -> bool {
        self.a == self.b
    }
}

/// Outcome of comparing a spec with its granularity transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub passed: bool,
    /// Every compared component, equal or not.
    pub components: Vec<ComponentDiff>,
    /// `router(b) / router(a)`.
    pub router_ratio: f64,
    /// `granularity(b) / granularity(a)`.
    pub granularity_ratio: f64,
}

impl ParityReport {
    pub fn mismatches(&self) -> impl Iterator<Item = &ComponentDiff> {
        self.components.iter().filter(|c| !c.equal())
    }
}

/// Checks that `b` keeps every non-router parameter and active FLOP of `a`
/// and that its router grows by exactly the granularity ratio.
pub fn parity_check(a: &ArchSpec, b: &ArchSpec) -> ParityReport {
    let (ca, cb) = (count_params(a), count_params(b));
    let diff = |component: &str, x: u64, y: u64| ComponentDiff {
        component: component.into(),
        a: x,
        b: y,
    };
    let components = vec![
        diff("non_router_total_params", ca.non_router_total(), cb.non_router_total()),
        diff("non_router_active_params", ca.non_router_active(), cb.non_router_active()),
        diff(
            "non_router_active_flops",
            ca.flops_per_token_excl_router,
            cb.flops_per_token_excl_router,
        ),
        diff("embeddings", ca.breakdown.embeddings, cb.breakdown.embeddings),
        diff("attention", ca.breakdown.attention, cb.breakdown.attention),
        diff("experts_total", ca.breakdown.experts_total, cb.breakdown.experts_total),
        diff("experts_active", ca.breakdown.experts_active, cb.breakdown.experts_active),
        diff("norms", ca.breakdown.norms, cb.breakdown.norms),
    ];
    let router_ratio = cb.router_params as f64 / ca.router_params as f64;
    let granularity_ratio = b.granularity as f64 / a.granularity as f64;
    ParityReport {
        passed: components.iter().all(ComponentDiff::equal) && router_ratio == granularity_ratio,
        components,
        router_ratio,
        granularity_ratio,
    }
}

/// Built-in preset names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 8] = [
    "11b-g1", "11b-g8", "11b-2x-g1", "11b-2x-g8", "56b-g1", "56b-g8", "56b-2x-g1", "56b-2x-g8",
];

/// Assumptions baked into the presets that are inferred rather than given.
pub const PRESET_ASSUMPTIONS: [&str; 4] = [
    "11b family uses 24 layers and 56b family 32 layers (inferred from the total parameter counts)",
    "input and output embeddings are untied",
    "linear layers carry no bias; attention holds 4 * d_model^2 parameters",
    "LayerNorm gains and biases are counted (two per layer plus a final norm)",
];

/// Resolves a preset such as `11b-g8` or `56b-2x-g1`.
pub fn preset(name: &str) -> Result<ArchSpec> {
    let unknown = || Error::UnknownPreset(name.to_string());
    let mut parts = name.split('-');
    let family = parts.next().ok_or_else(unknown)?;
    let mut next = parts.next().ok_or_else(unknown)?;
    let k = if next == "2x" {
        next = parts.next().ok_or_else(unknown)?;
        2
    } else {
        1
    };
    if parts.next().is_some() {
        return Err(unknown());
    }
    let g = match next {
        "g1" => 1,
        "g8" => 8,
        _ => return Err(unknown()),
    };
    let base = match family {
        "11b" => ArchSpec::base(name, 24, 2048, 8192, 256_000, 8, k)?,
        "56b" => ArchSpec::base(name, 32, 4096, 16_384, 256_000, 8, k)?,
        _ => return Err(unknown()),
    };
    granularity_transform(&base, g)
}

/// Billions rounded to one decimal, e.g. `2.7B`.
pub fn format_billions(n: u64) -> String {
    format!("{:.1}B", n as f64 / 1e9)
}

/// Row in the order experts, Top-k, active, d_model, d_expert, total.
pub fn table_row(spec: &ArchSpec) -> String {
    let c = count_params(spec);
    format!(
        "{}, {}, {}, {}, {}, {}",
        spec.n_experts,
        spec.top_k,
        format_billions(c.active_params),
        spec.d_model,
        spec.d_expert,
        format_billions(c.total_params)
    )
}

/// Machine-readable planning output for one spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub spec: ArchSpec,
    pub counts: CountReport,
    pub row: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub entries: Vec<PlanEntry>,
    pub assumptions: Vec<String>,
}

impl PlanReport {
    pub fn new(specs: Vec<ArchSpec>) -> Self {
        PlanReport {
            entries: specs
                .into_iter()
                .map(|spec| PlanEntry {
                    counts: count_params(&spec),
                    row: table_row(&spec),
                    spec,
                })
                .collect(),
            assumptions: PRESET_ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::from("name, experts, top_k, active, d_model, d_expert, total\n");
        for e in &self.entries {
            s.push_str(&format!("{}, {}\n", e.spec.name, e.row));
        }
        s.push_str("assumptions:\n");
        for a in &self.assumptions {
            s.push_str(&format!("  - {a}\n"));
        }
        s
    }
}
