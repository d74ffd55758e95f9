//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grainmoe::analysis::{step_savings, MetricRecord};
use grainmoe::autodiff::{Graph, Var};
use grainmoe::cli::main_with_args;
use grainmoe::configplan::{count_params, granularity_transform, parity_check, ArchSpec};
use grainmoe::gradcheck::grad_check;
use grainmoe::model::{init_params, loss, param_specs, Mode, ModelConfig, ModelVars, ParamKind};
use grainmoe::moe::{aux_loss, dispatch, gates_from_logits, route, z_loss, MoeConfig, RoutingDecision, SoftmaxOrder};
use grainmoe::training::{default_ep_size, desk_preset, train, DESK_PRESET_NAMES};
use grainmoe::{Result, Tensor};

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: u32, title: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        title,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(std::iter::once("grainmoe").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err))
}

fn table_reproduction() -> Result<(bool, String)> {
    let start = Instant::now();
    let expected = [
        ("11b-g1", "2.7B", "11.1B"),
        ("11b-g8", "2.7B", "11.1B"),
        ("11b-2x-g1", "3.9B", "11.1B"),
        ("11b-2x-g8", "3.9B", "11.1B"),
        ("56b-g1", "10.7B", "55.8B"),
        ("56b-g8", "10.7B", "55.8B"),
        ("56b-2x-g1", "17.1B", "55.8B"),
        ("56b-2x-g8", "17.1B", "55.8B"),
    ];
    let mut args = vec!["plan"];
    for (name, _, _) in &expected {
        args.extend(["--preset", name]);
    }
    let (code, out) = cli(&args);
    let elapsed = start.elapsed();
    let mut bad = Vec::new();
    for (name, active, total) in expected {
        let line = out.lines().find(|l| l.starts_with(&format!("{name},")));
        let ok = line.is_some_and(|l| {
            let cols: Vec<&str> = l.split(", ").collect();
            cols.len() == 7 && cols[3] == active && cols[6] == total
        });
        if !ok {
            bad.push(format!("{name}: {line:?}"));
        }
    }
    let passed = code == 0 && bad.is_empty() && elapsed < Duration::from_secs(1);
    Ok((passed, format!("8 rows, {} mismatched, plan took {elapsed:.2?} {bad:?}", bad.len())))
}

fn random_spec(rng: &mut ChaCha8Rng, name: &str) -> Result<ArchSpec> {
    let n = rng.random_range(1..=16);
    let mut s = ArchSpec::base(
        name,
        rng.random_range(1..=48),
        rng.random_range(1..=8192),
        8 * rng.random_range(1..=2048),
        rng.random_range(1..=300_000),
        n,
        rng.random_range(1..=n),
    )?;
    s.tied_embeddings = rng.random_bool(0.3);
    Ok(s)
}

fn parity_property() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    let mut failures = Vec::new();
    for i in 0..200 {
        let base = random_spec(&mut rng, &format!("r{i}"))?;
        for g in [2, 4, 8] {
            let t = granularity_transform(&base, g)?;
            let r = parity_check(&base, &t);
            let (a, b) = (count_params(&base), count_params(&t));
            let exact = a.non_router_total() == b.non_router_total()
                && a.non_router_active() == b.non_router_active()
                && a.flops_per_token_excl_router == b.flops_per_token_excl_router;
            checked += 1;
            if !(r.passed && exact) {
                failures.push(format!("{} G{g}", base.name));
            }
        }
    }
    Ok((failures.is_empty(), format!("{checked} spec/granularity pairs, failures {failures:?}")))
}

/// Total, active and FLOPs per token by instantiating the model and tracing
/// which parameters a single token's loss reaches.
fn enumerate(spec: &ArchSpec) -> Result<(u64, u64, u64)> {
    let cfg = spec.model_config(1, 2, SoftmaxOrder::BeforeTopK)?;
    let cfg = cfg.clone().with_moe(cfg.moe().clone().with_capacity_factor(None)?)?;
    let params = init_params::<f64>(&cfg, 5);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let mv = ModelVars::from_flat(&cfg, &vars)?;
    let out = loss(&mut g, &cfg, &mv, &[0], &[0], 1, Mode::Eval)?;
    let grads = g.backward(out.task)?;
    let specs = param_specs(&cfg);
    let mut total = 0u64;
    let mut active = 0u64;
    let mut matmul = 0u64;
    for ((s, &v), t) in specs.iter().zip(&vars).zip(params.tensors()) {
        let n = t.len() as u64;
        total += n;
        if grads.get(v).is_some() {
            active += n;
            if s.kind == ParamKind::Weight && s.name != "embed" {
                matmul += n;
            }
        }
    }
    if cfg.tied_embeddings() {
        matmul += (cfg.vocab_size() * cfg.d_model()) as u64;
    }
    Ok((total, active, 2 * matmul))
}

fn enumeration_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = Vec::new();
    let n_specs = 24;
    for i in 0..n_specs {
        let n = rng.random_range(1..=6);
        let mut base = ArchSpec::base(
            format!("tiny{i}"),
            rng.random_range(1..=3),
            4 * rng.random_range(1..=4),
            4 * rng.random_range(1..=6),
            rng.random_range(2..=20),
            n,
            rng.random_range(1..=n),
        )?;
        base.tied_embeddings = rng.random_bool(0.3);
        let spec = granularity_transform(&base, [1, 2, 4][i % 3])?;
        let c = count_params(&spec);
        let (total, active, flops) = enumerate(&spec)?;
        if (c.total_params, c.active_params, c.flops_per_token) != (total, active, flops) {
            mismatches.push(format!(
                "{}: counted ({}, {}, {}) vs enumerated ({total}, {active}, {flops})",
                spec.name, c.total_params, c.active_params, c.flops_per_token
            ));
        }
    }
    Ok((mismatches.is_empty(), format!("{n_specs} tiny specs, mismatches {mismatches:?}")))
}

fn gradient_correctness() -> Result<(bool, String)> {
    let start = Instant::now();
    let tokens = [1usize, 4, 2, 7, 3, 3, 0, 5];
    let targets = [4usize, 2, 7, 3, 3, 0, 5, 6];
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut cases = 0;
    for order in [SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK] {
        for k in [2, 4] {
            for cf in [None, Some(1.0)] {
                let moe = MoeConfig::new(6, k, 16, 4, order)?.with_capacity_factor(cf)?;
                let cfg = ModelConfig::new(2, 2, 11, 4, moe)?.with_attn_dropout(0.0)?.with_init_std(0.3)?;
                let params = init_params::<f64>(&cfg, 11);
                let f = |g: &mut Graph<f64>, v: &[Var]| {
                    let mv = ModelVars::from_flat(&cfg, v)?;
                    Ok(loss(g, &cfg, &mv, &tokens, &targets, 2, Mode::Eval)?.total)
                };
                let r = grad_check(f, params.tensors(), 1e-5)?;
                worst = worst.max(r.max_rel_error);
                entries += r.entries_checked;
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = worst < 1e-4 && elapsed < Duration::from_secs(120);
    Ok((
        passed,
        format!("{cases} configurations, {entries} entries, max relative error {worst:.2e}, {elapsed:.1?}"),
    ))
}

fn router_gradient_constraint() -> Result<(bool, String)> {
    let rejected = MoeConfig::new(4, 1, 4, 4, SoftmaxOrder::AfterTopK).is_err();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = MoeConfig::new(4, 1, 4, 4, SoftmaxOrder::BeforeTopK)?;
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(vec![6, 4], 1.0, &mut rng));
    let w = g.param(Tensor::randn(vec![4, 4], 1.0, &mut rng));
    let probe = g.constant(Tensor::randn(vec![6, 1], 1.0, &mut rng));
    let r = route(&mut g, x, w, &cfg)?;
    let weighted = g.mul(r.gates, probe)?;
    let l = g.sum(weighted);
    let grads = g.backward(l)?;
    let router_grad_norm = grads.get(w).map(|t| t.sum_sq().sqrt()).unwrap_or(0.0);

    let cfg = MoeConfig::new(8, 3, 4, 4, SoftmaxOrder::AfterTopK)?;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::randn(vec![32, 8], 2.0, &mut rng));
    let r = gates_from_logits(&mut g, logits, &cfg)?;
    let worst_sum = (0..32)
        .map(|t| (r.decision.token_gates(t).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let passed = rejected && router_grad_norm > 1e-6 && worst_sum <= 1e-6;
    Ok((
        passed,
        format!(
            "k=1 after Top-k rejected: {rejected}; k=1 before Top-k router grad norm {router_grad_norm:.3e}; \
             k=3 after Top-k max |gate sum - 1| {worst_sum:.1e}"
        ),
    ))
}

fn dropping_semantics() -> Result<(bool, String)> {
    let cfg = MoeConfig::new(4, 1, 8, 8, SoftmaxOrder::BeforeTopK)?.with_capacity_factor(Some(1.5))?;
    let adversarial = dispatch(RoutingDecision::from_selections(4, 1, vec![0; 64], vec![1.0; 64])?, &cfg);
    let processed = 64 - adversarial.dropped_count();
    let uniform = dispatch(
        RoutingDecision::from_selections(4, 1, (0..64).map(|i| i % 4).collect(), vec![1.0; 64])?,
        &cfg,
    );
    let passed = processed == 24 && adversarial.dropped_count() == 40 && uniform.dropped_count() == 0;
    Ok((
        passed,
        format!(
            "all-to-one: processed {processed}, dropped {}; uniform: dropped {}",
            adversarial.dropped_count(),
            uniform.dropped_count()
        ),
    ))
}

fn aux_anchor() -> Result<(bool, String)> {
    let (t, n) = (64, 8);
    let mut g = Graph::<f64>::new();
    let probs = g.constant(Tensor::full(vec![t, n], 1.0 / n as f64));
    let d = RoutingDecision::from_selections(n, 2, (0..2 * t).map(|i| i % n).collect(), vec![0.5; 2 * t])?;
    let a = aux_loss(&mut g, probs, &d)?;
    let aux = g.value(a).item();
    let zeros = g.constant(Tensor::zeros(vec![t, n]));
    let z = z_loss(&mut g, zeros)?;
    let z = g.value(z).item();
    let z_expected = (n as f64).ln().powi(2);
    let passed = (aux - 1.0).abs() <= 1e-9 && (z - z_expected).abs() <= 1e-12;
    Ok((passed, format!("aux {aux:.12}, z {z:.12} vs (ln {n})^2 = {z_expected:.12}")))
}

fn step_savings_oracle() -> Result<(bool, String)> {
    let grid = |f: &dyn Fn(f64) -> f64, end: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n).map(|i| end * i as f64 / n as f64).map(|t| (t, f(t))).collect()
    };
    let mut results = Vec::new();
    let linear_base = grid(&|t| 3.0 - t / 100.0, 100.0, 100);
    let linear_var = grid(&|t| 3.0 - t / 80.0, 100.0, 100);
    results.push(("linear", step_savings(&linear_base, &linear_var, 5)?.savings_pct, 20.0));
    results.push(("identical", step_savings(&linear_base, &linear_base, 5)?.savings_pct, 0.0));
    // Power-law curves L = a + b (t + 1)^-p; the variant scales b by 0.8.
    let (a, b, p) = (1.5, 2.0, 0.5);
    let base = grid(&|t| a + b * (t + 1.0).powf(-p), 2000.0, 200);
    let var = grid(&|t| a + 0.8 * b * (t + 1.0).powf(-p), 2000.0, 200);
    let target = {
        let r = step_savings(&base, &var, 1)?;
        r.target_loss
    };
    let cross = ((target - a) / (0.8 * b)).powf(-1.0 / p) - 1.0;
    results.push(("power law", step_savings(&base, &var, 1)?.savings_pct, 100.0 * (1.0 - cross / 2000.0)));
    // Exponential curves with different rates.
    let base = grid(&|t| 2.0 + (-t / 500.0).exp(), 1000.0, 100);
    let var = grid(&|t| 2.0 + (-t / 350.0).exp(), 1000.0, 100);
    let target = 2.0 + (-1000.0f64 / 500.0).exp();
    let cross = -350.0 * (target - 2.0).ln();
    results.push(("exponential", step_savings(&base, &var, 1)?.savings_pct, 100.0 * (1.0 - cross / 1000.0)));
    let worst = results.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, got, want)| format!("{n} {got:.3}% (closed form {want:.3}%)"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((worst <= 0.5, detail))
}

fn determinism() -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out_s = out.to_string_lossy().into_owned();
        let (code, msg) = cli(&["train", "--preset", "toy-g8", "--seed", "17", "--steps", "60", "--out", &out_s]);
        if code != 0 {
            return Ok((false, format!("train exited {code}: {msg}")));
        }
        files.push(std::fs::read(out.join("metrics.csv"))?);
    }
    let passed = files[0] == files[1] && !files[0].is_empty();
    Ok((passed, format!("two 60-step runs, metrics.csv {} bytes each, identical: {}", files[0].len(), files[0] == files[1])))
}

fn max_ep(r: &MetricRecord) -> f64 {
    r.ep_load.iter().cloned().fold(0.0, f64::max)
}

fn balance_dynamics(records: &[MetricRecord]) -> (bool, String) {
    let n = records.len();
    let tail = &records[n - n / 4..];
    let (lo, hi) = (0.105, 0.145);
    let outside = tail.iter().filter(|r| !(lo..=hi).contains(&max_ep(r))).count();
    let worst = tail.iter().map(max_ep).fold(0.0, f64::max);
    let first = records.first().map(max_ep).unwrap_or(f64::NAN);
    let passed = n == 2000 && outside == 0;
    (
        passed,
        format!(
            "{n} steps, max EP fraction at step 1 {first:.4}; final {} steps: worst {worst:.4}, {outside} outside [{lo}, {hi}]",
            tail.len()
        ),
    )
}

fn loss_decrease(runs: &HashMap<&'static str, Result<Vec<MetricRecord>>>) -> (bool, String) {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in DESK_PRESET_NAMES {
        match &runs[name] {
            Err(e) => {
                passed = false;
                parts.push(format!("{name}: {e}"));
            }
            Ok(records) => {
                let at50 = records.iter().find(|r| r.step == 50).and_then(|r| r.val_loss);
                let last = records.last().and_then(|r| r.val_loss);
                let finite = records.iter().all(|r| r.loss.is_finite() && r.val_loss.is_none_or(f64::is_finite));
                match (at50, last) {
                    (Some(a), Some(b)) => {
                        let drop = 1.0 - b / a;
                        passed &= finite && drop >= 0.30;
                        parts.push(format!("{name} {a:.3} -> {b:.3} ({:.1}%)", 100.0 * drop));
                    }
                    _ => {
                        passed = false;
                        parts.push(format!("{name}: missing validation loss"));
                    }
                }
            }
        }
    }
    (passed, parts.join("; "))
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![
        timed(1, "table reproduction", table_reproduction),
        timed(2, "parity property", parity_property),
        timed(3, "enumeration oracle", enumeration_oracle),
        timed(4, "gradient correctness", gradient_correctness),
        timed(5, "router-gradient constraint", router_gradient_constraint),
        timed(6, "dropping semantics", dropping_semantics),
        timed(7, "aux-loss anchor", aux_anchor),
        timed(9, "step-savings oracle", step_savings_oracle),
    ];

    let train_start = Instant::now();
    let training = std::thread::spawn(|| {
        let handles: Vec<_> = DESK_PRESET_NAMES
            .iter()
            .map(|&name| {
                let h = std::thread::spawn(move || -> Result<(Vec<MetricRecord>, Duration)> {
                    let t = Instant::now();
                    let p = desk_preset(name)?;
                    let ep = default_ep_size(p.model.moe().n_experts());
                    Ok((train::<f32>(&p.model, &p.hp, ep)?.records, t.elapsed()))
                });
                (name, h)
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| (name, h.join().expect("training thread panicked")))
            .collect::<Vec<_>>()
    });

    outcomes.push(timed(10, "determinism", determinism));

    let runs = training.join().expect("training thread panicked");
    let train_elapsed = train_start.elapsed();
    let mut records: HashMap<&'static str, Result<Vec<MetricRecord>>> = HashMap::new();
    for (name, r) in runs {
        records.insert(name, r.map(|(rec, _)| rec));
    }
    let (passed, detail) = match &records["toy-g8"] {
        Ok(r) => balance_dynamics(r),
        Err(e) => (false, format!("error: {e}")),
    };
    outcomes.push(Outcome {
        id: 8,
        title: "balance dynamics",
        passed,
        detail,
        elapsed: train_elapsed,
    });
    let (passed, detail) = loss_decrease(&records);
    outcomes.push(Outcome {
        id: 11,
        title: "desk training loss decrease",
        passed,
        detail,
        elapsed: train_elapsed,
    });
    outcomes.sort_by_key(|o| o.id);

    for o in &outcomes {
        println!(
            "{} criterion {:>2} {}: {} [{:.1?}]",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.detail,
            o.elapsed
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed in {:.1?}", outcomes.len() - failed, outcomes.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
