//! Expert capacity and token dropping for balanced and adversarial routing.

use grainmoe::moe::{dispatch, expert_capacity, MoeConfig, RoutingDecision, SoftmaxOrder};

fn report(label: &str, experts: Vec<usize>, cfg: &MoeConfig) -> grainmoe::Result<()> {
    let n = experts.len();
    let d = dispatch(RoutingDecision::from_selections(cfg.n_experts(), cfg.top_k(), experts, vec![1.0; n])?, cfg);
    println!(
        "{label}: capacity {:?}, processed {}, dropped {} ({:.1}%), load {:?}",
        d.capacity,
        n - d.dropped_count(),
        d.dropped_count(),
        100.0 * d.dropped_fraction(),
        d.expert_load
    );
    Ok(())
}

fn main() -> grainmoe::Result<()> {
    let t = 64;
    println!("C = ceil(CF * k * T / N) for T = {t}, N = 4, k = 1:");
    for cf in [1.0, 1.25, 1.5, 2.0] {
        println!("  CF {cf}: {}", expert_capacity(cf, 1, t, 4));
    }
    let cfg = MoeConfig::new(4, 1, 8, 8, SoftmaxOrder::BeforeTopK)?.with_capacity_factor(Some(1.5))?;
    report("all tokens to expert 0", vec![0; t], &cfg)?;
    report("round robin", (0..t).map(|i| i % 4).collect(), &cfg)?;
    report("skewed 50/30/10/10", (0..t).map(|i| match i % 10 { 0..=4 => 0, 5..=7 => 1, 8 => 2, _ => 3 }).collect(), &cfg)?;
    let unbounded = cfg.clone().with_capacity_factor(None)?;
    report("all to expert 0, no capacity", vec![0; t], &unbounded)?;
    Ok(())
}
