//! Finite-difference check of a full two-layer MoE transformer in 64-bit.

use grainmoe::gradcheck::grad_check_sampled;
use grainmoe::model::{init_params, loss, Mode, ModelConfig, ModelVars};
use grainmoe::moe::{MoeConfig, SoftmaxOrder};

fn main() -> grainmoe::Result<()> {
    let tokens = [1usize, 4, 2, 7, 3, 3, 0, 5];
    let targets = [4usize, 2, 7, 3, 3, 0, 5, 6];
    for order in [SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK] {
        for cf in [None, Some(1.0)] {
            let moe = MoeConfig::new(4, 2, 8, 4, order)?.with_capacity_factor(cf)?;
            let cfg = ModelConfig::new(2, 2, 8, 4, moe)?.with_attn_dropout(0.0)?.with_init_std(0.3)?;
            let params = init_params::<f64>(&cfg, 3);
            let f = |g: &mut grainmoe::autodiff::Graph<f64>, v: &[grainmoe::autodiff::Var]| {
                let mv = ModelVars::from_flat(&cfg, v)?;
                Ok(loss(g, &cfg, &mv, &tokens, &targets, 2, Mode::Eval)?.total)
            };
            let r = grad_check_sampled(f, params.tensors(), 1e-5, Some(16), 0)?;
            println!(
                "{order:?}, capacity factor {cf:?}: {} entries, max relative error {:.2e}",
                r.entries_checked, r.max_rel_error
            );
        }
    }
    Ok(())
}
