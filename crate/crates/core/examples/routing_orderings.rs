//! Top-k gates under both softmax orderings, and why a single selected
//! expert needs the softmax applied before selection.

use grainmoe::autodiff::Graph;
use grainmoe::moe::{gates_from_logits, MoeConfig, SoftmaxOrder};
use grainmoe::Tensor;

fn main() -> grainmoe::Result<()> {
    let logits = vec![2.0, 1.0, 0.5, -1.0];
    for order in [SoftmaxOrder::BeforeTopK, SoftmaxOrder::AfterTopK] {
        let cfg = MoeConfig::new(4, 2, 4, 4, order)?;
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::new(vec![1, 4], logits.clone())?);
        let r = gates_from_logits(&mut g, l, &cfg)?;
        let gates = r.decision.token_gates(0);
        println!(
            "{order:?}: experts {:?} gates [{:.4}, {:.4}] sum {:.4}",
            r.decision.token_experts(0),
            gates[0],
            gates[1],
            gates.iter().sum::<f64>()
        );
    }

    match MoeConfig::new(4, 1, 4, 4, SoftmaxOrder::AfterTopK) {
        Ok(_) => println!("k = 1 after Top-k accepted"),
        Err(e) => println!("k = 1 after Top-k rejected: {e}"),
    }
    let cfg = MoeConfig::new(4, 1, 4, 4, SoftmaxOrder::BeforeTopK)?;
    let mut g = Graph::<f64>::new();
    let l = g.param(Tensor::new(vec![1, 4], logits)?);
    let r = gates_from_logits(&mut g, l, &cfg)?;
    let loss = g.sum(r.gates);
    let grads = g.backward(loss)?;
    let dl = grads.get(l).map(|t| t.data().to_vec()).unwrap_or_default();
    println!("k = 1 before Top-k: gate {:.4}, d gate / d logits {dl:.4?}", r.decision.token_gates(0)[0]);
    Ok(())
}
