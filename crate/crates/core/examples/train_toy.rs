//! Trains one desk preset on the synthetic corpus and reports the loss and
//! expert-parallel load trajectory.
//!
//! Usage: `cargo run --release --example train_toy -- [preset] [steps]`

use grainmoe::training::{default_ep_size, desk_preset, train};

fn main() -> grainmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "toy-g8".into());
    let mut preset = desk_preset(&name)?;
    if let Some(s) = args.next() {
        preset.hp.steps = s.parse().map_err(|_| grainmoe::Error::InvalidConfig(format!("bad step count {s}")))?;
    }
    let ep = default_ep_size(preset.model.moe().n_experts());
    let start = std::time::Instant::now();
    let out = train::<f32>(&preset.model, &preset.hp, ep)?;
    for r in out.records.iter().filter(|r| r.val_loss.is_some()) {
        let max_ep = r.ep_load.iter().cloned().fold(0.0, f64::max);
        println!(
            "step {:5}  train {:.4}  val {:.4}  lr {:.2e}  aux {:.4}  dropped {:.3}  max EP {:.3}",
            r.step,
            r.loss,
            r.val_loss.unwrap_or(f64::NAN),
            r.lr,
            r.aux_loss,
            r.dropped_frac,
            max_ep
        );
    }
    let tail = &out.records[out.records.len() * 3 / 4..];
    let worst = tail
        .iter()
        .flat_map(|r| r.ep_load.iter().cloned())
        .fold(0.0, f64::max);
    println!("{name}: {} steps in {:.1?}, worst max EP fraction over last quarter {worst:.4}", out.records.len(), start.elapsed());
    Ok(())
}
