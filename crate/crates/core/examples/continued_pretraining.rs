//! A short main phase followed by continued pretraining: the second phase
//! restarts the optimizer and decays from the first phase's final rate to a
//! tenth of it over 10% of the original steps.

use grainmoe::training::{continued_pretrain, desk_preset, lr_at, train, DataConfig, SynthData};

fn main() -> grainmoe::Result<()> {
    let mut p = desk_preset("toy-g1")?;
    p.hp.steps = 400;
    let ep = 8;
    let first = train::<f32>(&p.model, &p.hp, ep)?;
    let val = |r: &[grainmoe::analysis::MetricRecord]| r.iter().rev().find_map(|r| r.val_loss).unwrap_or(f64::NAN);
    println!(
        "main phase: {} steps, lr {:.2e} -> {:.2e}, validation loss {:.4}",
        first.records.len(),
        first.records[0].lr,
        first.final_lr(),
        val(&first.records)
    );

    let data = SynthData::new(DataConfig::for_model(&p.model, p.hp.seed))?;
    let second = continued_pretrain(&p.model, &p.hp, data, &first, ep)?;
    let s = *second.schedule();
    println!(
        "continued schedule: {} steps, lr {:.2e} -> {:.2e}",
        s.steps,
        lr_at(0, &s)?,
        lr_at(s.steps, &s)?
    );
    let out = second.run(|_| Ok(()))?;
    println!("after continued phase: validation loss {:.4}", val(&out.records));
    Ok(())
}
