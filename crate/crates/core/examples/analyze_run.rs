//! Trains a baseline and a variant briefly, writes their metric files and
//! computes how many training steps the variant saves.

use grainmoe::analysis::{analyze_run, export, read_ep_load, read_logit_ranks, EP_LOAD_FILE, LOGIT_RANKS_FILE};
use grainmoe::training::{default_ep_size, desk_preset, train};

fn main() -> grainmoe::Result<()> {
    let dir = std::env::temp_dir().join(format!("grainmoe-analyze-{}", std::process::id()));
    let mut runs = Vec::new();
    for name in ["toy-g1", "toy-g8"] {
        let mut p = desk_preset(name)?;
        p.hp.steps = 300;
        let ep = default_ep_size(p.model.moe().n_experts());
        let out = train::<f32>(&p.model, &p.hp, ep)?;
        let run_dir = dir.join(name);
        std::fs::create_dir_all(&run_dir)?;
        export(&out.records, &out.snapshots, &run_dir)?;
        runs.push(run_dir);
    }

    match analyze_run(&runs[1], Some(&runs[0]), 5) {
        Ok(res) => {
            if let Some((path, s)) = res.savings {
                println!(
                    "toy-g8 reaches toy-g1's final loss {:.4} at step {:.1}: {:.1}% fewer steps ({})",
                    s.target_loss,
                    s.crossing_step,
                    s.savings_pct,
                    path.display()
                );
            }
        }
        Err(e) => println!("savings: {e}"),
    }
    let ep = read_ep_load(&runs[1].join(EP_LOAD_FILE))?;
    let last_step = ep.last().map(|r| r.step).unwrap_or(0);
    let last: Vec<f64> = ep.iter().filter(|r| r.step == last_step).map(|r| r.fraction).collect();
    println!("toy-g8 EP load at step {last_step}: {last:.3?}");
    for s in read_logit_ranks(&runs[1].join(LOGIT_RANKS_FILE))?.iter().filter(|s| s.layer == 0) {
        println!("step {:4} layer 0 gate medians (top 3): {:.3?}", s.step, &s.medians[..3]);
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
