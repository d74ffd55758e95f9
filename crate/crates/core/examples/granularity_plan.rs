//! Parameter and FLOPs accounting for the 11B and 56B preset families, and
//! a check that raising granularity leaves non-router cost unchanged.

use grainmoe::configplan::{count_params, granularity_transform, parity_check, preset, table_row, ArchSpec, PRESET_NAMES};

fn main() -> grainmoe::Result<()> {
    println!("{:<11} experts, top_k, active, d_model, d_expert, total", "preset");
    for name in PRESET_NAMES {
        println!("{name:<11} {}", table_row(&preset(name)?));
    }

    let base = ArchSpec::base("custom", 12, 1024, 4096, 50_000, 8, 2)?;
    println!("\ncustom base: {}", table_row(&base));
    for g in [2, 4, 8, 16] {
        let spec = granularity_transform(&base, g)?;
        let parity = parity_check(&base, &spec);
        let c = count_params(&spec);
        println!(
            "G{g:<2} {}  router params {}  parity {}",
            table_row(&spec),
            c.router_params,
            if parity.passed { "ok" } else { "broken" }
        );
    }
    Ok(())
}
