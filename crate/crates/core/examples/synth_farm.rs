//! Writes a synthetic SCADA CSV for trying out the CLI without real data.
//!
//! Usage: cargo run -p windcast --example synth_farm -- [PATH] [N_TURBINES] [N_DAYS]

use std::env;

use windcast::synthdata::{generate, SynthSpec};

fn main() {
    let mut args = env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "data.csv".into());
    let spec = SynthSpec {
        n_turbines: args.next().map_or(3, |a| a.parse().expect("N_TURBINES")),
        n_days: args.next().map_or(14, |a| a.parse().expect("N_DAYS")),
        ..SynthSpec::default()
    };
    let set = generate(&spec, path.as_ref()).expect("write synthetic farm");
    println!(
        "{path}: {} turbines, {} days, {} steps each",
        set.n_turbines(),
        set.n_days(),
        set.n_steps()
    );
}
