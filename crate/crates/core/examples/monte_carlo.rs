//! A small Monte Carlo run written out as the bias/RMSE tables.

use mixture_mte::dgp::DgpConfig;
use mixture_mte::mc::{mc_run, write_table3, write_table4, McSettings, StageVariant};
use mixture_mte::mixture::EmConfig;

fn main() -> mixture_mte::Result<()> {
    let settings = McSettings {
        replications: 20,
        variants: vec![StageVariant { inner_knots: 1, ridge: true }, StageVariant { inner_knots: 1, ridge: false }],
        em: EmConfig { n_starts: 2, ..EmConfig::default() },
        ..McSettings::default()
    };
    let mut reports = Vec::new();
    for n in [1000, 4000] {
        let config = DgpConfig { n, ..DgpConfig::default() };
        let r = mc_run(&config, &settings, 1)?;
        println!("n = {n}: {} of {} replications succeeded", r.successes, r.replications);
        reports.push(r);
    }
    println!("\nTable 3 layout");
    write_table3(&reports, std::io::stdout())?;
    println!("\nTable 4 layout");
    write_table4(&reports, std::io::stdout())?;
    Ok(())
}
