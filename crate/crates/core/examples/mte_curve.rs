//! Both stages end to end: fitted propensities, the series regressions and
//! group-wise MTE curves with pointwise 95% bands.

use mixture_mte::dgp::{simulate, true_mte, DgpConfig};
use mixture_mte::inference::{build_inference_matrices, mte_ci};
use mixture_mte::mixture::{em_fit, EmConfig};
use mixture_mte::numeric::{BasisSpec, SolverConfig};
use mixture_mte::series::{fit_outcome_stage, StageInput};

fn main() -> mixture_mte::Result<()> {
    let config = DgpConfig { n: 20_000, ..DgpConfig::default() };
    let data = simulate(&config, 11)?.dataset()?;
    let first = em_fit(&data, &EmConfig { n_starts: 3, ..EmConfig::default() })?;
    let input = StageInput::from_mixture(&first, false)?;
    let fit = fit_outcome_stage(&data, &input, &BasisSpec::default(), &SolverConfig::default())?;
    let mats = build_inference_matrices(&data, &input, &fit)?;

    let x = [1.0, 0.5];
    let grid: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
    for j in 0..2 {
        println!("group {}      mte      se   [  lo,    hi]   truth", j + 1);
        let curve = mte_ci(&fit, &mats, j, &x, &grid, 0.95)?;
        for pt in &curve.points {
            println!(
                "  v = {:.1}  {:+.3}  {:.3}   [{:+.3}, {:+.3}]  {:+.3}",
                pt.p,
                pt.mte,
                pt.se.unwrap(),
                pt.lo.unwrap(),
                pt.hi.unwrap(),
                true_mte(&config, j, &x, pt.p)
            );
        }
    }
    Ok(())
}
