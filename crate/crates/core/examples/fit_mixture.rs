//! First stage: multi-start EM for the finite-mixture Probit.

use mixture_mte::dgp::{simulate, DgpConfig};
use mixture_mte::mixture::{em_fit, EmConfig};

fn main() -> mixture_mte::Result<()> {
    let config = DgpConfig { n: 8000, ..DgpConfig::default() };
    let data = simulate(&config, 3)?.dataset()?;
    let fit = em_fit(&data, &EmConfig { n_starts: 4, ..EmConfig::default() })?;

    println!("log-likelihood {:.3}, AIC {:.3}, {} EM iterations", fit.loglik, fit.aic, fit.iterations);
    for s in &fit.starts {
        println!("  start {}: loglik {:?}, {} iterations", s.start, s.loglik, s.iterations);
    }
    for j in 0..config.n_groups() {
        println!(
            "group {}: pi {:.3} (true {}), gamma {:.3?} (true {:?})",
            j + 1,
            fit.params.pi[j],
            config.pi[j],
            fit.params.gamma[j].as_slice(),
            config.gamma[j]
        );
    }
    for w in &fit.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
