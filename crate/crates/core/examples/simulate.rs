//! Draw a sample from the two-group simulation design and look at the
//! latent bookkeeping the simulator keeps.

use mixture_mte::dgp::{simulate, true_mte, DgpConfig};

fn main() -> mixture_mte::Result<()> {
    let config = DgpConfig { n: 10_000, ..DgpConfig::default() };
    let sim = simulate(&config, 42)?;
    let n = sim.n() as f64;
    for j in 0..config.n_groups() {
        let share = sim.s.iter().filter(|&&s| s == j).count() as f64 / n;
        println!("group {}: share {share:.3} (pi = {})", j + 1, config.pi[j]);
    }
    println!("treated share {:.3}", sim.d.sum() / n);
    let ate = (&sim.y1 - &sim.y0).sum() / n;
    println!("sample ATE from potential outcomes {ate:.3}");

    println!("true MTE at x = (1, 0.5):");
    for v in [0.1, 0.3, 0.5, 0.7, 0.9] {
        println!(
            "  v = {v}: group 1 {:+.3}, group 2 {:+.3}",
            true_mte(&config, 0, &[1.0, 0.5], v),
            true_mte(&config, 1, &[1.0, 0.5], v)
        );
    }

    let mut head = Vec::new();
    sim.write_observed_csv(&mut head, Some(6))?;
    let text = String::from_utf8(head).unwrap();
    println!("observed CSV, first rows:");
    for line in text.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
