//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use mixture_mte::data::Dataset;
use mixture_mte::dgp::{simulate, DgpConfig};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Plain (unweighted) Probit MLE by Newton-Raphson from zero, written
/// against statrs' normal distribution.
pub fn newton_probit(z: &DMatrix<f64>, d: &DVector<f64>) -> (DVector<f64>, f64) {
    let normal = Normal::standard();
    let k = z.ncols();
    let loglik = |b: &DVector<f64>| -> f64 {
        let t = z * b;
        t.iter()
            .zip(d.iter())
            .map(|(ti, di)| if *di == 1.0 { normal.cdf(*ti).ln() } else { normal.sf(*ti).ln() })
            .sum()
    };
    let mut b = DVector::zeros(k);
    let mut ll = loglik(&b);
    for _ in 0..200 {
        let t = z * &b;
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..z.nrows() {
            let q = 2.0 * d[i] - 1.0;
            let u = q * t[i];
            let lam = q * normal.pdf(u) / normal.cdf(u);
            let zi = z.row(i).transpose();
            grad += &zi * lam;
            info += &zi * zi.transpose() * (lam * (lam + t[i]));
        }
        let step = info.cholesky().expect("information is positive definite").solve(&grad);
        let mut scale = 1.0;
        loop {
            let cand = &b + &step * scale;
            let lc = loglik(&cand);
            if lc >= ll - 1e-12 || scale < 1e-8 {
                b = cand;
                ll = lc;
                break;
            }
            scale *= 0.5;
        }
        if grad.norm() < 1e-11 * z.nrows() as f64 && step.norm() * scale < 1e-13 {
            break;
        }
    }
    (b, ll)
}

/// One latent group with the default design's group 1 parameters.
pub fn single_group_config(n: usize) -> DgpConfig {
    let base = DgpConfig::default();
    DgpConfig {
        n,
        pi: vec![1.0],
        gamma: vec![base.gamma[0]],
        beta0: vec![base.beta0[0]],
        beta1: vec![base.beta1[0]],
        ..base
    }
}

pub fn simulated(config: &DgpConfig, seed: u64) -> Dataset {
    simulate(config, seed).unwrap().dataset().unwrap()
}
