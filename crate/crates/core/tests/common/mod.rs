#![allow(dead_code)]

use alacarte::fastfood::FastfoodStack;
use alacarte::features::{compute_features, feature_weight_matrix};
use alacarte::gp::{fit_posterior, neg_log_marginal_likelihood, nlml_and_gradient, predict};
use alacarte::kernel::{unpack, Family, HyperVector, KernelShape};
use alacarte::model::build_stacks;
use alacarte::oracle::dense_gp_nlml_predict;
use alacarte::train::init_family;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FAMILIES: [Family; 6] = [
    Family::Frbf,
    Family::Fard,
    Family::Fsard,
    Family::Fsgbard,
    Family::Gm,
    Family::Pwl,
];

pub struct Case {
    pub shape: KernelShape,
    pub stacks: Vec<FastfoodStack>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub x_star: DMatrix<f64>,
    pub hyper: HyperVector,
}

/// Random small problem with at most `max_features` design rows and `max_n`
/// points; hyperparameters are a family initialization jittered in packed
/// coordinates.
pub fn random_case(family: Family, seed: u64, max_n: usize, max_features: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let d = rng.random_range(1..=4);
        let q = rng.random_range(1..=2);
        let m = [4, 8, 16][rng.random_range(0..3)];
        let Ok(shape) = KernelShape::new(family, d, q, m) else {
            continue;
        };
        if shape.feature_count() > max_features {
            continue;
        }
        let n = rng.random_range(8..=max_n);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let y: Vec<f64> = (0..n)
            .map(|i| (2.0 * x[(i, 0)]).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x_star = DMatrix::from_fn(7, d, |_, _| rng.random_range(-2.0..2.0));
        let restart = rng.random_range(0..3);
        let Ok(mut hyper) = init_family(&shape, &x, &y, &mut rng, restart) else {
            continue;
        };
        for v in hyper.0.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        // Keep the noise well away from zero so both solvers are well conditioned.
        hyper.0[0] = hyper.0[0].max((1e-2f64).ln());
        let stacks = build_stacks(&shape, seed).unwrap();
        return Case {
            shape,
            stacks,
            x,
            y,
            x_star,
            hyper,
        };
    }
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs())) / scale
}

/// Relative gaps `(nlml, mean, variance)` between the feature-space GP and the
/// dense oracle on the implied Gram matrix.
pub fn oracle_gaps(c: &Case) -> (f64, f64, f64) {
    let (spec, noise) = unpack(&c.shape, &c.hyper).unwrap();
    let phi = compute_features(&spec, &c.stacks, &c.x).unwrap();
    let phi_star = compute_features(&spec, &c.stacks, &c.x_star).unwrap();
    let v = feature_weight_matrix(&spec);
    let s2 = noise.get();

    let nlml = neg_log_marginal_likelihood(&phi, &v, &c.y, s2).unwrap();
    let post = fit_posterior(&phi, &v, &c.y, s2).unwrap();
    let (mean, var) = predict(&post, &phi_star).unwrap();

    let vphi = DMatrix::from_fn(phi.rows(), phi.cols(), |r, i| v[r] * phi.data[(r, i)]);
    let vphi_star = DMatrix::from_fn(phi_star.rows(), phi_star.cols(), |r, i| v[r] * phi_star.data[(r, i)]);
    let gram = phi.data.transpose() * &vphi;
    let cross = phi.data.transpose() * &vphi_star;
    let prior: Vec<f64> = (0..phi_star.cols())
        .map(|j| phi_star.data.column(j).dot(&vphi_star.column(j)))
        .collect();
    let dense = dense_gp_nlml_predict(&gram, &c.y, s2, &cross, &prior).unwrap();

    (
        rel_gap(&[nlml], &[dense.nlml]),
        rel_gap(&mean, &dense.mean),
        rel_gap(&var, &dense.variance),
    )
}

/// Largest per-coordinate gap between the analytic gradient and central
/// differences with step `h`, relative to `max(|fd|, 1)`.
pub fn gradient_gap(c: &Case, h: f64) -> f64 {
    let (_, grad) = nlml_and_gradient(&c.shape, &c.stacks, &c.x, &c.y, &c.hyper).unwrap();
    let f = |v: &[f64]| {
        nlml_and_gradient(&c.shape, &c.stacks, &c.x, &c.y, &HyperVector(v.to_vec()))
            .unwrap()
            .0
    };
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let mut p = c.hyper.0.clone();
        let mut m = c.hyper.0.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}
