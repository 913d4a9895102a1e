//! Slow reference implementations used to check the fast paths: a dense
//! Hadamard matrix, exact kernel Grams, a dense-covariance GP and Monte-Carlo
//! spectral expectations.
//!
//! Nothing here calls into the transform, feature or GP code.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest instance the dense references accept.
pub const MAX_ORACLE_POINTS: usize = 2000;

/// Sylvester Hadamard matrix of order `n`: `H_ij = (-1)^popcount(i & j)`.
pub fn dense_hadamard(n: usize) -> Result<DMatrix<f64>> {
    if !n.is_power_of_two() {
        return Err(Error::InvalidDimension(format!(
            "Hadamard order {n} is not a power of two"
        )));
    }
    if n > 4096 {
        return Err(Error::SizeGuard(format!("Hadamard order {n} exceeds 4096")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// `H v` by explicit matrix-vector product.
pub fn dense_hadamard_apply(v: &[f64]) -> Result<Vec<f64>> {
    let h = dense_hadamard(v.len())?;
    Ok((0..v.len())
        .map(|i| (0..v.len()).map(|j| h[(i, j)] * v[j]).sum())
        .collect())
}

/// One Gaussian spectral component: `weight^2 exp(-0.5 ||spread * tau||^2) cos(<mean, tau>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBump {
    pub mean: Vec<f64>,
    pub spread: Vec<f64>,
    pub weight: f64,
}

/// Reference stationary kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum ExactKernel {
    Rbf {
        lengthscale: f64,
        amplitude: f64,
    },
    Ard {
        lengthscales: Vec<f64>,
        amplitude: f64,
    },
    GmClosedForm {
        components: Vec<GaussianBump>,
    },
    /// `weight^2` times the average of `cos <w, (x - x') / l>` over stored
    /// frequency draws (one per row).
    McRadial {
        frequencies: DMatrix<f64>,
        lengthscales: Vec<f64>,
        weight: f64,
    },
}

impl ExactKernel {
    /// Monte-Carlo radial kernel in `d` inputs. Each frequency is `r * u`
    /// restricted to its first `d` coordinates, with `u` uniform on the unit
    /// sphere of `ambient >= d` dimensions and `r` drawn by `radius`.
    pub fn mc_radial<F>(
        d: usize,
        ambient: usize,
        draws: usize,
        seed: u64,
        lengthscales: Vec<f64>,
        weight: f64,
        mut radius: F,
    ) -> Result<Self>
    where
        F: FnMut(&mut ChaCha8Rng) -> f64,
    {
        if ambient < d || lengthscales.len() != d || draws == 0 {
            return Err(Error::InvalidDimension(format!(
                "radial oracle needs ambient >= d = lengthscales and draws > 0, got {ambient}, {d}, {}, {draws}",
                lengthscales.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frequencies = DMatrix::zeros(draws, d);
        let mut u = vec![0.0; ambient];
        for k in 0..draws {
            for v in u.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = radius(&mut rng);
            for j in 0..d {
                frequencies[(k, j)] = r * u[j] / norm;
            }
        }
        Ok(ExactKernel::McRadial {
            frequencies,
            lengthscales,
            weight,
        })
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let tau: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
        match self {
            ExactKernel::Rbf { lengthscale, amplitude } => {
                let sq: f64 = tau.iter().map(|t| t * t).sum();
                amplitude * amplitude * (-0.5 * sq / (lengthscale * lengthscale)).exp()
            }
            ExactKernel::Ard {
                lengthscales,
                amplitude,
            } => {
                let sq: f64 = tau.iter().zip(lengthscales).map(|(t, l)| (t / l) * (t / l)).sum();
                amplitude * amplitude * (-0.5 * sq).exp()
            }
            ExactKernel::GmClosedForm { components } => components
                .iter()
                .map(|c| {
                    let mut sq = 0.0;
                    let mut phase = 0.0;
                    for j in 0..tau.len() {
                        sq += (c.spread[j] * tau[j]).powi(2);
                        phase += c.mean[j] * tau[j];
                    }
                    c.weight * c.weight * (-0.5 * sq).exp() * phase.cos()
                })
                .sum(),
            ExactKernel::McRadial {
                frequencies,
                lengthscales,
                weight,
            } => {
                let scaled: Vec<f64> = tau.iter().zip(lengthscales).map(|(t, l)| t / l).collect();
                let total: f64 = frequencies
                    .row_iter()
                    .map(|w| w.iter().zip(&scaled).map(|(a, b)| a * b).sum::<f64>().cos())
                    .sum();
                weight * weight * total / frequencies.nrows() as f64
            }
        }
    }
}

fn guard(n: usize) -> Result<()> {
    if n > MAX_ORACLE_POINTS {
        return Err(Error::SizeGuard(format!("{n} points, limit {MAX_ORACLE_POINTS}")));
    }
    Ok(())
}

/// Dense `n x n` Gram over the rows of `x`.
pub fn exact_gram(kernel: &ExactKernel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    exact_cross(kernel, x, x)
}

/// Dense `n x n*` cross-covariance between the rows of `x` and `z`.
pub fn exact_cross(kernel: &ExactKernel, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    guard(x.nrows())?;
    guard(z.nrows())?;
    if x.ncols() != z.ncols() {
        return Err(Error::InvalidDimension(format!(
            "{} vs {} input columns",
            x.ncols(),
            z.ncols()
        )));
    }
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let cols: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        kernel.eval(&rows[i], &cols[j])
    }))
}

/// Monte-Carlo estimate of `weight^2 E[cos <w, tau>]` with
/// `w ~ N(mean, diag(spread)^2)`. Returns `(estimate, standard error)`.
pub fn mc_gaussian_expectation(bump: &GaussianBump, tau: &[f64], draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let phase: f64 = (0..tau.len())
            .map(|j| (bump.mean[j] + bump.spread[j] * rng.sample::<f64, _>(StandardNormal)) * tau[j])
            .sum();
        let c = phase.cos();
        s += c;
        s2 += c * c;
    }
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    let w2 = bump.weight * bump.weight;
    (w2 * mean, w2 * (var / n).sqrt())
}

/// Textbook Cholesky; `None` when a pivot is not positive.
fn naive_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

fn forward_sub(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * x[k]).sum();
        x[i] = (b[i] - s) / l[(i, i)];
    }
    x
}

fn backward_sub_transposed(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (b[i] - s) / l[(i, i)];
    }
    x
}

/// Output of the dense GP reference.
#[derive(Debug, Clone)]
pub struct DenseGp {
    pub nlml: f64,
    pub mean: Vec<f64>,
    /// Predictive variance of a noisy observation.
    pub variance: Vec<f64>,
}

/// Exact GP with covariance `gram + noise_var I`. `cross_cov` is `n x n*`
/// and `prior_var` holds the prior variances at the `n*` test points.
pub fn dense_gp_nlml_predict(
    gram: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
    cross_cov: &DMatrix<f64>,
    prior_var: &[f64],
) -> Result<DenseGp> {
    let n = y.len();
    guard(n)?;
    if gram.nrows() != n || gram.ncols() != n || cross_cov.nrows() != n || cross_cov.ncols() != prior_var.len() {
        return Err(Error::InvalidDimension("dense GP operand shapes disagree".into()));
    }
    let mut c = gram.clone();
    for i in 0..n {
        c[(i, i)] += noise_var;
    }
    let scale = (0..n).map(|i| c[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
    let mut jitter = 0.0;
    let l = loop {
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += jitter;
        }
        if let Some(l) = naive_cholesky(&cj) {
            break l;
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
        if jitter > 1e-6 * scale {
            return Err(Error::IllConditioned(
                "dense covariance is not positive definite".into(),
            ));
        }
    };
    let z = forward_sub(&l, y);
    let alpha = backward_sub_transposed(&l, &z);
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let nlml = 0.5 * (quad + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln());

    let mut mean = Vec::with_capacity(prior_var.len());
    let mut variance = Vec::with_capacity(prior_var.len());
    for (j, pv) in prior_var.iter().enumerate() {
        let k: Vec<f64> = (0..n).map(|i| cross_cov[(i, j)]).collect();
        mean.push(k.iter().zip(&alpha).map(|(a, b)| a * b).sum());
        let w = forward_sub(&l, &k);
        variance.push(pv - w.iter().map(|v| v * v).sum::<f64>() + noise_var);
    }
    Ok(DenseGp { nlml, mean, variance })
}
