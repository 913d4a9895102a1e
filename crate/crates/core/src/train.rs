//! Hyperparameter learning: per-family initialization, short restarts,
//! selection of the best restart and a longer continuation run.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Open01, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::fastfood::sample_chi_radii;
use crate::features::{compute_features, feature_weight_matrix};
use crate::gp::{fit_posterior, nlml_and_gradient};
use crate::kernel::{pack, Family, GmGroup, HyperVector, KernelParams, KernelShape, KernelSpec, PwlGroup, ScaleParam};
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::model::{build_stacks, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub restart_count: usize,
    pub restart_iters: usize,
    pub lbfgs_memory: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 150,
            restart_count: 10,
            restart_iters: 20,
            lbfgs_memory: 10,
            gradient_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restart_count == 0 || self.lbfgs_memory == 0 {
            return Err(Error::Domain(
                "restart count and L-BFGS memory must be at least 1".into(),
            ));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Domain("gradient tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Quantile of sorted data by linear interpolation between order statistics
/// at position `p (N - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorted Euclidean distances between random pairs of rows of `x`, each
/// coordinate divided by `scale` when given.
pub fn pair_distances(x: &DMatrix<f64>, scale: Option<&[f64]>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 points for pair distances, got {n}"
        )));
    }
    let pairs = n.div_ceil(5).min(2000);
    let mut out: Vec<f64> = (0..pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (0..x.ncols())
                .map(|c| {
                    let s = scale.map_or(1.0, |s| s[c]);
                    ((x[(i, c)] - x[(j, c)]) / s).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    if out.last().is_none_or(|v| *v <= 0.0) {
        return Err(Error::InsufficientData("all sampled pair distances are zero".into()));
    }
    Ok(out)
}

/// Lengthscale candidates at the 0.1, 0.3, 0.5, 0.7 and 0.9 distance quantiles.
pub fn lengthscale_candidates(sorted: &[f64]) -> Vec<f64> {
    [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|p| quantile(sorted, *p)).collect()
}

pub fn init_lengthscale_quantiles(x: &DMatrix<f64>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(lengthscale_candidates(&pair_distances(x, None, rng)?))
}

/// `l_j = u_j (max X_j - min X_j) sqrt(d)`; constant columns get 1.
pub fn init_ard_with(x: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    let root_d = (x.ncols() as f64).sqrt();
    x.column_iter()
        .zip(u)
        .enumerate()
        .map(|(j, (col, u))| {
            let range = col.max() - col.min();
            if range > 0.0 {
                u * range * root_d
            } else {
                log::warn!("input column {j} is constant; using lengthscale 1");
                1.0
            }
        })
        .collect()
}

pub fn init_ard(x: &DMatrix<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Uniform::new_inclusive(0.4, 0.8).expect("valid range");
    let u: Vec<f64> = (0..x.ncols()).map(|_| dist.sample(rng)).collect();
    init_ard_with(x, &u)
}

fn std_dev(y: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    let mean = y.iter().sum::<f64>() / n;
    let s = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn scales(values: &[f64]) -> Result<Vec<ScaleParam>> {
    values.iter().map(|v| ScaleParam::new(*v)).collect()
}

/// Hat centre and width from a bandwidth sample `lambda`.
pub fn hat_init(d: usize, lambda: f64) -> (f64, f64) {
    let mu = ((d as f64 - 1.0).sqrt() - 2.0).max(0.01) / lambda;
    (mu, 2.0 / lambda)
}

const PERIODOGRAM_BINS: usize = 256;

/// Periodogram `|sum_i y_i exp(i w x_i)|^2 / n` of the targets along one input
/// on the grid `w_k = k * step`, `k = 0..bins`. The grid reaches roughly the
/// Nyquist frequency of evenly spread points. Returns `(step, power)`.
pub fn periodogram(x: &[f64], y: &[f64], bins: usize) -> (f64, Vec<f64>) {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let range = hi - lo;
    if !(range > 0.0) || bins == 0 {
        return (0.0, vec![1.0]);
    }
    let w_max = std::f64::consts::PI * x.len().min(500) as f64 / (2.0 * range);
    let step = w_max / bins as f64;
    let power = (0..bins)
        .map(|k| {
            let w = k as f64 * step;
            let (c, s) = x.iter().zip(y).fold((0.0, 0.0), |(c, s), (xi, yi)| {
                let (sn, cs) = (w * xi).sin_cos();
                (c + yi * cs, s + yi * sn)
            });
            (c * c + s * s) / x.len() as f64
        })
        .collect();
    (step, power)
}

/// Power above ten times the median level of a periodogram, clipped at zero.
pub fn excess_power(power: &[f64]) -> Vec<f64> {
    let mut sorted = power.to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = 10.0 * quantile(&sorted, 0.5);
    power.iter().map(|p| (p - floor).max(0.0)).collect()
}

/// Order in which the RBF distance-quantile candidates are tried when fewer
/// than five restarts are requested: median first.
const RBF_CANDIDATE_ORDER: [usize; 5] = [2, 1, 3, 0, 4];

/// Packed starting point for one restart. `x` and `y` are standardized.
pub fn init_family(
    shape: &KernelShape,
    x: &DMatrix<f64>,
    y: &[f64],
    rng: &mut impl Rng,
    restart_idx: usize,
) -> Result<HyperVector> {
    let (q, m) = (shape.groups, shape.freqs_per_group);
    let d_pad = shape.geometry().d_pad;
    let sd = std_dev(y);
    let noise = ScaleParam::new((sd / 10.0).powi(2))?;
    let amplitude = ScaleParam::new(sd)?;
    let chi = |rng: &mut dyn rand::RngCore| -> Result<Vec<ScaleParam>> {
        let u: Vec<f64> = (0..m).map(|_| rng.sample(Open01)).collect();
        scales(&sample_chi_radii(&u, d_pad)?)
    };
    let params = match shape.family {
        Family::Frbf => {
            let cands = init_lengthscale_quantiles(x, rng)?;
            KernelParams::Frbf {
                lengthscale: ScaleParam::new(cands[RBF_CANDIDATE_ORDER[restart_idx % 5]])?,
                amplitude,
            }
        }
        Family::Fard => KernelParams::Fard {
            lengthscales: scales(&init_ard(x, rng))?,
            amplitude,
        },
        Family::Fsard => KernelParams::Fsard {
            lengthscales: scales(&init_ard(x, rng))?,
            amplitude,
            radii: (0..q).map(|_| chi(rng)).collect::<Result<_>>()?,
        },
        Family::Fsgbard => {
            let lengthscales = scales(&init_ard(x, rng))?;
            let mut radii = Vec::with_capacity(q);
            let mut g = Vec::with_capacity(q);
            let mut b = Vec::with_capacity(q);
            for _ in 0..q {
                radii.push(chi(rng)?);
                g.push((0..m).map(|_| rng.sample(StandardNormal)).collect());
                b.push((0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect());
            }
            KernelParams::Fsgbard {
                lengthscales,
                amplitude,
                radii,
                g,
                b,
            }
        }
        Family::Gm => {
            let median = quantile(&pair_distances(x, None, rng)?, 0.5);
            let shift_sd = 0.01 / median.max(f64::MIN_POSITIVE);
            let spectra: Vec<(f64, Option<WeightedIndex<f64>>)> = if restart_idx == 0 {
                Vec::new()
            } else {
                x.column_iter()
                    .map(|c| {
                        let col: Vec<f64> = c.iter().copied().collect();
                        let (step, power) = periodogram(&col, y, PERIODOGRAM_BINS);
                        (step, WeightedIndex::new(excess_power(&power)).ok())
                    })
                    .collect()
            };
            let groups = (0..q)
                .map(|_| {
                    let ls = init_ard(x, rng);
                    let mu = if spectra.is_empty() {
                        (0..x.ncols())
                            .map(|_| (shift_sd * rng.sample::<f64, _>(StandardNormal)).abs())
                            .collect()
                    } else {
                        spectra
                            .iter()
                            .map(|(step, w)| {
                                let Some(w) = w else { return 0.0 };
                                let k = w.sample(rng) as f64 + rng.random_range(-0.5..0.5);
                                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                                sign * (k * step).abs()
                            })
                            .collect()
                    };
                    Ok(GmGroup {
                        mu,
                        spread: scales(&ls.iter().map(|l| 1.0 / l).collect::<Vec<_>>())?,
                        weight: ScaleParam::new(sd / q as f64)?,
                    })
                })
                .collect::<Result<_>>()?;
            KernelParams::Gm { groups }
        }
        Family::Pwl => {
            let groups = (0..q)
                .map(|_| {
                    let ls = init_ard(x, rng);
                    let dists = pair_distances(x, Some(&ls), rng)?;
                    let lambda = quantile(&dists, rng.random_range(0.2..=0.8));
                    if !(lambda > 0.0) {
                        return Err(Error::InsufficientData("zero bandwidth sample".into()));
                    }
                    let (mu, sigma) = hat_init(shape.input_dim, lambda);
                    Ok(PwlGroup {
                        offset: ScaleParam::new(mu)?,
                        width: ScaleParam::new(sigma)?,
                        lengthscales: scales(&ls)?,
                        weight: ScaleParam::new(sd / q as f64)?,
                    })
                })
                .collect::<Result<_>>()?;
            KernelParams::Pwl { groups }
        }
    };
    pack(&KernelSpec { shape: *shape, params }, noise)
}

/// Outcome of one short restart.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub index: usize,
    pub nlml: f64,
    pub hyper: HyperVector,
}

/// Trains on raw data. Inputs and targets are standardized internally with
/// statistics stored in the returned model.
pub fn fit(shape: &KernelShape, x: &DMatrix<f64>, y: &[f64], config: &TrainConfig) -> Result<(TrainedModel, f64)> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::InvalidDimension(format!(
            "{} input rows for {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != shape.input_dim {
        return Err(Error::InvalidDimension(format!(
            "kernel expects {} input columns, data has {}",
            shape.input_dim,
            x.ncols()
        )));
    }
    if y.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 training points, got {}",
            y.len()
        )));
    }
    let standardizer = Standardizer::fit(x, y);
    let xs = standardizer.transform_x(x);
    let ys = standardizer.transform_y(y);
    let stacks = build_stacks(shape, config.seed)?;
    let objective = |h: &[f64]| nlml_and_gradient(shape, &stacks, &xs, &ys, &HyperVector(h.to_vec()));
    let lbfgs = |iters| LbfgsConfig {
        max_iters: iters,
        memory: config.lbfgs_memory,
        gradient_tolerance: config.gradient_tolerance,
    };

    let restarts = if shape.family == Family::Frbf {
        config.restart_count.min(5)
    } else {
        config.restart_count
    };
    let outcomes: Vec<Option<RestartOutcome>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64 + 1);
            let run = init_family(shape, &xs, &ys, &mut rng, r)
                .and_then(|h0| minimize(objective, &h0.0, lbfgs(config.restart_iters)));
            match run {
                Ok(res) => {
                    log::debug!("restart {r}: nlml {:.6} after {} iterations", res.f, res.iterations);
                    Some(RestartOutcome {
                        index: r,
                        nlml: res.f,
                        hyper: HyperVector(res.x),
                    })
                }
                Err(e) => {
                    log::warn!("restart {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let best = outcomes
        .into_iter()
        .flatten()
        .filter(|o| o.nlml.is_finite())
        .min_by(|a, b| a.nlml.total_cmp(&b.nlml).then(a.index.cmp(&b.index)))
        .ok_or_else(|| Error::OptimizationFailure {
            reason: format!("all {restarts} restarts failed"),
            best: None,
        })?;
    log::info!("selected restart {} with nlml {:.6}", best.index, best.nlml);

    let (nlml, hyper) = match minimize(objective, &best.hyper.0, lbfgs(config.max_iters)) {
        Ok(res) if res.f <= best.nlml => (res.f, HyperVector(res.x)),
        Ok(_) => (best.nlml, best.hyper),
        Err(e) => {
            return Err(Error::OptimizationFailure {
                reason: format!("continuation failed: {e}"),
                best: Some(best.hyper.0),
            })
        }
    };
    let (spec, noise) = crate::kernel::unpack(shape, &hyper)?;
    let phi = compute_features(&spec, &stacks, &xs)?;
    let posterior = fit_posterior(&phi, &feature_weight_matrix(&spec), &ys, noise.get())?;
    let model = TrainedModel::new(*shape, config.seed, hyper, posterior, standardizer, y.len() as u64)?;
    Ok((model, nlml))
}
