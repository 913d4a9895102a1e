//! Weight-space GP regression on a random-feature design matrix.
//!
//! With `Phi` of shape `D x n`, prior weights `V` and noise `s2` the marginal
//! covariance is `C = Phi' V Phi + s2 I`. All work goes through
//! `A = s2 I + W W'` with `W = V^{1/2} Phi` when `D < n`, and through `C`
//! directly otherwise.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::fastfood::FastfoodStack;
use crate::features::{compute_features, feature_backprop, feature_weight_matrix, DesignMatrix};
use crate::kernel::{unpack, HyperVector, KernelShape, ParamRole};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fitted feature-space posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub beta: DVector<f64>,
    /// Lower Cholesky factor of `A = s2 I + V^{1/2} Phi Phi' V^{1/2}`.
    pub chol_factor: DMatrix<f64>,
    pub noise_var: f64,
    pub weight_diag: Vec<f64>,
}

/// Value of the NLML together with its partial derivatives with respect to
/// the design matrix, the log of each prior weight and the noise variance.
#[derive(Debug, Clone)]
pub struct NlmlDerivatives {
    pub nlml: f64,
    pub d_phi: DMatrix<f64>,
    /// `V_d * dNLML/dV_d`.
    pub d_log_weight: Vec<f64>,
    pub d_noise_var: f64,
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking, so that
/// the bulk of the work is matrix multiplication.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 64 {
        return l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    }
    let h = n / 2;
    let a = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let b = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let c = -(&b * l.view((h, 0), (n - h, h)) * &a);
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&a);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&b);
    out.view_mut((h, 0), (n - h, h)).copy_from(&c);
    out
}

/// Cholesky factorization, retried with growing diagonal jitter on failure.
pub fn robust_cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("matrix has non-finite entries".into()));
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let dim = a.nrows().max(1) as f64;
    let trace = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * trace / dim;
    while jitter <= 1e-4 * trace {
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            log::warn!("Cholesky needed jitter {jitter:.3e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::IllConditioned(format!(
        "Cholesky failed on a {}x{} matrix even with jitter {:.3e}",
        a.nrows(),
        a.ncols(),
        1e-4 * trace
    )))
}

fn check_inputs(phi: &DesignMatrix, weight_diag: &[f64], y: &[f64], noise_var: f64) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InsufficientData(
            "marginal likelihood needs at least one point".into(),
        ));
    }
    if phi.cols() != y.len() {
        return Err(Error::InvalidDimension(format!(
            "design matrix has {} columns but there are {} targets",
            phi.cols(),
            y.len()
        )));
    }
    if phi.rows() != weight_diag.len() {
        return Err(Error::InvalidDimension(format!(
            "design matrix has {} rows but {} prior weights",
            phi.rows(),
            weight_diag.len()
        )));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    Ok(())
}

fn scaled_rows(phi: &DMatrix<f64>, factors: &[f64]) -> DMatrix<f64> {
    let mut w = phi.clone();
    for (mut row, f) in w.row_iter_mut().zip(factors) {
        row *= *f;
    }
    w
}

fn half_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum()
}

/// `n/2 log 2pi + 1/2 log|C| + 1/2 y' C^{-1} y`.
pub fn neg_log_marginal_likelihood(phi: &DesignMatrix, weight_diag: &[f64], y: &[f64], noise_var: f64) -> Result<f64> {
    check_inputs(phi, weight_diag, y, noise_var)?;
    let (n, d) = (y.len(), phi.rows());
    let yv = DVector::from_column_slice(y);
    if d < n {
        let sqrt_v: Vec<f64> = weight_diag.iter().map(|v| v.sqrt()).collect();
        let w = scaled_rows(&phi.data, &sqrt_v);
        let mut a = &w * w.transpose();
        for i in 0..d {
            a[(i, i)] += noise_var;
        }
        let chol = robust_cholesky(&a)?;
        let b = &w * &yv;
        let c = chol.solve(&b);
        let quad = (yv.norm_squared() - b.dot(&c)) / noise_var;
        let log_det = (n - d) as f64 * noise_var.ln() + 2.0 * half_log_det(&chol);
        Ok(0.5 * (n as f64 * LN_2PI + log_det + quad))
    } else {
        let chol = robust_cholesky(&primal_covariance(&phi.data, weight_diag, noise_var))?;
        let alpha = chol.solve(&yv);
        Ok(0.5 * n as f64 * LN_2PI + half_log_det(&chol) + 0.5 * yv.dot(&alpha))
    }
}

fn primal_covariance(phi: &DMatrix<f64>, weight_diag: &[f64], noise_var: f64) -> DMatrix<f64> {
    let vphi = scaled_rows(phi, weight_diag);
    let mut c = phi.transpose() * vphi;
    for i in 0..c.nrows() {
        c[(i, i)] += noise_var;
    }
    c
}

/// NLML and its derivatives with respect to `Phi`, `log V` and `s2`.
pub fn nlml_derivatives(phi: &DesignMatrix, weight_diag: &[f64], y: &[f64], noise_var: f64) -> Result<NlmlDerivatives> {
    check_inputs(phi, weight_diag, y, noise_var)?;
    let (n, d) = (y.len(), phi.rows());
    let p = &phi.data;
    let yv = DVector::from_column_slice(y);
    let sqrt_v: Vec<f64> = weight_diag.iter().map(|v| v.sqrt()).collect();

    // v_phi_cinv = V Phi C^{-1}, alpha = C^{-1} y
    let (nlml, v_phi_cinv, alpha, trace_cinv) = if d < n {
        let mut a = p * p.transpose();
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] *= sqrt_v[i] * sqrt_v[j];
            }
            a[(i, i)] += noise_var;
        }
        let chol = robust_cholesky(&a)?;
        let l_inv = lower_triangular_inverse(&chol.l());
        let w = scaled_rows(p, &sqrt_v);
        // V Phi C^{-1} = V^{1/2} A^{-1} W
        let a_inv_w = l_inv.transpose() * (&l_inv * &w);
        let b = &w * &yv;
        let c = &a_inv_w * &yv;
        let quad = (yv.norm_squared() - b.dot(&c)) / noise_var;
        let log_det = (n - d) as f64 * noise_var.ln() + 2.0 * half_log_det(&chol);
        let nlml = 0.5 * (n as f64 * LN_2PI + log_det + quad);
        let alpha = (&yv - w.transpose() * &c) / noise_var;
        let trace = (n - d) as f64 / noise_var + l_inv.norm_squared();
        (nlml, scaled_rows(&a_inv_w, &sqrt_v), alpha, trace)
    } else {
        let chol = robust_cholesky(&primal_covariance(p, weight_diag, noise_var))?;
        let l_inv = lower_triangular_inverse(&chol.l());
        let c_inv = l_inv.transpose() * &l_inv;
        let alpha = &c_inv * &yv;
        let nlml = 0.5 * n as f64 * LN_2PI + half_log_det(&chol) + 0.5 * yv.dot(&alpha);
        let v_phi_cinv = scaled_rows(&(p * c_inv), weight_diag);
        (nlml, v_phi_cinv, alpha, l_inv.norm_squared())
    };

    let phi_alpha = p * &alpha;
    let d_log_weight: Vec<f64> = (0..d)
        .map(|r| 0.5 * (v_phi_cinv.row(r).dot(&p.row(r)) - weight_diag[r] * phi_alpha[r] * phi_alpha[r]))
        .collect();
    let v_phi_alpha = DVector::from_iterator(d, phi_alpha.iter().zip(weight_diag).map(|(a, v)| a * v));
    let mut d_phi = v_phi_cinv;
    d_phi -= v_phi_alpha * alpha.transpose();
    let d_noise_var = 0.5 * (trace_cinv - alpha.norm_squared());
    Ok(NlmlDerivatives {
        nlml,
        d_phi,
        d_log_weight,
        d_noise_var,
    })
}

/// NLML and its gradient with respect to every packed hyperparameter.
/// `phi` must be the design matrix of `x` under `hyper`.
pub fn nlml_gradient(
    phi: &DesignMatrix,
    x: &DMatrix<f64>,
    y: &[f64],
    hyper: &HyperVector,
    shape: &KernelShape,
    stacks: &[FastfoodStack],
) -> Result<(f64, Vec<f64>)> {
    let (spec, noise) = unpack(shape, hyper)?;
    let weights = feature_weight_matrix(&spec);
    let parts = nlml_derivatives(phi, &weights, y, noise.get())?;
    let mut grad = feature_backprop(&spec, stacks, x, &parts.d_phi)?;
    let per_group = shape.rows_per_group();
    for (i, role) in shape.roles().into_iter().enumerate() {
        let rows = match role {
            ParamRole::NoiseVariance => {
                grad[i] += noise.get() * parts.d_noise_var;
                continue;
            }
            ParamRole::Amplitude => 0..weights.len(),
            ParamRole::GroupWeight { group } => group * per_group..(group + 1) * per_group,
            _ => continue,
        };
        grad[i] += rows.map(|r| 2.0 * parts.d_log_weight[r]).sum::<f64>();
    }
    Ok((parts.nlml, grad))
}

/// Builds features for `hyper` and returns the NLML and its gradient.
pub fn nlml_and_gradient(
    shape: &KernelShape,
    stacks: &[FastfoodStack],
    x: &DMatrix<f64>,
    y: &[f64],
    hyper: &HyperVector,
) -> Result<(f64, Vec<f64>)> {
    let (spec, _) = unpack(shape, hyper)?;
    let phi = compute_features(&spec, stacks, x)?;
    nlml_gradient(&phi, x, y, hyper, shape, stacks)
}

/// Posterior over feature weights. Accepts `n = 0`, giving the prior.
pub fn fit_posterior(phi: &DesignMatrix, weight_diag: &[f64], y: &[f64], noise_var: f64) -> Result<PosteriorState> {
    if !y.is_empty() {
        check_inputs(phi, weight_diag, y, noise_var)?;
    } else if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let d = weight_diag.len();
    let sqrt_v: Vec<f64> = weight_diag.iter().map(|v| v.sqrt()).collect();
    let (a, b) = if y.is_empty() {
        (DMatrix::identity(d, d) * noise_var, DVector::zeros(d))
    } else {
        let w = scaled_rows(&phi.data, &sqrt_v);
        let mut a = &w * w.transpose();
        for i in 0..d {
            a[(i, i)] += noise_var;
        }
        let b = &w * DVector::from_column_slice(y);
        (a, b)
    };
    let chol = robust_cholesky(&a)?;
    let mut beta = chol.solve(&b);
    for (v, s) in beta.iter_mut().zip(&sqrt_v) {
        *v *= s;
    }
    Ok(PosteriorState {
        beta,
        chol_factor: chol.l(),
        noise_var,
        weight_diag: weight_diag.to_vec(),
    })
}

/// Predictive mean and variance (noise included) for each column of `phi_star`.
pub fn predict(state: &PosteriorState, phi_star: &DesignMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = state.beta.len();
    if phi_star.rows() != d {
        return Err(Error::InvalidDimension(format!(
            "test features have {} rows, model expects {d}",
            phi_star.rows()
        )));
    }
    let mean = (phi_star.data.transpose() * &state.beta).iter().copied().collect();
    let sqrt_v: Vec<f64> = state.weight_diag.iter().map(|v| v.sqrt()).collect();
    let psi = scaled_rows(&phi_star.data, &sqrt_v);
    let z = state
        .chol_factor
        .solve_lower_triangular(&psi)
        .ok_or_else(|| Error::IllConditioned("stored Cholesky factor is singular".into()))?;
    let var = z
        .column_iter()
        .map(|c| state.noise_var * (1.0 + c.norm_squared()))
        .collect();
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(data: DMatrix<f64>) -> DesignMatrix {
        DesignMatrix {
            data,
            group_offsets: vec![0],
        }
    }

    /// Direct n x n evaluation used as a reference inside this module.
    fn dense(phi: &DMatrix<f64>, v: &[f64], y: &[f64], s2: f64) -> f64 {
        let c = primal_covariance(phi, v, s2);
        let chol = Cholesky::new(c).unwrap();
        let yv = DVector::from_column_slice(y);
        0.5 * y.len() as f64 * LN_2PI + half_log_det(&chol) + 0.5 * yv.dot(&chol.solve(&yv))
    }

    fn random_case(d: usize, n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let v = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        (phi, v, y, rng.random_range(0.05..0.5))
    }

    #[test]
    fn scalar_case() {
        let (v2, s2, y1) = (0.7_f64, 0.2_f64, 1.3_f64);
        let phi = design(DMatrix::from_element(1, 1, 1.0));
        let got = neg_log_marginal_likelihood(&phi, &[v2], &[y1], s2).unwrap();
        let want = 0.5 * LN_2PI + 0.5 * (v2 + s2).ln() + y1 * y1 / (2.0 * (v2 + s2));
        assert!((got - want).abs() < 1e-14);

        let st = fit_posterior(&phi, &[v2], &[y1], s2).unwrap();
        assert!((st.beta[0] - v2 * y1 / (v2 + s2)).abs() < 1e-14);

        let der = nlml_derivatives(&phi, &[v2], &[y1], s2).unwrap();
        let c = v2 + s2;
        let analytic = 0.5 * (1.0 / c - y1 * y1 / (c * c));
        assert!((der.d_noise_var - analytic).abs() < 1e-14);
        assert!((der.d_log_weight[0] - v2 * analytic).abs() < 1e-14);
    }

    #[test]
    fn zero_prior_is_pure_noise() {
        let (phi, _, y, s2) = random_case(4, 9, 1);
        let got = neg_log_marginal_likelihood(&design(phi), &[0.0; 4], &y, s2).unwrap();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let want = 4.5 * (2.0 * std::f64::consts::PI * s2).ln() + yy / (2.0 * s2);
        assert!((got - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn both_paths_match_dense() {
        for (d, n, seed) in [(8, 40, 2), (40, 12, 3), (16, 16, 4)] {
            let (phi, v, y, s2) = random_case(d, n, seed);
            let want = dense(&phi, &v, &y, s2);
            let got = neg_log_marginal_likelihood(&design(phi), &v, &y, s2).unwrap();
            assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for (d, n, seed) in [(6, 30, 5), (30, 8, 6)] {
            let (phi, v, y, s2) = random_case(d, n, seed);
            let der = nlml_derivatives(&design(phi.clone()), &v, &y, s2).unwrap();
            assert!((der.nlml - dense(&phi, &v, &y, s2)).abs() < 1e-10);
            let h = 1e-6;
            let fd_s2 = (dense(&phi, &v, &y, s2 + h) - dense(&phi, &v, &y, s2 - h)) / (2.0 * h);
            assert!((fd_s2 - der.d_noise_var).abs() < 1e-6);
            for r in 0..d {
                let (mut vp, mut vm) = (v.clone(), v.clone());
                vp[r] += h;
                vm[r] -= h;
                let fd = (dense(&phi, &vp, &y, s2) - dense(&phi, &vm, &y, s2)) / (2.0 * h);
                assert!((v[r] * fd - der.d_log_weight[r]).abs() < 1e-6);
            }
            for (r, c) in [(0, 0), (d - 1, n - 1), (1, 3)] {
                let (mut pp, mut pm) = (phi.clone(), phi.clone());
                pp[(r, c)] += h;
                pm[(r, c)] -= h;
                let fd = (dense(&pp, &v, &y, s2) - dense(&pm, &v, &y, s2)) / (2.0 * h);
                assert!((fd - der.d_phi[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blocked_triangular_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [1, 63, 64, 65, 200] {
            let l = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0 + rng.random_range(0.0..1.0)
                } else if i > j {
                    rng.random_range(-0.3..0.3)
                } else {
                    0.0
                }
            });
            let li = lower_triangular_inverse(&l);
            assert!((&l * &li - DMatrix::<f64>::identity(n, n)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn prior_prediction() {
        let phi_star = design(DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]));
        let v = [0.2, 0.3, 0.1];
        let st = fit_posterior(&design(DMatrix::zeros(3, 0)), &v, &[], 0.4).unwrap();
        let (m, var) = predict(&st, &phi_star).unwrap();
        assert_eq!(m, vec![0.0]);
        let prior: f64 = 0.4 + 0.2 * 0.25 + 0.3 * 1.0 + 0.1 * 4.0;
        assert!((var[0] - prior).abs() < 1e-14);
    }

    #[test]
    fn zero_targets_zero_beta() {
        let (phi, v, _, s2) = random_case(5, 20, 7);
        let st = fit_posterior(&design(phi), &v, &[0.0; 20], s2).unwrap();
        assert!(st.beta.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn variance_shrinks_with_more_data() {
        let (phi, v, y, s2) = random_case(6, 30, 8);
        let test = design(DMatrix::from_fn(6, 5, |i, j| ((i * 7 + j) as f64).sin()));
        let mut prev = vec![f64::INFINITY; 5];
        for n in [0, 5, 10, 20, 30] {
            let sub = design(phi.columns(0, n).into_owned());
            let st = fit_posterior(&sub, &v, &y[..n], s2).unwrap();
            let (_, var) = predict(&st, &test).unwrap();
            for (a, b) in var.iter().zip(&prev) {
                assert!(*a <= b + 1e-10);
                assert!(*a >= s2 - 1e-10);
            }
            prev = var;
        }
    }

    #[test]
    fn permutation_invariant() {
        let (phi, v, y, s2) = random_case(5, 25, 9);
        let a = neg_log_marginal_likelihood(&design(phi.clone()), &v, &y, s2).unwrap();
        let order: Vec<usize> = (0..25).rev().collect();
        let phi_p = phi.select_columns(&order);
        let y_p: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let b = neg_log_marginal_likelihood(&design(phi_p), &v, &y_p, s2).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
    }

    #[test]
    fn input_errors() {
        let phi = design(DMatrix::zeros(2, 3));
        assert!(neg_log_marginal_likelihood(&phi, &[1.0; 2], &[0.0; 2], 1.0).is_err());
        assert!(neg_log_marginal_likelihood(&phi, &[1.0; 3], &[0.0; 3], 1.0).is_err());
        assert!(neg_log_marginal_likelihood(&phi, &[1.0; 2], &[0.0; 3], 0.0).is_err());
        let st = fit_posterior(&phi, &[1.0; 2], &[0.0; 3], 1.0).unwrap();
        assert!(matches!(
            predict(&st, &design(DMatrix::zeros(3, 1))),
            Err(Error::InvalidDimension(_))
        ));
    }
}
