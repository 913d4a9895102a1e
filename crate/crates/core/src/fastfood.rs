//! Fastfood projections `xi = S H G Pi H B x`, one stack of blocks per kernel group.
//!
//! Each block of `d_pad` rows owns its own sign diagonal `B`, Gaussian diagonal
//! `G`, permutation `Pi` and scaling `S`. The row normalization `d_pad^{-1/2}`
//! is applied here, so a row of the implicit matrix has Euclidean norm
//! `S_jj * ||G_block||_F`, which equals the sampled frequency radius.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::hadamard::{fwht_unchecked, PadGeometry};

/// Frozen random matrices for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodStack {
    pub geometry: PadGeometry,
    /// Sign diagonal, entries in {-1, +1}.
    pub b_diag: Vec<f64>,
    pub g_diag: Vec<f64>,
    /// `perms[block][i]` is the source index written to position `i`.
    pub perms: Vec<Vec<usize>>,
    /// Frequency radii `||omega_j||` drawn from the radial sampler.
    pub radii: Vec<f64>,
    /// Scaling diagonal `S_jj = ||omega_j|| / ||G_block||_F`.
    pub s_radii: Vec<f64>,
    pub g_frob_norms: Vec<f64>,
    /// Uniform draw in [0, 1) reserved for systematic (stratified) radius sampling.
    pub jitter: f64,
    pub seed: u64,
}

/// Builds a stack from a seed. `radial_sampler` maps a vector of uniform
/// draws in (0, 1) to nonnegative radii of the same length.
pub fn build_stack<F>(seed: u64, geometry: PadGeometry, radial_sampler: F) -> Result<FastfoodStack>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let rows = geometry.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let b_diag: Vec<f64> = (0..rows)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let g_diag: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
    let perms: Vec<Vec<usize>> = (0..geometry.blocks)
        .map(|_| {
            let mut p: Vec<usize> = (0..geometry.d_pad).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let draws: Vec<f64> = (0..rows).map(|_| rng.sample(Open01)).collect();
    let jitter: f64 = rng.random();

    let radii = radial_sampler(&draws)?;
    if radii.len() != rows || radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::Domain(
            "radial sampler must return one finite nonnegative radius per draw".into(),
        ));
    }
    let g_frob_norms = block_frobenius_norms(&g_diag, geometry.d_pad);
    let s_radii = scale_from_radii(&radii, &g_frob_norms, geometry.d_pad);

    Ok(FastfoodStack {
        geometry,
        b_diag,
        g_diag,
        perms,
        radii,
        s_radii,
        g_frob_norms,
        jitter,
        seed,
    })
}

/// Stack whose radii follow the chi distribution with `d_pad` degrees of
/// freedom, i.e. the radial law of a standard Gaussian in the padded space.
pub fn build_gaussian_stack(seed: u64, geometry: PadGeometry) -> Result<FastfoodStack> {
    let d_pad = geometry.d_pad;
    build_stack(seed, geometry, |u| sample_chi_radii(u, d_pad))
}

pub fn block_frobenius_norms(g: &[f64], d_pad: usize) -> Vec<f64> {
    g.chunks(d_pad)
        .map(|block| block.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// `S_jj = r_j / ||G_block(j)||_F`.
pub fn scale_from_radii(radii: &[f64], frob: &[f64], d_pad: usize) -> Vec<f64> {
    radii.iter().enumerate().map(|(j, r)| r / frob[j / d_pad]).collect()
}

/// Applies the stack to `x` (length `d_in`); returns `blocks * d_pad` projections.
pub fn apply_stack(stack: &FastfoodStack, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != stack.geometry.d_in {
        return Err(Error::InvalidDimension(format!(
            "stack expects input of length {}, got {}",
            stack.geometry.d_in,
            x.len()
        )));
    }
    let mut out = vec![0.0; stack.geometry.rows()];
    stack.projection().forward(x, &mut out);
    Ok(out)
}

impl FastfoodStack {
    /// The stack's own diagonals as a projection.
    pub fn projection(&self) -> Projection<'_> {
        Projection {
            geometry: self.geometry,
            perms: &self.perms,
            b: &self.b_diag,
            g: &self.g_diag,
            s: &self.s_radii,
        }
    }

    /// Same permutations and geometry with caller-supplied diagonals.
    pub fn projection_with<'a>(&'a self, b: &'a [f64], g: &'a [f64], s: &'a [f64]) -> Projection<'a> {
        Projection {
            geometry: self.geometry,
            perms: &self.perms,
            b,
            g,
            s,
        }
    }
}

/// A Fastfood product with explicit diagonals. All slices have length
/// `geometry.rows()`.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'a> {
    pub geometry: PadGeometry,
    pub perms: &'a [Vec<usize>],
    pub b: &'a [f64],
    pub g: &'a [f64],
    pub s: &'a [f64],
}

/// Accumulated reverse-mode gradients of one projection.
#[derive(Debug, Clone)]
pub struct ProjectionGrads {
    pub dx: Vec<f64>,
    pub ds: Vec<f64>,
    pub dg: Vec<f64>,
    pub db: Vec<f64>,
}

impl ProjectionGrads {
    pub fn zeros(geometry: PadGeometry) -> Self {
        let rows = geometry.rows();
        Self {
            dx: vec![0.0; geometry.d_in],
            ds: vec![0.0; rows],
            dg: vec![0.0; rows],
            db: vec![0.0; rows],
        }
    }
}

impl Projection<'_> {
    fn norm(&self) -> f64 {
        1.0 / (self.geometry.d_pad as f64).sqrt()
    }

    /// Writes `d_pad^{-1/2} H G Pi H B x` (everything except `S`) into `pre`.
    pub fn forward_unscaled(&self, x: &[f64], pre: &mut [f64]) {
        let d = self.geometry.d_pad;
        let c = self.norm();
        let mut v = vec![0.0; d];
        for (blk, out) in pre.chunks_exact_mut(d).enumerate() {
            let off = blk * d;
            v.fill(0.0);
            for (j, xj) in x.iter().enumerate() {
                v[j] = self.b[off + j] * xj;
            }
            fwht_unchecked(&mut v);
            let perm = &self.perms[blk];
            for i in 0..d {
                out[i] = self.g[off + i] * v[perm[i]];
            }
            fwht_unchecked(out);
            for o in out.iter_mut() {
                *o *= c;
            }
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        self.forward_unscaled(x, out);
        for (o, s) in out.iter_mut().zip(self.s) {
            *o *= s;
        }
    }

    /// Forward-mode derivative of `forward` along the direction
    /// `(dx, db, dg, ds)`; `None` means a zero direction for that argument.
    pub fn tangent(
        &self,
        x: &[f64],
        dx: Option<&[f64]>,
        db: Option<&[f64]>,
        dg: Option<&[f64]>,
        ds: Option<&[f64]>,
        dout: &mut [f64],
    ) {
        let d = self.geometry.d_pad;
        let c = self.norm();
        let mut v = vec![0.0; d];
        let mut dv = vec![0.0; d];
        let mut w = vec![0.0; d];
        for (blk, dblk) in dout.chunks_exact_mut(d).enumerate() {
            let off = blk * d;
            v.fill(0.0);
            dv.fill(0.0);
            for j in 0..x.len() {
                v[j] = self.b[off + j] * x[j];
                if let Some(dx) = dx {
                    dv[j] += self.b[off + j] * dx[j];
                }
                if let Some(db) = db {
                    dv[j] += db[off + j] * x[j];
                }
            }
            fwht_unchecked(&mut v);
            fwht_unchecked(&mut dv);
            let perm = &self.perms[blk];
            for i in 0..d {
                w[i] = self.g[off + i] * v[perm[i]];
                dblk[i] = self.g[off + i] * dv[perm[i]];
                if let Some(dg) = dg {
                    dblk[i] += dg[off + i] * v[perm[i]];
                }
            }
            fwht_unchecked(&mut w);
            fwht_unchecked(dblk);
            for i in 0..d {
                let mut t = self.s[off + i] * c * dblk[i];
                if let Some(ds) = ds {
                    t += ds[off + i] * c * w[i];
                }
                dblk[i] = t;
            }
        }
    }

    /// Reverse-mode: given `dxi = dL/dxi`, accumulates `dL/dx`, `dL/dS`,
    /// `dL/dG` and `dL/dB` into `grads`.
    pub fn backward(&self, x: &[f64], dxi: &[f64], grads: &mut ProjectionGrads) {
        let d = self.geometry.d_pad;
        let c = self.norm();
        let mut v0 = vec![0.0; d];
        let mut v2 = vec![0.0; d];
        let mut v4 = vec![0.0; d];
        let mut back = vec![0.0; d];
        let mut back2 = vec![0.0; d];
        for blk in 0..self.geometry.blocks {
            let off = blk * d;
            let perm = &self.perms[blk];
            let rows = off..off + d;
            if dxi[rows.clone()].iter().all(|g| *g == 0.0) {
                continue;
            }
            v0.fill(0.0);
            v0[..x.len()].copy_from_slice(x);
            for i in 0..d {
                v2[i] = self.b[off + i] * v0[i];
            }
            fwht_unchecked(&mut v2);
            for i in 0..d {
                v4[i] = self.g[off + i] * v2[perm[i]];
            }
            fwht_unchecked(&mut v4);

            for i in 0..d {
                let pre = c * v4[i];
                grads.ds[off + i] += dxi[off + i] * pre;
                back[i] = c * self.s[off + i] * dxi[off + i];
            }
            fwht_unchecked(&mut back);
            back2.fill(0.0);
            for i in 0..d {
                grads.dg[off + i] += back[i] * v2[perm[i]];
                back2[perm[i]] += self.g[off + i] * back[i];
            }
            fwht_unchecked(&mut back2);
            for i in 0..d {
                grads.db[off + i] += back2[i] * v0[i];
            }
            for j in 0..x.len() {
                grads.dx[j] += self.b[off + j] * back2[j];
            }
        }
    }
}

/// Maps uniform draws in (0, 1) to radii following the chi distribution with
/// `d_pad` degrees of freedom by inverting its CDF.
pub fn sample_chi_radii(draws: &[f64], d_pad: usize) -> Result<Vec<f64>> {
    if d_pad == 0 {
        return Err(Error::InvalidDimension("chi distribution needs d_pad >= 1".into()));
    }
    let shape = d_pad as f64 / 2.0;
    draws
        .iter()
        .map(|&u| {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::Domain(format!("uniform draw {u} outside (0, 1)")));
            }
            Ok((2.0 * inverse_gamma_lr(shape, u)).sqrt())
        })
        .collect()
}

/// Inverse of the regularized lower incomplete gamma function `P(a, x)` in `x`.
fn inverse_gamma_lr(a: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, a.max(1.0));
    while gamma_lr(a, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let log_norm = ln_gamma(a);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gamma_lr(a, x) - p;
        if f.abs() < 1e-16 {
            return x;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ((a - 1.0) * x.ln() - x - log_norm).exp();
        let newton = x - f / dens;
        x = if dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) <= 1e-15 * hi {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hadamard::pad_geometry;

    fn identity_stack() -> FastfoodStack {
        let geometry = pad_geometry(2, 2).unwrap();
        FastfoodStack {
            geometry,
            b_diag: vec![1.0; 2],
            g_diag: vec![1.0; 2],
            perms: vec![vec![0, 1]],
            radii: vec![1.0; 2],
            s_radii: vec![1.0; 2],
            g_frob_norms: vec![2f64.sqrt()],
            jitter: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn identity_stack_projection() {
        let xi = apply_stack(&identity_stack(), &[1.0, 0.0]).unwrap();
        assert!((xi[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(xi[1].abs() < 1e-15);
    }

    #[test]
    fn zero_input_zero_projection() {
        let st = build_gaussian_stack(3, pad_geometry(5, 20).unwrap()).unwrap();
        assert!(apply_stack(&st, &[0.0; 5]).unwrap().iter().all(|v| *v == 0.0));
        assert!(apply_stack(&st, &[0.0; 4]).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let g = pad_geometry(6, 24).unwrap();
        let a = build_gaussian_stack(11, g).unwrap();
        let b = build_gaussian_stack(11, g).unwrap();
        assert_eq!(a, b);
        let c = build_gaussian_stack(12, g).unwrap();
        assert_ne!(a.g_diag, c.g_diag);
    }

    #[test]
    fn stack_invariants() {
        let g = pad_geometry(7, 40).unwrap();
        let st = build_gaussian_stack(5, g).unwrap();
        assert!(st.b_diag.iter().all(|b| *b == 1.0 || *b == -1.0));
        for p in &st.perms {
            let mut seen = vec![false; g.d_pad];
            for &i in p {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(st.g_frob_norms.iter().all(|f| *f > 0.0));
        assert!(st.s_radii.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn constant_sampler_gives_inverse_frobenius() {
        let g = pad_geometry(4, 12).unwrap();
        let st = build_stack(9, g, |u| Ok(vec![1.0; u.len()])).unwrap();
        for (j, s) in st.s_radii.iter().enumerate() {
            assert_eq!(*s, 1.0 / st.g_frob_norms[j / g.d_pad]);
        }
    }

    #[test]
    fn chi_radii_sorted_and_domain() {
        let u = [0.1, 0.2, 0.5, 0.9, 0.999];
        let r = sample_chi_radii(&u, 8).unwrap();
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_chi_radii(&[0.0], 4).is_err());
        assert!(sample_chi_radii(&[1.0], 4).is_err());
    }

    #[test]
    fn chi_one_dof_median() {
        // Median of |N(0,1)| is the 0.75 quantile of N(0,1).
        use statrs::distribution::{ContinuousCDF, Normal};
        let expected = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.75);
        let r = sample_chi_radii(&[0.5], 1).unwrap()[0];
        assert!((r - expected).abs() < 1e-10, "{r} vs {expected}");
        assert!((r - 0.6745).abs() < 1e-4);
    }

    #[test]
    fn chi_four_dof_mean() {
        // Mean of chi_4 is sqrt(2) Gamma(2.5) / Gamma(2).
        let expected = 2f64.sqrt() * (ln_gamma(2.5) - ln_gamma(2.0)).exp();
        assert!((expected - 1.8800).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let u: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
        let r = sample_chi_radii(&u, 4).unwrap();
        let mean = r.iter().sum::<f64>() / n as f64;
        assert!((mean / expected - 1.0).abs() < 0.01);

        // independent route: norms of 4-d Gaussians
        let mc = (0..200_000)
            .map(|_| {
                (0..4)
                    .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 200_000.0;
        assert!((mc / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn linear_in_input() {
        let st = build_gaussian_stack(21, pad_geometry(5, 16).unwrap()).unwrap();
        let u = [0.3, -1.0, 2.0, 0.5, 0.1];
        let v = [1.0, 0.2, -0.4, 0.0, 3.0];
        let comb: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (pu, pv, pc) = (
            apply_stack(&st, &u).unwrap(),
            apply_stack(&st, &v).unwrap(),
            apply_stack(&st, &comb).unwrap(),
        );
        for i in 0..pc.len() {
            assert!((pc[i] - (2.0 * pu[i] - 0.5 * pv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn row_norms_equal_radii() {
        // Probe the implicit matrix column by column.
        let g = pad_geometry(8, 16).unwrap();
        let st = build_gaussian_stack(4, g).unwrap();
        let mut rows = vec![vec![0.0; 8]; g.rows()];
        for j in 0..8 {
            let mut e = [0.0; 8];
            e[j] = 1.0;
            let col = apply_stack(&st, &e).unwrap();
            for (i, c) in col.iter().enumerate() {
                rows[i][j] = *c;
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - st.radii[i]).abs() < 1e-10 * (1.0 + norm));
        }
    }

    #[test]
    fn backward_matches_tangent() {
        // <dxi, J v> == <J^T dxi, v> for random directions.
        let g = pad_geometry(5, 16).unwrap();
        let st = build_gaussian_stack(8, g).unwrap();
        let p = st.projection();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let x = rand_vec(5);
        let dxi = rand_vec(g.rows());
        let (dx, db, dg, ds) = (rand_vec(5), rand_vec(g.rows()), rand_vec(g.rows()), rand_vec(g.rows()));
        let mut t = vec![0.0; g.rows()];
        p.tangent(&x, Some(&dx), Some(&db), Some(&dg), Some(&ds), &mut t);
        let lhs: f64 = dxi.iter().zip(&t).map(|(a, b)| a * b).sum();
        let mut grads = ProjectionGrads::zeros(g);
        p.backward(&x, &dxi, &mut grads);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        // padded coordinates of B never touch the input
        let db_eff: Vec<f64> = db
            .iter()
            .enumerate()
            .map(|(i, v)| if i % g.d_pad < 5 { *v } else { 0.0 })
            .collect();
        let rhs = dot(&grads.dx, &dx) + dot(&grads.db, &db_eff) + dot(&grads.dg, &dg) + dot(&grads.ds, &ds);
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}
