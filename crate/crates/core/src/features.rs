//! Design matrices for every kernel family, the diagonal prior weights `V`,
//! and exact derivatives of the features with respect to packed hyperparameters.
//!
//! Rows are grouped: group `q` occupies rows `q * rows_per_group ..`. Within a
//! group the cosine/sine families lay out `[cos xi; sin xi]` and the spectral
//! mixture lays out `[sin(xi+zeta); cos(xi+zeta); sin(xi-zeta); cos(xi-zeta)]`
//! with `zeta = <mu_q, x>`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fastfood::{block_frobenius_norms, scale_from_radii, FastfoodStack, Projection, ProjectionGrads};
use crate::kernel::{Family, KernelParams, KernelSpec, ParamRole};

/// Points per work item when reducing gradients. Fixed so results do not
/// depend on the thread count.
const CHUNK: usize = 32;

/// Feature matrix `Phi`, `D_feat x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub data: DMatrix<f64>,
    pub group_offsets: Vec<usize>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// Everything needed to evaluate one group's features for a single point.
struct GroupPlan<'a> {
    stack: &'a FastfoodStack,
    m: usize,
    input_scale: Vec<f64>,
    b: &'a [f64],
    g: &'a [f64],
    radii: Vec<f64>,
    frob: Vec<f64>,
    s: Vec<f64>,
    shift: Option<&'a [f64]>,
    hat_mu: f64,
}

impl<'a> GroupPlan<'a> {
    fn projection(&self) -> Projection<'_> {
        self.stack.projection_with(self.b, self.g, &self.s)
    }

    fn scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.input_scale).map(|(a, s)| a * s).collect()
    }

    fn offset(&self, x: &[f64]) -> f64 {
        self.shift
            .map(|mu| mu.iter().zip(x).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0)
    }
}

fn with_stack_tail(learned: impl Iterator<Item = f64>, stack: &FastfoodStack, m: usize) -> Vec<f64> {
    let mut r: Vec<f64> = learned.collect();
    r.extend_from_slice(&stack.radii[m..]);
    r
}

fn plans<'a>(spec: &'a KernelSpec, stacks: &'a [FastfoodStack]) -> Result<Vec<GroupPlan<'a>>> {
    spec.validate()?;
    let shape = spec.shape;
    let geometry = shape.geometry();
    if stacks.len() != shape.groups {
        return Err(Error::InvalidDimension(format!(
            "kernel has {} groups but {} stacks were supplied",
            shape.groups,
            stacks.len()
        )));
    }
    if let Some(st) = stacks.iter().find(|s| s.geometry != geometry) {
        return Err(Error::InvalidDimension(format!(
            "stack geometry {:?} does not match kernel geometry {:?}",
            st.geometry, geometry
        )));
    }
    let m = shape.freqs_per_group;
    let d_pad = geometry.d_pad;
    let mut out = Vec::with_capacity(shape.groups);
    for (q, stack) in stacks.iter().enumerate() {
        let inv = |ls: &[crate::kernel::ScaleParam]| ls.iter().map(|l| 1.0 / l.get()).collect::<Vec<_>>();
        #[allow(clippy::type_complexity)]
        let (input_scale, b, g, radii, frob, shift, hat_mu): (
            Vec<f64>,
            &[f64],
            &[f64],
            Vec<f64>,
            Vec<f64>,
            _,
            f64,
        ) = match &spec.params {
            KernelParams::Frbf { lengthscale, .. } => (
                vec![1.0 / lengthscale.get(); shape.input_dim],
                &stack.b_diag,
                &stack.g_diag,
                stack.radii.clone(),
                stack.g_frob_norms.clone(),
                None,
                0.0,
            ),
            KernelParams::Fard { lengthscales, .. } => (
                inv(lengthscales),
                &stack.b_diag,
                &stack.g_diag,
                stack.radii.clone(),
                stack.g_frob_norms.clone(),
                None,
                0.0,
            ),
            KernelParams::Fsard {
                lengthscales, radii, ..
            } => (
                inv(lengthscales),
                &stack.b_diag,
                &stack.g_diag,
                with_stack_tail(radii[q].iter().map(|r| r.get()), stack, m),
                stack.g_frob_norms.clone(),
                None,
                0.0,
            ),
            KernelParams::Fsgbard {
                lengthscales,
                radii,
                g,
                b,
                ..
            } => (
                inv(lengthscales),
                &b[q],
                &g[q],
                with_stack_tail(radii[q].iter().map(|r| r.get()), stack, m),
                block_frobenius_norms(&g[q], d_pad),
                None,
                0.0,
            ),
            KernelParams::Gm { groups } => (
                groups[q].spread.iter().map(|s| s.get()).collect(),
                &stack.b_diag,
                &stack.g_diag,
                stack.radii.clone(),
                stack.g_frob_norms.clone(),
                Some(groups[q].mu.as_slice()),
                0.0,
            ),
            KernelParams::Pwl { groups } => {
                let hat = groups[q].hat()?;
                let jitter = stack.jitter / m as f64;
                let sampled = hat.radii_with_derivatives(m, jitter)?;
                (
                    inv(&groups[q].lengthscales),
                    &stack.b_diag,
                    &stack.g_diag,
                    with_stack_tail(sampled.radii.into_iter(), stack, m),
                    stack.g_frob_norms.clone(),
                    None,
                    hat.mu,
                )
            }
        };
        let s = scale_from_radii(&radii, &frob, d_pad);
        out.push(GroupPlan {
            stack,
            m,
            input_scale,
            b,
            g,
            radii,
            frob,
            s,
            shift,
            hat_mu,
        });
    }
    Ok(out)
}

fn check_input(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != spec.shape.input_dim {
        return Err(Error::InvalidDimension(format!(
            "kernel expects {} input columns, data has {}",
            spec.shape.input_dim,
            x.ncols()
        )));
    }
    Ok(())
}

fn row_of(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn write_column(plans: &[GroupPlan<'_>], symmetrized: bool, x: &[f64], out: &mut [f64]) {
    let per_group = out.len() / plans.len();
    let mut xi = vec![0.0; plans[0].stack.geometry.rows()];
    for (plan, block) in plans.iter().zip(out.chunks_exact_mut(per_group)) {
        plan.projection().forward(&plan.scaled(x), &mut xi);
        let m = plan.m;
        if symmetrized {
            let zeta = plan.offset(x);
            for j in 0..m {
                let (sp, cp) = (xi[j] + zeta).sin_cos();
                let (sm, cm) = (xi[j] - zeta).sin_cos();
                block[j] = sp;
                block[m + j] = cp;
                block[2 * m + j] = sm;
                block[3 * m + j] = cm;
            }
        } else {
            for j in 0..m {
                let (s, c) = xi[j].sin_cos();
                block[j] = c;
                block[m + j] = s;
            }
        }
    }
}

/// Evaluates `Phi` at the rows of `x` (`n x d`).
pub fn compute_features(spec: &KernelSpec, stacks: &[FastfoodStack], x: &DMatrix<f64>) -> Result<DesignMatrix> {
    check_input(spec, x)?;
    let plans = plans(spec, stacks)?;
    let rows = spec.shape.feature_count();
    let symmetrized = spec.family() == Family::Gm;
    let mut data = vec![0.0; rows * x.nrows()];
    data.par_chunks_mut(rows).enumerate().for_each(|(i, col)| {
        write_column(&plans, symmetrized, &row_of(x, i), col);
    });
    Ok(DesignMatrix {
        data: DMatrix::from_vec(rows, x.nrows(), data),
        group_offsets: (0..spec.shape.groups)
            .map(|q| q * spec.shape.rows_per_group())
            .collect(),
    })
}

/// Diagonal of the prior weight matrix `V`, one entry per feature row.
pub fn feature_weight_matrix(spec: &KernelSpec) -> Vec<f64> {
    let shape = spec.shape;
    let m = shape.freqs_per_group as f64;
    let per_group = shape.rows_per_group();
    let group_weight: Vec<f64> = match &spec.params {
        KernelParams::Frbf { amplitude, .. }
        | KernelParams::Fard { amplitude, .. }
        | KernelParams::Fsard { amplitude, .. }
        | KernelParams::Fsgbard { amplitude, .. } => {
            let a = amplitude.get();
            vec![a * a / (shape.groups as f64 * m); shape.groups]
        }
        KernelParams::Gm { groups } => groups
            .iter()
            .map(|g| g.weight.get() * g.weight.get() / (2.0 * m))
            .collect(),
        KernelParams::Pwl { groups } => groups.iter().map(|g| g.weight.get() * g.weight.get() / m).collect(),
    };
    group_weight
        .into_iter()
        .flat_map(|w| std::iter::repeat_n(w, per_group))
        .collect()
}

/// Packed-coordinate positions of the feature-affecting parameters.
struct Positions {
    family: Family,
    d: usize,
    m: usize,
}

impl Positions {
    fn lengthscale(&self, dim: usize) -> usize {
        match self.family {
            Family::Frbf => 1,
            _ => 1 + dim,
        }
    }
    fn fs_base(&self, q: usize) -> usize {
        let per = if self.family == Family::Fsgbard {
            3 * self.m
        } else {
            self.m
        };
        2 + self.d + q * per
    }
    fn radius(&self, q: usize, k: usize) -> usize {
        self.fs_base(q) + k
    }
    fn g(&self, q: usize, k: usize) -> usize {
        self.fs_base(q) + self.m + k
    }
    fn b(&self, q: usize, k: usize) -> usize {
        self.fs_base(q) + 2 * self.m + k
    }
    fn gm_mean(&self, q: usize, j: usize) -> usize {
        1 + q * (2 * self.d + 1) + 1 + j
    }
    fn gm_spread(&self, q: usize, j: usize) -> usize {
        1 + q * (2 * self.d + 1) + 1 + self.d + j
    }
    fn pwl_base(&self, q: usize) -> usize {
        1 + q * (self.d + 3)
    }
}

/// Reverse-mode gradient of a scalar objective through the feature map:
/// given `d_phi = dL/dPhi`, returns `dL/dtheta` in packed coordinates.
/// Entries for the noise and the signal weights are zero.
pub fn feature_backprop(
    spec: &KernelSpec,
    stacks: &[FastfoodStack],
    x: &DMatrix<f64>,
    d_phi: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    check_input(spec, x)?;
    let plans = plans(spec, stacks)?;
    let shape = spec.shape;
    if d_phi.nrows() != shape.feature_count() || d_phi.ncols() != x.nrows() {
        return Err(Error::InvalidDimension(format!(
            "feature gradient is {}x{}, expected {}x{}",
            d_phi.nrows(),
            d_phi.ncols(),
            shape.feature_count(),
            x.nrows()
        )));
    }
    let family = shape.family;
    let pos = Positions {
        family,
        d: shape.input_dim,
        m: shape.freqs_per_group,
    };
    let n_params = shape.param_count();
    let geometry = shape.geometry();
    let per_group = shape.rows_per_group();
    let m = shape.freqs_per_group;

    let chunk_ids: Vec<usize> = (0..x.nrows().div_ceil(CHUNK)).collect();
    let partials: Vec<(Vec<f64>, Vec<ProjectionGrads>)> = chunk_ids
        .par_iter()
        .map(|&c| {
            let mut packed = vec![0.0; n_params];
            let mut grads: Vec<ProjectionGrads> = plans.iter().map(|_| ProjectionGrads::zeros(geometry)).collect();
            let mut xi = vec![0.0; geometry.rows()];
            let mut dxi = vec![0.0; geometry.rows()];
            for i in c * CHUNK..((c + 1) * CHUNK).min(x.nrows()) {
                let xrow = row_of(x, i);
                let col = d_phi.column(i);
                for (q, plan) in plans.iter().enumerate() {
                    let xs = plan.scaled(&xrow);
                    let proj = plan.projection();
                    proj.forward(&xs, &mut xi);
                    let bar = &col.as_slice()[q * per_group..(q + 1) * per_group];
                    dxi.fill(0.0);
                    let mut dzeta = 0.0;
                    if family == Family::Gm {
                        let zeta = plan.offset(&xrow);
                        for j in 0..m {
                            let (sp, cp) = (xi[j] + zeta).sin_cos();
                            let (sm, cm) = (xi[j] - zeta).sin_cos();
                            let plus = cp * bar[j] - sp * bar[m + j];
                            let minus = cm * bar[2 * m + j] - sm * bar[3 * m + j];
                            dxi[j] = plus + minus;
                            dzeta += plus - minus;
                        }
                        for (jdim, xj) in xrow.iter().enumerate() {
                            packed[pos.gm_mean(q, jdim)] += dzeta * xj;
                        }
                    } else {
                        for j in 0..m {
                            let (s, cc) = xi[j].sin_cos();
                            dxi[j] = -s * bar[j] + cc * bar[m + j];
                        }
                    }
                    let gq = &mut grads[q];
                    gq.dx.fill(0.0);
                    proj.backward(&xs, &dxi, gq);
                    for (jdim, (dx, xt)) in gq.dx.iter().zip(&xs).enumerate() {
                        match family {
                            Family::Gm => packed[pos.gm_spread(q, jdim)] += dx * xt,
                            Family::Pwl => packed[pos.pwl_base(q) + 3 + jdim] -= dx * xt,
                            _ => packed[pos.lengthscale(jdim)] -= dx * xt,
                        }
                    }
                }
            }
            (packed, grads)
        })
        .collect();

    let mut packed = vec![0.0; n_params];
    let mut totals: Vec<ProjectionGrads> = plans.iter().map(|_| ProjectionGrads::zeros(geometry)).collect();
    for (p, g) in partials {
        for (a, b) in packed.iter_mut().zip(p) {
            *a += b;
        }
        for (t, gq) in totals.iter_mut().zip(g) {
            for (a, b) in t.ds.iter_mut().zip(gq.ds) {
                *a += b;
            }
            for (a, b) in t.dg.iter_mut().zip(gq.dg) {
                *a += b;
            }
            for (a, b) in t.db.iter_mut().zip(gq.db) {
                *a += b;
            }
        }
    }

    let d_pad = geometry.d_pad;
    for (q, (plan, t)) in plans.iter().zip(&totals).enumerate() {
        match family {
            Family::Fsard | Family::Fsgbard => {
                for k in 0..m {
                    packed[pos.radius(q, k)] += t.ds[k] * plan.s[k];
                }
                if family == Family::Fsgbard {
                    for blk in 0..geometry.blocks {
                        let rows = blk * d_pad..(blk + 1) * d_pad;
                        let sum_ds_s: f64 = rows.clone().map(|j| t.ds[j] * plan.s[j]).sum();
                        let f2 = plan.frob[blk] * plan.frob[blk];
                        for k in rows {
                            packed[pos.g(q, k)] += t.dg[k] - plan.g[k] / f2 * sum_ds_s;
                            packed[pos.b(q, k)] += t.db[k];
                        }
                    }
                }
            }
            Family::Pwl => {
                let base = pos.pwl_base(q);
                let width = plan.radii[..m]
                    .iter()
                    .enumerate()
                    .map(|(k, r)| t.ds[k] / plan.frob[k / d_pad] * (r - plan.hat_mu))
                    .sum::<f64>();
                let offset = (0..m).map(|k| t.ds[k] / plan.frob[k / d_pad]).sum::<f64>() * plan.hat_mu;
                packed[base + 1] += offset;
                packed[base + 2] += width;
            }
            _ => {}
        }
    }
    Ok(packed)
}

/// Exact derivative of every entry of `Phi` with respect to one packed
/// coordinate, computed in forward mode.
pub fn feature_jacobian(
    spec: &KernelSpec,
    stacks: &[FastfoodStack],
    x: &DMatrix<f64>,
    param_index: usize,
) -> Result<DMatrix<f64>> {
    check_input(spec, x)?;
    let role = spec.shape.role(param_index)?;
    let plans = plans(spec, stacks)?;
    let shape = spec.shape;
    let rows = shape.feature_count();
    let per_group = shape.rows_per_group();
    let m = shape.freqs_per_group;
    let geometry = shape.geometry();
    let d_pad = geometry.d_pad;
    let symmetrized = shape.family == Family::Gm;
    let mut data = vec![0.0; rows * x.nrows()];

    data.par_chunks_mut(rows).enumerate().for_each(|(i, col)| {
        let xrow = row_of(x, i);
        let mut xi = vec![0.0; geometry.rows()];
        let mut dxi = vec![0.0; geometry.rows()];
        for (q, (plan, block)) in plans.iter().zip(col.chunks_exact_mut(per_group)).enumerate() {
            let xs = plan.scaled(&xrow);
            let mut dx: Option<Vec<f64>> = None;
            let mut db: Option<Vec<f64>> = None;
            let mut dg: Option<Vec<f64>> = None;
            let mut ds: Option<Vec<f64>> = None;
            let mut dzeta = 0.0;
            let unit = |k: usize, v: f64, len: usize| {
                let mut e = vec![0.0; len];
                e[k] = v;
                e
            };
            let mine = role.group().is_none_or(|g| g == q);
            match role {
                ParamRole::Lengthscale { dim: None } => dx = Some(xs.iter().map(|v| -v).collect()),
                ParamRole::Lengthscale { dim: Some(j) } => dx = Some(unit(j, -xs[j], xs.len())),
                ParamRole::Radius { index, .. } if mine => ds = Some(unit(index, plan.s[index], geometry.rows())),
                ParamRole::GDiag { index, .. } if mine => {
                    dg = Some(unit(index, 1.0, geometry.rows()));
                    let blk = index / d_pad;
                    let f2 = plan.frob[blk] * plan.frob[blk];
                    let mut v = vec![0.0; geometry.rows()];
                    for j in blk * d_pad..(blk + 1) * d_pad {
                        v[j] = -plan.s[j] * plan.g[index] / f2;
                    }
                    ds = Some(v);
                }
                ParamRole::BDiag { index, .. } if mine => db = Some(unit(index, 1.0, geometry.rows())),
                ParamRole::GmMean { dim, .. } if mine => dzeta = xrow[dim],
                ParamRole::GmSpread { dim, .. } if mine => dx = Some(unit(dim, xs[dim], xs.len())),
                ParamRole::GroupLengthscale { dim, .. } if mine => dx = Some(unit(dim, -xs[dim], xs.len())),
                ParamRole::HatOffset { .. } if mine => {
                    ds = Some(
                        (0..geometry.rows())
                            .map(|j| plan.hat_mu / plan.frob[j / d_pad])
                            .collect(),
                    )
                }
                ParamRole::HatWidth { .. } if mine => {
                    ds = Some(
                        (0..geometry.rows())
                            .map(|j| (plan.radii[j] - plan.hat_mu) / plan.frob[j / d_pad])
                            .collect(),
                    )
                }
                _ => {}
            }
            if dx.is_none() && db.is_none() && dg.is_none() && ds.is_none() && dzeta == 0.0 {
                continue;
            }
            let proj = plan.projection();
            proj.forward(&xs, &mut xi);
            proj.tangent(
                &xs,
                dx.as_deref(),
                db.as_deref(),
                dg.as_deref(),
                ds.as_deref(),
                &mut dxi,
            );
            if symmetrized {
                let zeta = plan.offset(&xrow);
                for j in 0..m {
                    let (sp, cp) = (xi[j] + zeta).sin_cos();
                    let (sm, cm) = (xi[j] - zeta).sin_cos();
                    let (tp, tm) = (dxi[j] + dzeta, dxi[j] - dzeta);
                    block[j] = cp * tp;
                    block[m + j] = -sp * tp;
                    block[2 * m + j] = cm * tm;
                    block[3 * m + j] = -sm * tm;
                }
            } else {
                for j in 0..m {
                    let (s, c) = xi[j].sin_cos();
                    block[j] = -s * dxi[j];
                    block[m + j] = c * dxi[j];
                }
            }
        }
    });
    Ok(DMatrix::from_vec(rows, x.nrows(), data))
}
