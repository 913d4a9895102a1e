//! Kernel families, their learnable parameters, and the flat hyperparameter
//! vector the optimizer works on.
//!
//! Packing order is fixed: noise variance first, then shared parameters, then
//! per-group blocks. Scale-type parameters live in log space; mixture means and
//! the relaxed `G`/`B` diagonals live in raw space.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hadamard::PadGeometry;
use crate::spectra::{GmComponent, HatSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Fastfood RBF: one shared lengthscale.
    Frbf,
    /// Fastfood RBF with per-dimension lengthscales.
    Fard,
    /// FARD plus a learned scaling diagonal `S`.
    Fsard,
    /// FSARD plus learned `G` and `B` diagonals.
    Fsgbard,
    /// Gaussian spectral mixture.
    Gm,
    /// Mixture of piecewise-linear radial (hat) spectra with ARD.
    Pwl,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Frbf,
        Family::Fard,
        Family::Fsard,
        Family::Fsgbard,
        Family::Gm,
        Family::Pwl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Frbf => "frbf",
            Family::Fard => "fard",
            Family::Fsard => "fsard",
            Family::Fsgbard => "fsgbard",
            Family::Gm => "gm",
            Family::Pwl => "pwl",
        }
    }

    /// Feature rows produced per sampled frequency.
    pub fn rows_per_frequency(self) -> usize {
        match self {
            Family::Gm => 4,
            _ => 2,
        }
    }

    /// Families whose groups share one amplitude and one set of lengthscales.
    pub fn shares_amplitude(self) -> bool {
        matches!(self, Family::Frbf | Family::Fard | Family::Fsard | Family::Fsgbard)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain(format!("unknown kernel family '{s}'")))
    }
}

/// Structural description of a kernel: everything except parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub family: Family,
    pub input_dim: usize,
    /// Number of groups `Q`.
    pub groups: usize,
    /// Frequencies per group `m'`.
    pub freqs_per_group: usize,
}

impl KernelShape {
    pub fn new(family: Family, input_dim: usize, groups: usize, freqs_per_group: usize) -> Result<Self> {
        if input_dim == 0 || groups == 0 || freqs_per_group == 0 {
            return Err(Error::InvalidDimension(format!(
                "kernel needs d, Q, m >= 1 (got d={input_dim}, Q={groups}, m={freqs_per_group})"
            )));
        }
        let shape = Self {
            family,
            input_dim,
            groups,
            freqs_per_group,
        };
        if family == Family::Fsgbard && !freqs_per_group.is_multiple_of(shape.geometry().d_pad) {
            return Err(Error::InvalidDimension(format!(
                "fsgbard learns one G and B entry per frequency, so m={freqs_per_group} must be a multiple of the padded dimension {}",
                shape.geometry().d_pad
            )));
        }
        Ok(shape)
    }

    pub fn geometry(&self) -> PadGeometry {
        PadGeometry::new(self.input_dim, self.freqs_per_group).expect("shape validated at construction")
    }

    pub fn rows_per_group(&self) -> usize {
        self.family.rows_per_frequency() * self.freqs_per_group
    }

    /// Total design-matrix rows `D_feat`.
    pub fn feature_count(&self) -> usize {
        self.groups * self.rows_per_group()
    }

    /// Number of packed hyperparameters, noise included.
    pub fn param_count(&self) -> usize {
        let (d, q, m) = (self.input_dim, self.groups, self.freqs_per_group);
        match self.family {
            Family::Frbf => 3,
            Family::Fard => d + 2,
            Family::Fsard => q * m + d + 2,
            Family::Fsgbard => 3 * q * m + d + 2,
            Family::Gm => q * (2 * d + 1) + 1,
            Family::Pwl => q * (d + 3) + 1,
        }
    }

    /// Meaning of every packed coordinate, in packing order.
    pub fn roles(&self) -> Vec<ParamRole> {
        let (d, q, m) = (self.input_dim, self.groups, self.freqs_per_group);
        let mut out = vec![ParamRole::NoiseVariance];
        match self.family {
            Family::Frbf => {
                out.push(ParamRole::Lengthscale { dim: None });
                out.push(ParamRole::Amplitude);
            }
            Family::Fard | Family::Fsard | Family::Fsgbard => {
                out.extend((0..d).map(|j| ParamRole::Lengthscale { dim: Some(j) }));
                out.push(ParamRole::Amplitude);
                for group in 0..q {
                    if self.family != Family::Fard {
                        out.extend((0..m).map(|index| ParamRole::Radius { group, index }));
                    }
                    if self.family == Family::Fsgbard {
                        out.extend((0..m).map(|index| ParamRole::GDiag { group, index }));
                        out.extend((0..m).map(|index| ParamRole::BDiag { group, index }));
                    }
                }
            }
            Family::Gm => {
                for group in 0..q {
                    out.push(ParamRole::GroupWeight { group });
                    out.extend((0..d).map(|dim| ParamRole::GmMean { group, dim }));
                    out.extend((0..d).map(|dim| ParamRole::GmSpread { group, dim }));
                }
            }
            Family::Pwl => {
                for group in 0..q {
                    out.push(ParamRole::GroupWeight { group });
                    out.push(ParamRole::HatOffset { group });
                    out.push(ParamRole::HatWidth { group });
                    out.extend((0..d).map(|dim| ParamRole::GroupLengthscale { group, dim }));
                }
            }
        }
        debug_assert_eq!(out.len(), self.param_count());
        out
    }

    pub fn role(&self, index: usize) -> Result<ParamRole> {
        self.roles().get(index).copied().ok_or_else(|| {
            Error::Domain(format!(
                "parameter index {index} out of range for {} parameters",
                self.param_count()
            ))
        })
    }
}

/// What a packed coordinate controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    NoiseVariance,
    /// Shared signal amplitude of the Fastfood families.
    Amplitude,
    /// Shared lengthscale; `None` for the single isotropic FRBF lengthscale.
    Lengthscale {
        dim: Option<usize>,
    },
    Radius {
        group: usize,
        index: usize,
    },
    GDiag {
        group: usize,
        index: usize,
    },
    BDiag {
        group: usize,
        index: usize,
    },
    /// `v_q` of a GM or PWL group.
    GroupWeight {
        group: usize,
    },
    GmMean {
        group: usize,
        dim: usize,
    },
    GmSpread {
        group: usize,
        dim: usize,
    },
    HatOffset {
        group: usize,
    },
    HatWidth {
        group: usize,
    },
    GroupLengthscale {
        group: usize,
        dim: usize,
    },
}

impl ParamRole {
    pub fn is_log_scale(self) -> bool {
        !matches!(
            self,
            ParamRole::GmMean { .. } | ParamRole::GDiag { .. } | ParamRole::BDiag { .. }
        )
    }

    pub fn group(self) -> Option<usize> {
        match self {
            ParamRole::Radius { group, .. }
            | ParamRole::GDiag { group, .. }
            | ParamRole::BDiag { group, .. }
            | ParamRole::GroupWeight { group }
            | ParamRole::GmMean { group, .. }
            | ParamRole::GmSpread { group, .. }
            | ParamRole::HatOffset { group }
            | ParamRole::HatWidth { group }
            | ParamRole::GroupLengthscale { group, .. } => Some(group),
            _ => None,
        }
    }
}

/// Nonnegative parameter stored alongside its logarithm, so that values
/// entering through either side round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParam {
    value: f64,
    log: f64,
}

impl ScaleParam {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Domain(format!(
                "scale parameter must be finite and >= 0, got {value}"
            )));
        }
        Ok(Self { value, log: value.ln() })
    }

    pub fn from_log(log: f64) -> Self {
        Self { value: log.exp(), log }
    }

    pub fn get(self) -> f64 {
        self.value
    }

    pub fn log(self) -> f64 {
        self.log
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmGroup {
    pub mu: Vec<f64>,
    pub spread: Vec<ScaleParam>,
    pub weight: ScaleParam,
}

impl GmGroup {
    pub fn component(&self) -> GmComponent {
        GmComponent {
            mu: self.mu.clone(),
            sigma_diag: self.spread.iter().map(|s| s.get()).collect(),
            weight: self.weight.get(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlGroup {
    pub offset: ScaleParam,
    pub width: ScaleParam,
    pub lengthscales: Vec<ScaleParam>,
    pub weight: ScaleParam,
}

impl PwlGroup {
    pub fn hat(&self) -> Result<HatSpectrum> {
        HatSpectrum::new(self.offset.get(), self.width.get())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelParams {
    Frbf {
        lengthscale: ScaleParam,
        amplitude: ScaleParam,
    },
    Fard {
        lengthscales: Vec<ScaleParam>,
        amplitude: ScaleParam,
    },
    Fsard {
        lengthscales: Vec<ScaleParam>,
        amplitude: ScaleParam,
        /// Frequency radii, `Q x m'`.
        radii: Vec<Vec<ScaleParam>>,
    },
    Fsgbard {
        lengthscales: Vec<ScaleParam>,
        amplitude: ScaleParam,
        radii: Vec<Vec<ScaleParam>>,
        g: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
    },
    Gm {
        groups: Vec<GmGroup>,
    },
    Pwl {
        groups: Vec<PwlGroup>,
    },
}

/// A kernel with concrete parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub shape: KernelShape,
    pub params: KernelParams,
}

/// Flat hyperparameter vector in optimizer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector(pub Vec<f64>);

impl HyperVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl KernelSpec {
    /// A spec of the given shape with every scale set to 1 and every raw
    /// parameter set to 0.
    pub fn unit(shape: KernelShape) -> Self {
        let one = ScaleParam::from_log(0.0);
        let (d, q, m) = (shape.input_dim, shape.groups, shape.freqs_per_group);
        let params = match shape.family {
            Family::Frbf => KernelParams::Frbf {
                lengthscale: one,
                amplitude: one,
            },
            Family::Fard => KernelParams::Fard {
                lengthscales: vec![one; d],
                amplitude: one,
            },
            Family::Fsard => KernelParams::Fsard {
                lengthscales: vec![one; d],
                amplitude: one,
                radii: vec![vec![one; m]; q],
            },
            Family::Fsgbard => KernelParams::Fsgbard {
                lengthscales: vec![one; d],
                amplitude: one,
                radii: vec![vec![one; m]; q],
                g: vec![vec![0.0; m]; q],
                b: vec![vec![0.0; m]; q],
            },
            Family::Gm => KernelParams::Gm {
                groups: vec![
                    GmGroup {
                        mu: vec![0.0; d],
                        spread: vec![one; d],
                        weight: one,
                    };
                    q
                ],
            },
            Family::Pwl => KernelParams::Pwl {
                groups: vec![
                    PwlGroup {
                        offset: one,
                        width: one,
                        lengthscales: vec![one; d],
                        weight: one,
                    };
                    q
                ],
            },
        };
        Self { shape, params }
    }

    pub fn family(&self) -> Family {
        self.shape.family
    }

    /// Checks that parameter array sizes agree with the shape.
    pub fn validate(&self) -> Result<()> {
        let (d, q, m) = (self.shape.input_dim, self.shape.groups, self.shape.freqs_per_group);
        let bad = |what: &str| Err(Error::InvalidDimension(format!("{what} does not match kernel shape")));
        let grid_ok = |v: &Vec<Vec<ScaleParam>>| v.len() == q && v.iter().all(|r| r.len() == m);
        let raw_grid_ok = |v: &Vec<Vec<f64>>| v.len() == q && v.iter().all(|r| r.len() == m);
        match (&self.params, self.shape.family) {
            (KernelParams::Frbf { .. }, Family::Frbf) => Ok(()),
            (KernelParams::Fard { lengthscales, .. }, Family::Fard) if lengthscales.len() == d => Ok(()),
            (
                KernelParams::Fsard {
                    lengthscales, radii, ..
                },
                Family::Fsard,
            ) if lengthscales.len() == d && grid_ok(radii) => Ok(()),
            (
                KernelParams::Fsgbard {
                    lengthscales,
                    radii,
                    g,
                    b,
                    ..
                },
                Family::Fsgbard,
            ) if lengthscales.len() == d && grid_ok(radii) && raw_grid_ok(g) && raw_grid_ok(b) => Ok(()),
            (KernelParams::Gm { groups }, Family::Gm)
                if groups.len() == q && groups.iter().all(|g| g.mu.len() == d && g.spread.len() == d) =>
            {
                Ok(())
            }
            (KernelParams::Pwl { groups }, Family::Pwl)
                if groups.len() == q && groups.iter().all(|g| g.lengthscales.len() == d) =>
            {
                Ok(())
            }
            _ => bad("kernel parameters"),
        }
    }

    fn scale_mut(&mut self, role: ParamRole) -> Option<&mut ScaleParam> {
        use KernelParams as P;
        use ParamRole as R;
        match (&mut self.params, role) {
            (P::Frbf { lengthscale, .. }, R::Lengthscale { dim: None }) => Some(lengthscale),
            (P::Frbf { amplitude, .. }, R::Amplitude)
            | (P::Fard { amplitude, .. }, R::Amplitude)
            | (P::Fsard { amplitude, .. }, R::Amplitude)
            | (P::Fsgbard { amplitude, .. }, R::Amplitude) => Some(amplitude),
            (P::Fard { lengthscales, .. }, R::Lengthscale { dim: Some(j) })
            | (P::Fsard { lengthscales, .. }, R::Lengthscale { dim: Some(j) })
            | (P::Fsgbard { lengthscales, .. }, R::Lengthscale { dim: Some(j) }) => lengthscales.get_mut(j),
            (P::Fsard { radii, .. }, R::Radius { group, index })
            | (P::Fsgbard { radii, .. }, R::Radius { group, index }) => radii.get_mut(group)?.get_mut(index),
            (P::Gm { groups }, R::GroupWeight { group }) => Some(&mut groups.get_mut(group)?.weight),
            (P::Gm { groups }, R::GmSpread { group, dim }) => groups.get_mut(group)?.spread.get_mut(dim),
            (P::Pwl { groups }, R::GroupWeight { group }) => Some(&mut groups.get_mut(group)?.weight),
            (P::Pwl { groups }, R::HatOffset { group }) => Some(&mut groups.get_mut(group)?.offset),
            (P::Pwl { groups }, R::HatWidth { group }) => Some(&mut groups.get_mut(group)?.width),
            (P::Pwl { groups }, R::GroupLengthscale { group, dim }) => groups.get_mut(group)?.lengthscales.get_mut(dim),
            _ => None,
        }
    }

    fn raw_mut(&mut self, role: ParamRole) -> Option<&mut f64> {
        use KernelParams as P;
        use ParamRole as R;
        match (&mut self.params, role) {
            (P::Fsgbard { g, .. }, R::GDiag { group, index }) => g.get_mut(group)?.get_mut(index),
            (P::Fsgbard { b, .. }, R::BDiag { group, index }) => b.get_mut(group)?.get_mut(index),
            (P::Gm { groups }, R::GmMean { group, dim }) => groups.get_mut(group)?.mu.get_mut(dim),
            _ => None,
        }
    }

    /// Value of a packed coordinate, in optimizer space.
    fn packed_value(&self, role: ParamRole) -> Option<f64> {
        let mut probe = self.clone();
        if role.is_log_scale() {
            probe.scale_mut(role).map(|s| s.log())
        } else {
            probe.raw_mut(role).map(|v| *v)
        }
    }

    fn set_packed(&mut self, role: ParamRole, value: f64) -> Result<()> {
        let missing = || Error::Domain(format!("{role:?} does not apply to this kernel"));
        if role.is_log_scale() {
            *self.scale_mut(role).ok_or_else(missing)? = ScaleParam::from_log(value);
        } else {
            *self.raw_mut(role).ok_or_else(missing)? = value;
        }
        Ok(())
    }
}

/// Packs a spec and noise variance into optimizer coordinates.
pub fn pack(spec: &KernelSpec, noise_var: ScaleParam) -> Result<HyperVector> {
    spec.validate()?;
    let roles = spec.shape.roles();
    let mut out = Vec::with_capacity(roles.len());
    out.push(noise_var.log());
    // Skip the per-role probe clone for the large learned diagonals.
    let mut work = spec.clone();
    for role in roles.into_iter().skip(1) {
        let v = if role.is_log_scale() {
            work.scale_mut(role).map(|s| s.log())
        } else {
            work.raw_mut(role).map(|v| *v)
        };
        out.push(v.ok_or_else(|| Error::Domain(format!("{role:?} missing from spec")))?);
    }
    Ok(HyperVector(out))
}

/// Inverse of [`pack`].
pub fn unpack(shape: &KernelShape, hyper: &HyperVector) -> Result<(KernelSpec, ScaleParam)> {
    if hyper.len() != shape.param_count() {
        return Err(Error::InvalidDimension(format!(
            "{} kernel with this shape has {} parameters, vector has {}",
            shape.family,
            shape.param_count(),
            hyper.len()
        )));
    }
    let mut spec = KernelSpec::unit(*shape);
    for (role, v) in shape.roles().into_iter().zip(&hyper.0).skip(1) {
        spec.set_packed(role, *v)?;
    }
    Ok((spec, ScaleParam::from_log(hyper.0[0])))
}

impl KernelSpec {
    /// Packed value of one coordinate; used by diagnostics and tests.
    pub fn coordinate(&self, role: ParamRole) -> Option<f64> {
        self.packed_value(role)
    }
}
