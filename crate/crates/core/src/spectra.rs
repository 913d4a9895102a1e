//! Spectral densities: diagonal Gaussian mixture components and piecewise-linear
//! radial densities built from hat functions.

use crate::error::{Error, Result};

/// One Gaussian component of a spectral mixture, with diagonal spread.
#[derive(Debug, Clone, PartialEq)]
pub struct GmComponent {
    /// Mean frequency, radians per input unit.
    pub mu: Vec<f64>,
    /// Square root of the diagonal spectral covariance.
    pub sigma_diag: Vec<f64>,
    /// Signal scale `v_q`.
    pub weight: f64,
}

impl GmComponent {
    pub fn new(mu: Vec<f64>, sigma_diag: Vec<f64>, weight: f64) -> Result<Self> {
        if mu.len() != sigma_diag.len() {
            return Err(Error::InvalidDimension(format!(
                "mixture mean has length {}, spread has length {}",
                mu.len(),
                sigma_diag.len()
            )));
        }
        if sigma_diag.iter().any(|s| !(*s >= 0.0)) || !(weight >= 0.0) {
            return Err(Error::Domain("mixture spreads and weight must be nonnegative".into()));
        }
        Ok(Self { mu, sigma_diag, weight })
    }
}

/// Kernel of one component at displacement `tau`:
/// `v^2 exp(-0.5 ||sigma * tau||^2) cos(<mu, tau>)`.
pub fn gm_closed_form(comp: &GmComponent, tau: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut phase = 0.0;
    for ((t, s), m) in tau.iter().zip(&comp.sigma_diag).zip(&comp.mu) {
        quad += (s * t) * (s * t);
        phase += m * t;
    }
    comp.weight * comp.weight * (-0.5 * quad).exp() * phase.cos()
}

/// Radial density `rho(r) = sum_i alpha_i rho_i(r)` over hat functions.
///
/// `knots` holds `r_0 < r_1 < ... < r_{n+1}`; `alphas` holds the heights at
/// the interior knots `r_1..r_n`. The density is zero at both boundary knots
/// and outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlSpectrum {
    knots: Vec<f64>,
    alphas: Vec<f64>,
}

impl PwlSpectrum {
    pub fn new(knots: Vec<f64>, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || knots.len() != alphas.len() + 2 {
            return Err(Error::InvalidDimension(format!(
                "{} heights need {} knots, got {}",
                alphas.len(),
                alphas.len() + 2,
                knots.len()
            )));
        }
        if !(knots[0] >= 0.0) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Domain("knots must be finite and start at r_0 >= 0".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("knots must be strictly increasing".into()));
        }
        // Nonnegativity of the density holds exactly when every height is nonnegative.
        if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(Error::Domain(format!("hat height {a} would make the density negative")));
        }
        Ok(Self { knots, alphas })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Density heights at every knot, boundaries included.
    fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(0.0)
            .chain(self.alphas.iter().copied())
            .chain(std::iter::once(0.0))
    }

    fn support(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Per-segment areas, in knot order.
    fn segment_areas(&self) -> Vec<f64> {
        let h: Vec<f64> = self.heights().collect();
        self.knots
            .windows(2)
            .enumerate()
            .map(|(k, w)| 0.5 * (h[k] + h[k + 1]) * (w[1] - w[0]))
            .collect()
    }

    /// Unnormalized CDF, `int_{r_0}^{r} rho`.
    pub fn integral_to(&self, r: f64) -> f64 {
        let h: Vec<f64> = self.heights().collect();
        let mut acc = 0.0;
        for (k, w) in self.knots.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if r <= a {
                break;
            }
            let t = r.min(b) - a;
            let slope = (h[k + 1] - h[k]) / (b - a);
            acc += h[k] * t + 0.5 * slope * t * t;
        }
        acc
    }
}

/// Evaluates the radial density at `r`.
pub fn pwl_density(spec: &PwlSpectrum, r: f64) -> f64 {
    let (lo, hi) = spec.support();
    if !(r > lo && r < hi) {
        return 0.0;
    }
    let h: Vec<f64> = spec.heights().collect();
    let k = spec.knots.partition_point(|&x| x <= r) - 1;
    let (a, b) = (spec.knots[k], spec.knots[k + 1]);
    let t = (r - a) / (b - a);
    h[k] + t * (h[k + 1] - h[k])
}

/// Total mass `sum_i alpha_i (r_{i+1} - r_{i-1}) / 2`.
pub fn pwl_normalizer(spec: &PwlSpectrum) -> Result<f64> {
    let z: f64 = spec
        .alphas
        .iter()
        .enumerate()
        .map(|(i, a)| 0.5 * a * (spec.knots[i + 2] - spec.knots[i]))
        .sum();
    if z > 0.0 {
        Ok(z)
    } else {
        Err(Error::DegenerateSpectrum("all hat heights are zero".into()))
    }
}

/// Normalized CDF.
pub fn pwl_cdf(spec: &PwlSpectrum, r: f64) -> Result<f64> {
    Ok((spec.integral_to(r) / pwl_normalizer(spec)?).clamp(0.0, 1.0))
}

/// Quantile function of the normalized density. Solves the quadratic CDF
/// piece of the segment containing `u` in closed form.
pub fn pwl_inverse_cdf(spec: &PwlSpectrum, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("quantile {u} outside [0, 1]")));
    }
    let z = pwl_normalizer(spec)?;
    let (lo, hi) = spec.support();
    if u == 0.0 {
        return Ok(lo);
    }
    if u == 1.0 {
        return Ok(hi);
    }
    let target = u * z;
    let h: Vec<f64> = spec.heights().collect();
    let areas = spec.segment_areas();
    let mut acc = 0.0;
    let last = areas.len() - 1;
    for (k, area) in areas.iter().enumerate() {
        if acc + area < target && k < last {
            acc += area;
            continue;
        }
        let (a, b) = (spec.knots[k], spec.knots[k + 1]);
        let width = b - a;
        let c = (target - acc).max(0.0);
        // h_k t + (h_{k+1} - h_k) t^2 / (2 width) = c
        let quad = (h[k + 1] - h[k]) / (2.0 * width);
        let lin = h[k];
        let disc = (lin * lin + 4.0 * quad * c).max(0.0);
        let denom = lin + disc.sqrt();
        let t = if denom > 0.0 { 2.0 * c / denom } else { 0.0 };
        return Ok((a + t.min(width)).min(hi));
    }
    Ok(hi)
}

/// Stratified quantiles `u_i = i/m + jitter`, `i = 0..m`, pushed through the
/// inverse CDF. Output is ascending.
pub fn systematic_radii(spec: &PwlSpectrum, m: usize, jitter: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidDimension("systematic sampling needs m >= 1".into()));
    }
    let step = 1.0 / m as f64;
    if !(0.0..=step).contains(&jitter) {
        return Err(Error::Domain(format!("jitter {jitter} outside [0, 1/m]")));
    }
    (0..m)
        .map(|i| pwl_inverse_cdf(spec, (i as f64 * step + jitter).min(1.0)))
        .collect()
}

/// The single-hat spectrum used in experiments: support `[mu, mu + sigma]`
/// with its mode at `mu + sigma / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatSpectrum {
    pub mu: f64,
    pub sigma: f64,
}

impl HatSpectrum {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu >= 0.0) || !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::Domain(format!(
                "hat needs mu >= 0 and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn to_pwl(&self) -> PwlSpectrum {
        PwlSpectrum {
            knots: vec![self.mu, self.mu + 0.5 * self.sigma, self.mu + self.sigma],
            alphas: vec![1.0],
        }
    }

    /// Systematic radii together with their derivatives in `mu` and `sigma`.
    /// The hat family is location-scale, so `r = mu + sigma * t(u)`.
    pub fn radii_with_derivatives(&self, m: usize, jitter: f64) -> Result<HatRadii> {
        let radii = systematic_radii(&self.to_pwl(), m, jitter)?;
        let d_sigma = radii.iter().map(|r| (r - self.mu) / self.sigma).collect();
        Ok(HatRadii { radii, d_sigma })
    }
}

/// Radii from a hat together with `dr/dsigma` (`dr/dmu` is identically 1).
#[derive(Debug, Clone)]
pub struct HatRadii {
    pub radii: Vec<f64>,
    pub d_sigma: Vec<f64>,
}
