//! Synthetic regression data with known structure.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Draw from a 1-D stationary GP whose spectral density is a Gaussian bump of
/// std `width` centred at `+-peak`, observed on `x ~ U[0, span]` with
/// Gaussian noise. The GP path is approximated with 4096 random cosines.
pub fn peaked_spectrum_1d(
    n: usize,
    peak: f64,
    width: f64,
    span: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let freq = Normal::new(peak, width).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const TERMS: usize = 4096;
    let waves: Vec<(f64, f64, f64)> = (0..TERMS)
        .map(|_| {
            (
                freq.sample(&mut rng),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();
    let scale = (2.0 / TERMS as f64).sqrt();
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..span));
    let y = (0..n)
        .map(|i| {
            let f: f64 = waves.iter().map(|(w, p, a)| a * (w * x[(i, 0)] + p).cos()).sum();
            scale * f + noise_std * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Ok((x, y))
}

/// Five-input surrogate for a small aerodynamic-noise table: a smooth trend
/// in all inputs, two oscillatory terms along single inputs, an interaction
/// and additive noise.
pub fn airfoil_surrogate(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 5, |_, j| match j {
        0 => rng.random_range(2.3..4.3),
        1 => rng.random_range(0.0..22.0),
        2 => rng.random_range(0.025..0.30),
        3 => rng.random_range(31.0..72.0),
        _ => rng.random_range(0.0004..0.058),
    });
    let y = (0..n)
        .map(|i| {
            let r = x.row(i);
            let (f, a, c, v, t) = (r[0], r[1], r[2], r[3], r[4]);
            125.0 - 4.0 * (f - 3.3) - 0.25 * a - 12.0 * c + 0.08 * v - 60.0 * t
                + 3.0 * (2.0 * std::f64::consts::PI * 2.2 * f).sin()
                + 2.0 * (0.9 * a).cos() * (1.0 - 2.0 * c)
                + 1.5 * (2.0 * std::f64::consts::PI * f * (1.0 + 8.0 * t)).sin()
                + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    (x, y)
}

/// Smooth `d`-input function on `U[-1, 1]^d` plus noise of std 0.1.
pub fn smooth_regression(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let y = (0..n)
        .map(|i| {
            let r = x.row(i);
            let s: f64 = r.iter().enumerate().map(|(j, v)| (1.0 + j as f64) * v).sum();
            (1.5 * s).sin() + 0.5 * r[0] * r[0] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    (x, y)
}

/// Writes `x` and `y` as comma-separated rows, target last.
pub fn to_csv(x: &DMatrix<f64>, y: &[f64], header: Option<&[&str]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for (i, t) in y.iter().enumerate() {
        for v in x.row(i).iter() {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{t}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let (x, y) = peaked_spectrum_1d(50, 6.0, 0.3, 10.0, 0.1, 1).unwrap();
        assert_eq!((x.nrows(), x.ncols(), y.len()), (50, 1, 50));
        assert_eq!(peaked_spectrum_1d(50, 6.0, 0.3, 10.0, 0.1, 1).unwrap().1, y);
        let (x, y) = airfoil_surrogate(30, 2);
        assert_eq!((x.ncols(), y.len()), (5, 30));
        assert!(y.iter().all(|v| v.is_finite()));
        let (x, _) = smooth_regression(10, 3, 3);
        assert!(x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn csv_round_trip() {
        let (x, y) = smooth_regression(7, 2, 4);
        let text = to_csv(&x, &y, Some(&["a", "b", "y"]));
        let ds = crate::data::parse_dataset(&text, &Default::default()).unwrap();
        assert_eq!(ds.x, x);
        assert_eq!(ds.y, y);
    }
}
