//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Objective failures (errors or non-finite values) away from the starting
//! point are treated as `+inf`, which makes the line search back off.

use crate::error::{Error, Result};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 25;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub gradient_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone)]
struct Point {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Objective<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective<F> {
    fn at(&mut self, x0: &[f64], dir: &[f64], alpha: f64) -> Point {
        self.evals += 1;
        let x: Vec<f64> = x0.iter().zip(dir).map(|(a, p)| a + alpha * p).collect();
        match (self.f)(&x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Point {
                alpha,
                f,
                d: dot(&g, dir),
                x,
                g,
            },
            _ => Point {
                alpha,
                f: f64::INFINITY,
                d: f64::NAN,
                x,
                g: Vec::new(),
            },
        }
    }
}

/// Minimizer of the cubic through two points with known slopes, or the
/// bisection point if that falls outside the safeguarded interval.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let width = (b - a).abs();
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.d.is_finite() {
        return mid;
    }
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    let (lo_b, hi_b) = (a.min(b) + 0.1 * width, a.max(b) - 0.1 * width);
    if t.is_finite() && t >= lo_b && t <= hi_b {
        t
    } else {
        mid
    }
}

fn line_search<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    obj: &mut Objective<F>,
    start: &Point,
    dir: &[f64],
    alpha0: f64,
) -> Option<Point> {
    let x0 = &start.x;
    let armijo = |p: &Point| p.f <= start.f + C1 * p.alpha * start.d;
    let curvature = |p: &Point| p.d.abs() <= -C2 * start.d;
    let mut prev = Point {
        alpha: 0.0,
        ..start.clone()
    };
    let mut alpha = alpha0;
    let mut best: Option<Point> = None;
    let keep = |p: &Point, best: &mut Option<Point>| {
        if p.f < start.f && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(p.clone());
        }
    };
    let mut evals = 0;
    let (mut lo, mut hi) = loop {
        let cur = obj.at(x0, dir, alpha);
        evals += 1;
        keep(&cur, &mut best);
        if !armijo(&cur) || (evals > 1 && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.d >= 0.0 {
            break (cur, prev);
        }
        if evals >= MAX_LINE_EVALS {
            return best;
        }
        alpha *= 2.0;
        prev = cur;
    };
    while evals < MAX_LINE_EVALS {
        let trial = interpolate(&lo, &hi);
        if (trial - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let cur = obj.at(x0, dir, trial);
        evals += 1;
        keep(&cur, &mut best);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    best.filter(armijo)
}

/// Minimizes `f` starting from `x0`; `f` returns the value and gradient.
pub fn minimize<F>(f: F, x0: &[f64], config: LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if config.memory == 0 || config.gradient_tolerance.is_nan() || config.gradient_tolerance <= 0.0 {
        return Err(Error::Domain(
            "L-BFGS needs memory >= 1 and a positive tolerance".into(),
        ));
    }
    let mut obj = Objective { f, evals: 0 };
    let (f0, g0) = (obj.f)(x0)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizationFailure {
            reason: format!("objective is not finite at the starting point ({f0})"),
            best: None,
        });
    }
    let mut cur = Point {
        alpha: 0.0,
        f: f0,
        d: 0.0,
        x: x0.to_vec(),
        g: g0,
    };
    let mut history = vec![f0];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = inf_norm(&cur.g) <= config.gradient_tolerance;
    let mut iterations = 0;
    while !converged && iterations < config.max_iters {
        let mut dir = two_loop(&cur.g, &s_hist, &y_hist);
        let mut slope = dot(&dir, &cur.g);
        if slope >= 0.0 || !slope.is_finite() {
            s_hist.clear();
            y_hist.clear();
            dir = cur.g.iter().map(|v| -v).collect();
            slope = dot(&dir, &cur.g);
        }
        cur.d = slope;
        let alpha0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&cur.g).max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let Some(next) = line_search(&mut obj, &cur, &dir, alpha0) else {
            log::debug!("line search made no progress after {iterations} iterations");
            break;
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if s_hist.len() == config.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let rel_change = (cur.f - next.f).abs() / cur.f.abs().max(next.f.abs()).max(1.0);
        cur = next;
        iterations += 1;
        history.push(cur.f);
        converged = inf_norm(&cur.g) <= config.gradient_tolerance || rel_change < 1e-14;
    }
    log::debug!(
        "L-BFGS: {iterations} iterations, {} evaluations, f = {}",
        obj.evals,
        cur.f
    );
    Ok(LbfgsResult {
        x: cur.x,
        f: cur.f,
        grad: cur.g,
        iterations,
        history,
        converged,
    })
}

fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = vec![0.0; s_hist.len()];
    for i in (0..s_hist.len()).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alphas[i] = rho * dot(&s_hist[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alphas[i] * yj;
        }
    }
    if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..s_hist.len() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let b = rho * dot(&y_hist[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += (alphas[i] - b) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
