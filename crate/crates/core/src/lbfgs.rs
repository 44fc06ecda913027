//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Objective evaluations may fail (for example an ill-conditioned kernel at an
//! extreme trial point); the line search treats a failed evaluation as an
//! infinitely bad point and backtracks.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iter: 200,
            grad_tol: 1e-5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimize `objective`, which returns the value and gradient or `None` if the
/// point cannot be evaluated. Returns `None` only when `x0` itself fails.
pub fn minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut eval = |x: &[f64]| -> Option<Point> {
        let (f, g) = objective(x)?;
        if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            Some(Point { x: x.to_vec(), f, g })
        } else {
            None
        }
    };

    let mut cur = eval(x0)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        if inf_norm(&cur.g) < cfg.grad_tol {
            return Some(LbfgsResult {
                x: cur.x,
                f: cur.f,
                grad: cur.g,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        // Two-loop recursion.
        let mut q = cur.g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / inf_norm(&cur.g).max(1.0));
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &cur.g);
        if !(slope < 0.0) {
            history.clear();
            dir = cur.g.iter().map(|v| -v).collect();
            slope = dot(&dir, &cur.g);
        }

        let next = match line_search(&mut eval, &cur, &dir, slope, cfg) {
            Some(p) => p,
            None => {
                if history.is_empty() {
                    break;
                }
                history.clear();
                continue;
            }
        };

        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let stalled = (cur.f - next.f).abs() <= 1e-15 * cur.f.abs().max(1.0);
        cur = next;
        if stalled && inf_norm(&cur.g) >= cfg.grad_tol {
            break;
        }
    }

    let converged = inf_norm(&cur.g) < cfg.grad_tol;
    Some(LbfgsResult {
        x: cur.x,
        f: cur.f,
        grad: cur.g,
        iterations,
        converged,
    })
}

fn line_search<E>(eval: &mut E, start: &Point, dir: &[f64], slope0: f64, cfg: &LbfgsConfig) -> Option<Point>
where
    E: FnMut(&[f64]) -> Option<Point>,
{
    let at = |t: f64| -> Vec<f64> { start.x.iter().zip(dir).map(|(x, d)| x + t * d).collect() };
    let armijo = |p: &Point, t: f64| p.f <= start.f + cfg.c1 * t * slope0;
    let curvature = |p: &Point| dot(&p.g, dir).abs() <= -cfg.c2 * slope0;

    let mut t_prev = 0.0;
    let mut p_prev: Option<Point> = None;
    let mut t = 1.0;
    for i in 0..cfg.max_line_search {
        let p = match eval(&at(t)) {
            Some(p) => p,
            None => {
                t = 0.5 * (t_prev + t);
                continue;
            }
        };
        let prev_f = p_prev.as_ref().map_or(start.f, |q| q.f);
        if !armijo(&p, t) || (i > 0 && p.f >= prev_f) {
            return zoom(eval, start, dir, slope0, cfg, t_prev, p_prev, t);
        }
        if curvature(&p) {
            return Some(p);
        }
        let d = dot(&p.g, dir);
        if d >= 0.0 {
            return zoom(eval, start, dir, slope0, cfg, t, Some(p), t_prev);
        }
        t_prev = t;
        p_prev = Some(p);
        t *= 2.0;
    }
    p_prev.filter(|p| p.f < start.f)
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    start: &Point,
    dir: &[f64],
    slope0: f64,
    cfg: &LbfgsConfig,
    mut t_lo: f64,
    mut p_lo: Option<Point>,
    mut t_hi: f64,
) -> Option<Point>
where
    E: FnMut(&[f64]) -> Option<Point>,
{
    for _ in 0..cfg.max_line_search {
        let t = 0.5 * (t_lo + t_hi);
        let x: Vec<f64> = start.x.iter().zip(dir).map(|(x, d)| x + t * d).collect();
        let f_lo = p_lo.as_ref().map_or(start.f, |p| p.f);
        match eval(&x) {
            None => t_hi = t,
            Some(p) => {
                if p.f > start.f + cfg.c1 * t * slope0 || p.f >= f_lo {
                    t_hi = t;
                } else {
                    let d = dot(&p.g, dir);
                    if d.abs() <= -cfg.c2 * slope0 {
                        return Some(p);
                    }
                    if d * (t_hi - t_lo) >= 0.0 {
                        t_hi = t_lo;
                    }
                    t_lo = t;
                    p_lo = Some(p);
                }
            }
        }
        if (t_hi - t_lo).abs() < 1e-16 {
            break;
        }
    }
    p_lo.filter(|p| p.f < start.f)
}
