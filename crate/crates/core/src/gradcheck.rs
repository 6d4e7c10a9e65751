//! Central finite-difference gradient checks.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::param::{Parameter, Parameterized};
use crate::rng::SeedStream;

/// Finite-difference estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Difference {
    /// `(f(x+h) - f(x-h)) / 2h` at the fixed step `eps`.
    #[default]
    Central,
    /// Ridders' extrapolation: central differences at steps `eps, eps/c, eps/c², ...`
    /// combined in a Richardson tableau, keeping the entry with the smallest error estimate.
    Ridders,
    /// Central differences at `eps, eps/10, eps/100, ...`; returns the first whose
    /// successor agrees with it to within round-off. Suited to piecewise-smooth losses,
    /// where a kink inside the step makes successive estimates disagree.
    Ladder,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step for `Central`, initial step for `Ridders`.
    pub eps: f64,
    pub method: Difference,
    /// Coordinates sampled per parameter matrix; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            method: Difference::Central,
            coords_per_param: Some(12),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn with_param<P: Parameterized + ?Sized, T>(
    params: &mut P,
    target: usize,
    f: impl FnOnce(&mut Parameter) -> T,
) -> T {
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        if i == target {
            out = Some((f.take().expect("visited once"))(p));
        }
        i += 1;
    });
    out.expect("parameter index in range")
}

/// Compares the gradients currently stored in `params` against central differences
/// of `loss_fn`. Gradients must already be populated by a completed backward pass.
pub fn grad_check<P, F>(params: &mut P, opts: &GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    P: Parameterized + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    let max_eps = match opts.method {
        Difference::Central | Difference::Ladder => 1e-3,
        Difference::Ridders => 1e-1,
    };
    if !(1e-6..=max_eps).contains(&opts.eps) {
        return Err(Error::input(
            "grad_check",
            format!("eps {} outside [1e-6, {max_eps}]", opts.eps),
        ));
    }
    let mut targets = Vec::new();
    params.visit(&mut |name, p| targets.push((name.to_string(), p.len(), p.is_trainable())));

    let stream = SeedStream::new(opts.seed).split("grad_check");
    let mut report = GradCheckReport::default();
    for (pi, (name, len, trainable)) in targets.into_iter().enumerate() {
        if !trainable || len == 0 {
            continue;
        }
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < len => {
                let mut rng = stream.split_index("param", pi as u64).rng();
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for idx in coords {
            let (orig, analytic) =
                with_param(params, pi, |p| (p.value.data()[idx], p.grad().data()[idx]));
            let mut central = |h: f64| -> Result<(f64, f64)> {
                with_param(params, pi, |p| p.value.data_mut()[idx] = orig + h);
                let plus = loss_fn(params);
                with_param(params, pi, |p| p.value.data_mut()[idx] = orig - h);
                let minus = loss_fn(params);
                with_param(params, pi, |p| p.value.data_mut()[idx] = orig);
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite { op: "grad_check" });
                }
                Ok(((plus - minus) / (2.0 * h), plus.abs().max(minus.abs())))
            };
            let numeric = match opts.method {
                Difference::Central => central(opts.eps)?.0,
                Difference::Ridders => ridders(opts.eps, &mut |h| central(h).map(|c| c.0))?,
                Difference::Ladder => ladder(opts.eps, &mut central)?,
            };
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordinateCheck {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;
const RIDDERS_SAFE: f64 = 2.0;

fn ridders(h0: f64, central: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut prev: Vec<f64> = vec![central(h0)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    let mut h = h0;
    for i in 1..RIDDERS_LEVELS {
        h /= RIDDERS_SHRINK;
        let mut row = Vec::with_capacity(i + 1);
        row.push(central(h)?);
        let mut fac = c2;
        for j in 1..=i {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        if (row[i] - prev[i - 1]).abs() >= RIDDERS_SAFE * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

const LADDER_RATIO: f64 = 10.0;
const LADDER_LEVELS: usize = 4;
/// Loss round-off assumed per evaluation, in units of `ε · |loss|`.
const LADDER_ULPS: f64 = 8.0;

fn ladder(h0: f64, central: &mut impl FnMut(f64) -> Result<(f64, f64)>) -> Result<f64> {
    let (mut d, _) = central(h0)?;
    let mut h = h0;
    for _ in 1..LADDER_LEVELS {
        h /= LADDER_RATIO;
        let (next, scale) = central(h)?;
        let noise = LADDER_ULPS * f64::EPSILON * scale.max(1.0) / h;
        if (d - next).abs() <= noise {
            return Ok(d);
        }
        d = next;
    }
    Ok(d)
}
