//! Dormand–Prince 5(4) with a PI step-size controller.

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct Rk45Options<T> {
    pub atol: T,
    pub rtol: T,
    pub max_steps: usize,
    pub safety: T,
    pub min_scale: T,
    pub max_scale: T,
    /// PI stabilization exponent on the previous error.
    pub beta: T,
}

impl<T: Scalar> Rk45Options<T> {
    pub fn new(atol: T, rtol: T, max_steps: usize) -> Self {
        Self {
            atol,
            rtol,
            max_steps,
            safety: T::lit(0.9),
            min_scale: T::lit(0.2),
            max_scale: T::lit(10.0),
            beta: T::lit(0.04),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Rk45Stats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rms<T: Scalar>(v: &[T], scale: &[T]) -> T {
    let n = T::from_usize_lossy(v.len().max(1));
    (v.iter().zip(scale).map(|(&x, &s)| (x / s) * (x / s)).sum::<T>() / n).sqrt()
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t1` (either direction), overwriting `y`.
///
/// When `log` is given, the state after every accepted step is appended as `(t, y)`.
pub fn integrate<T, F>(
    mut rhs: F,
    t0: T,
    t1: T,
    y: &mut [T],
    opts: &Rk45Options<T>,
    mut log: Option<&mut Vec<(T, Vec<T>)>>,
) -> Result<Rk45Stats>
where
    T: Scalar,
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
{
    let n = y.len();
    let mut stats = Rk45Stats::default();
    if t0 == t1 {
        return Ok(stats);
    }
    let dir = if t1 > t0 { T::one() } else { -T::one() };
    let span = (t1 - t0).abs();
    let c: Vec<T> = C.iter().map(|&x| T::lit(x)).collect();
    let a: Vec<Vec<T>> = A.iter().map(|r| r.iter().map(|&x| T::lit(x)).collect()).collect();
    let e: Vec<T> = E.iter().map(|&x| T::lit(x)).collect();
    let fifth = T::lit(0.2);
    let expo = fifth - T::lit(0.75) * opts.beta;

    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
    let mut scale = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut err = vec![T::zero(); n];

    let mut t = t0;
    rhs(t, y, &mut k[0])?;
    stats.nfe += 1;

    // Initial step (Hairer, Nørsett & Wanner II.4).
    for i in 0..n {
        scale[i] = opts.atol + opts.rtol * y[i].abs();
    }
    let d0 = rms(y, &scale);
    let d1 = rms(&k[0], &scale);
    let small = T::lit(1e-5);
    let mut h0 = if d0 < small || d1 < small { T::lit(1e-6) } else { T::lit(0.01) * d0 / d1 };
    h0 = h0.min(span);
    for i in 0..n {
        tmp[i] = y[i] + dir * h0 * k[0][i];
    }
    rhs(t + dir * h0, &tmp, &mut k[1])?;
    stats.nfe += 1;
    for i in 0..n {
        err[i] = k[1][i] - k[0][i];
    }
    let d2 = rms(&err, &scale) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= T::lit(1e-15) {
        (h0 * T::lit(1e-3)).max(T::lit(1e-6))
    } else {
        (T::lit(0.01) / dmax).powf(fifth)
    };
    let mut h = (T::lit(100.0) * h0).min(h1).min(span);

    let mut err_prev = T::lit(1e-4);
    let mut rejected_last = false;
    let tiny = T::epsilon() * T::lit(16.0);

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::Solver {
                t: t.to_f64_lossy(),
                reason: format!("exceeded max_steps = {}", opts.max_steps),
            });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= tiny * (T::one() + t.abs()) {
            return Err(Error::Solver { t: t.to_f64_lossy(), reason: "step size underflow".into() });
        }
        let hd = dir * h;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for j in 0..s {
                    if a[s][j] != T::zero() {
                        acc += hd * a[s][j] * k[j][i];
                    }
                }
                tmp[i] = acc;
            }
            let ts = match (C[s] == 1.0, last) {
                (true, true) => t1,
                (true, false) => t + hd,
                _ => t + c[s] * hd,
            };
            rhs(ts, &tmp, &mut k[s])?;
            stats.nfe += 1;
            if s == 6 {
                y_new.copy_from_slice(&tmp);
            }
        }
        for i in 0..n {
            let mut acc = T::zero();
            for s in 0..7 {
                if e[s] != T::zero() {
                    acc += e[s] * k[s][i];
                }
            }
            err[i] = hd * acc;
            scale[i] = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
        }
        let en = rms(&err, &scale);
        if !en.is_finite() {
            return Err(Error::Solver { t: t.to_f64_lossy(), reason: "non-finite state".into() });
        }
        if en <= T::one() {
            stats.accepted += 1;
            t = if last { t1 } else { t + hd };
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            if let Some(l) = log.as_deref_mut() {
                l.push((t, y.to_vec()));
            }
            if last {
                return Ok(stats);
            }
            let enc = en.max(T::lit(1e-10));
            let mut fac = opts.safety * enc.powf(-expo) * err_prev.powf(opts.beta);
            fac = fac.max(opts.min_scale).min(opts.max_scale);
            if rejected_last {
                fac = fac.min(T::one());
            }
            h = h * fac;
            err_prev = enc;
            rejected_last = false;
        } else {
            stats.rejected += 1;
            let fac = (opts.safety * en.powf(-fifth)).max(opts.min_scale);
            h = h * fac;
            rejected_last = true;
        }
    }
}
