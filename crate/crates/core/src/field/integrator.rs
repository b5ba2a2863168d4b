//! Dormand-Prince 5(4) with PI step-size control.
//!
//! The local error estimate is held below `tol * min(|h|, 1)` per step in a
//! mixed absolute/relative norm, i.e. roughly `tol` per unit time.

use crate::error::{LiaoError, Result};

pub const DEFAULT_BLOWUP: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct IntegratorOptions {
    pub tol: f64,
    pub max_steps: usize,
    /// Divergence threshold on the Euclidean norm of the first `checked_len` components.
    pub blowup: f64,
    pub checked_len: usize,
    pub initial_step: Option<f64>,
    pub max_step: f64,
}

impl IntegratorOptions {
    pub fn new(tol: f64) -> Self {
        IntegratorOptions {
            tol,
            max_steps: 2_000_000,
            blowup: DEFAULT_BLOWUP,
            checked_len: usize::MAX,
            initial_step: None,
            max_step: f64::INFINITY,
        }
    }

    pub fn with_blowup(mut self, bound: f64, checked_len: usize) -> Self {
        self.blowup = bound;
        self.checked_len = checked_len;
        self
    }

    pub fn with_initial_step(mut self, h: f64) -> Self {
        self.initial_step = Some(h.abs());
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h.abs();
        self
    }
}

/// Samples produced by [`integrate`]: times, states and right-hand sides.
#[derive(Debug, Clone, Default)]
pub struct Solution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub slopes: Vec<Vec<f64>>,
}

impl Solution {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().map(|s| s.as_slice()).unwrap_or(&[])
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = rhs(t, y)` from `t0` through every time in `stops`
/// (monotone, all on one side of `t0`), landing on each stop exactly.
///
/// With `record_steps` every accepted step is kept; otherwise only `t0` and the stops.
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    stops: &[f64],
    opts: &IntegratorOptions,
    record_steps: bool,
) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    let mut sol = Solution::default();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    rhs(t0, &y, &mut k1)?;
    sol.times.push(t0);
    sol.states.push(y.clone());
    sol.slopes.push(k1.clone());

    let Some(&t_end) = stops.last() else {
        return Ok(sol);
    };
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    if stops
        .windows(2)
        .any(|w| (w[1] - w[0]) * dir < 0.0)
        || (stops[0] - t0) * dir < 0.0
    {
        return Err(LiaoError::Precondition(
            "integration stops must be monotone away from the start time".into(),
        ));
    }

    let check_len = opts.checked_len.min(dim);
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut k5 = vec![0.0; dim];
    let mut k6 = vec![0.0; dim];
    let mut k7 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];

    let span = (t_end - t0).abs();
    let mut h = opts
        .initial_step
        .unwrap_or_else(|| (0.01 * span.max(1e-3)).min(0.1))
        .min(opts.max_step)
        .max(1e-14);
    let mut err_prev: f64 = 1e-4;
    let mut t = t0;
    let mut steps = 0usize;
    let mut stop_idx = 0usize;
    // Skip stops equal to the start time.
    while stop_idx < stops.len() && stops[stop_idx] == t0 {
        if !record_steps {
            sol.times.push(t0);
            sol.states.push(y.clone());
            sol.slopes.push(k1.clone());
        }
        stop_idx += 1;
    }

    while stop_idx < stops.len() {
        let target = stops[stop_idx];
        let remaining = (target - t) * dir;
        let mut hit = false;
        let mut step = h.min(opts.max_step);
        if step >= remaining * (1.0 - 1e-12) {
            step = remaining;
            hit = true;
        }
        let hs = step * dir;

        for i in 0..dim {
            tmp[i] = y[i] + hs * A21 * k1[i];
        }
        rhs(t + C2 * hs, &tmp, &mut k2)?;
        for i in 0..dim {
            tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(t + C3 * hs, &tmp, &mut k3)?;
        for i in 0..dim {
            tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(t + C4 * hs, &tmp, &mut k4)?;
        for i in 0..dim {
            tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(t + C5 * hs, &tmp, &mut k5)?;
        for i in 0..dim {
            tmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(t + hs, &tmp, &mut k6)?;
        for i in 0..dim {
            y_new[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let t_new = if hit { target } else { t + hs };
        rhs(t_new, &y_new, &mut k7)?;

        let mut acc = 0.0;
        for i in 0..dim {
            let e = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.tol * (1.0 + y[i].abs().max(y_new[i].abs()));
            acc += (e / sc) * (e / sc);
        }
        let err = (acc / dim.max(1) as f64).sqrt() / step.min(1.0);

        steps += 1;
        if steps > opts.max_steps {
            return Err(LiaoError::StepLimit {
                steps: opts.max_steps,
                target,
            });
        }

        if !err.is_finite() {
            h = step * 0.1;
            if h < 1e-300 {
                return Err(LiaoError::Overflow("integrator state".into()));
            }
            continue;
        }

        if err <= 1.0 {
            let norm = y_new[..check_len].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > opts.blowup {
                return Err(LiaoError::Divergence {
                    last_time: t,
                    norm,
                });
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.17) * err_prev.powf(0.04)).clamp(0.2, 5.0)
            };
            err_prev = err.max(1e-4);
            if !hit || record_steps {
                if record_steps {
                    sol.times.push(t);
                    sol.states.push(y.clone());
                    sol.slopes.push(k1.clone());
                }
            }
            if hit {
                if !record_steps {
                    sol.times.push(t);
                    sol.states.push(y.clone());
                    sol.slopes.push(k1.clone());
                }
                stop_idx += 1;
                // Repeated stop values land immediately.
                while stop_idx < stops.len() && stops[stop_idx] == t {
                    if !record_steps {
                        sol.times.push(t);
                        sol.states.push(y.clone());
                        sol.slopes.push(k1.clone());
                    }
                    stop_idx += 1;
                }
                // A truncated step says nothing about the natural step size.
                h = h.max(step * fac);
            } else {
                h = step * fac;
            }
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h = step * fac;
            if h < 1e-14 * (1.0 + t.abs()) {
                return Err(LiaoError::StepLimit { steps, target });
            }
        }
    }
    Ok(sol)
}

/// Cubic Hermite interpolation between two samples with slopes.
pub fn hermite(t0: f64, y0: &[f64], d0: &[f64], t1: f64, y1: &[f64], d1: &[f64], t: f64) -> Vec<f64> {
    let h = t1 - t0;
    if h == 0.0 {
        return y0.to_vec();
    }
    let s = (t - t0) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * d0[i] + h01 * y1[i] + h11 * h * d1[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth_and_decay() {
        let sol = integrate(
            |_t, y, dy| {
                dy[0] = y[0];
                dy[1] = -y[1];
                Ok(())
            },
            0.0,
            &[1.0, 1.0],
            &[1.0],
            &IntegratorOptions::new(1e-12),
            false,
        )
        .unwrap();
        let y = sol.last_state();
        assert!((y[0] - 1f64.exp()).abs() < 1e-11);
        assert!((y[1] - (-1f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn backward_and_exact_stops() {
        let stops = [-0.25, -0.5, -2.0];
        let sol = integrate(
            |t, _y, dy| {
                dy[0] = t.cos();
                Ok(())
            },
            0.0,
            &[0.0],
            &stops,
            &IntegratorOptions::new(1e-12),
            false,
        )
        .unwrap();
        assert_eq!(&sol.times[1..], &stops);
        for (t, y) in sol.times.iter().zip(&sol.states) {
            assert!((y[0] - t.sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let err = integrate(
            |_t, y, dy| {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            &[2.0],
            &IntegratorOptions::new(1e-8),
            false,
        )
        .unwrap_err();
        match err {
            LiaoError::Divergence { last_time, .. } => assert!(last_time < 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hermite_matches_cubic_exactly() {
        let f = |t: f64| t * t * t - 2.0 * t;
        let d = |t: f64| 3.0 * t * t - 2.0;
        let v = hermite(0.5, &[f(0.5)], &[d(0.5)], 1.5, &[f(1.5)], &[d(1.5)], 1.1);
        assert!((v[0] - f(1.1)).abs() < 1e-14);
    }
}
