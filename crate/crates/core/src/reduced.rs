//! The reduced linearized system `R*(t)`, qualitative functions and the
//! hyperbolicity certificate built from their window averages.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiaoError, Result};
use crate::field::VectorFieldSpec;
use crate::frame::{FramePath, TransversalFrame, TransversalPropagatorPath};
use crate::linalg::{below_diagonal_max, entry_sum, triangular_log};

/// Step factors may deviate from upper-triangular form by at most this much.
pub const TRIANGULARITY_TOL: f64 = 1e-10;

/// Default window lengths for the sliding-window test.
pub const DEFAULT_D_GRID: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

/// Window start times are sampled every `T0_STRIDE` grid steps.
pub const T0_STRIDE: usize = 10;

#[derive(Debug, Clone)]
pub struct ReducedCocycle {
    pub times: Vec<f64>,
    pub h: f64,
    pub p_minus: usize,
    /// `R*(t_i)`: mean of the generators of the two adjacent steps.
    pub r_samples: Vec<DMatrix<f64>>,
    /// `log(F_i)/h` for the step `[t_i, t_{i+1}]`.
    pub step_generators: Vec<DMatrix<f64>>,
    /// `C*(t_i)`, with `C*(0) = I`.
    pub c_accum: Vec<DMatrix<f64>>,
    /// `Ω_k(t_i) = ∫_0^{t_i} ω_k`, exact for the piecewise-constant step rates.
    pub log_growth: Vec<Vec<f64>>,
    zero_index: usize,
}

impl ReducedCocycle {
    /// Builds the cocycle from per-step upper-triangular factors on the grid
    /// `times` (uniform with step `h`, containing 0).
    pub fn from_step_factors(
        times: Vec<f64>,
        h: f64,
        factors: &[DMatrix<f64>],
        p_minus: usize,
    ) -> Result<Self> {
        if times.is_empty() || factors.len() + 1 != times.len() {
            return Err(LiaoError::Precondition(
                "need one step factor per grid interval".into(),
            ));
        }
        let zero_index = times
            .iter()
            .position(|&t| t.abs() <= 1e-9 * h)
            .ok_or_else(|| LiaoError::Precondition("grid must contain t = 0".into()))?;
        if times
            .windows(2)
            .any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h)
        {
            return Err(LiaoError::Precondition(format!("grid is not uniform with step {h}")));
        }
        let k = factors.first().map_or(0, |f| f.nrows());
        if p_minus > k && !factors.is_empty() {
            return Err(LiaoError::Validation(format!(
                "p_minus = {p_minus} exceeds the transversal dimension {k}"
            )));
        }
        for (i, f) in factors.iter().enumerate() {
            let below = below_diagonal_max(f);
            if below > TRIANGULARITY_TOL {
                return Err(LiaoError::Inconsistent(format!(
                    "step factor at t = {} has below-diagonal entry {below:e}",
                    times[i]
                )));
            }
        }
        let step_generators = factors
            .iter()
            .map(|f| triangular_log(f).map(|l| l / h))
            .collect::<Result<Vec<_>>>()?;

        let m = times.len();
        let r_samples: Vec<DMatrix<f64>> = (0..m)
            .map(|i| match (i.checked_sub(1), step_generators.get(i)) {
                (Some(a), Some(b)) => (&step_generators[a] + b) * 0.5,
                (Some(a), None) => step_generators[a].clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => DMatrix::zeros(k, k),
            })
            .collect();

        let mut c_accum = vec![DMatrix::identity(k, k); m];
        let mut log_growth = vec![vec![0.0; k]; m];
        for i in zero_index..m - 1 {
            c_accum[i + 1] = &factors[i] * &c_accum[i];
            for j in 0..k {
                log_growth[i + 1][j] = log_growth[i][j] + factors[i][(j, j)].ln();
            }
        }
        for i in (1..=zero_index).rev() {
            let inv = factors[i - 1]
                .clone()
                .solve_upper_triangular(&c_accum[i])
                .ok_or_else(|| LiaoError::Inconsistent("singular step factor".into()))?;
            c_accum[i - 1] = inv;
            for j in 0..k {
                log_growth[i - 1][j] = log_growth[i][j] - factors[i - 1][(j, j)].ln();
            }
        }
        Ok(ReducedCocycle {
            times,
            h,
            p_minus,
            r_samples,
            step_generators,
            c_accum,
            log_growth,
            zero_index,
        })
    }

    /// Constant generator `r` sampled on `[t_min, t_max]`; used for synthetic cocycles.
    pub fn constant(r: &DMatrix<f64>, span: (f64, f64), h: f64, p_minus: usize) -> Result<Self> {
        let k_min = -((-span.0 / h - 1e-9).ceil().max(0.0) as i64);
        let k_max = (span.1 / h - 1e-9).ceil().max(0.0) as i64;
        let times: Vec<f64> = (k_min..=k_max).map(|k| k as f64 * h).collect();
        let f = (r * h).exp();
        let factors = vec![f; times.len() - 1];
        ReducedCocycle::from_step_factors(times, h, &factors, p_minus)
    }

    pub fn dimension(&self) -> usize {
        self.r_samples.first().map_or(0, |r| r.nrows())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    /// `ω_k(t_i)`, the diagonal of `R*(t_i)`.
    pub fn omega(&self, i: usize) -> Vec<f64> {
        let r = &self.r_samples[i];
        (0..r.nrows()).map(|k| r[(k, k)]).collect()
    }

    /// `∫_{t_a}^{t_b} ω_k` between grid indices.
    pub fn window_integral(&self, k: usize, a: usize, b: usize) -> f64 {
        self.log_growth[b][k] - self.log_growth[a][k]
    }

    /// `sup_t Σ|R*_ij(t)|` over the grid.
    pub fn entry_sum_bound(&self) -> f64 {
        self.r_samples.iter().map(entry_sum).fold(0.0, f64::max)
    }

    /// Largest relative operator-norm gap between `C*` and an independently
    /// integrated propagator path.
    pub fn propagator_residual(&self, propagators: &TransversalPropagatorPath) -> f64 {
        self.c_accum
            .iter()
            .zip(&propagators.matrices)
            .map(|(c, p)| {
                let scale = crate::linalg::spectral_norm(p).max(1.0);
                crate::linalg::spectral_norm(&(c - p)) / scale
            })
            .fold(0.0, f64::max)
    }
}

/// `R*` and `C*` from a transported frame path; `propagators` is checked
/// against the accumulated product.
pub fn reduced_cocycle(
    frames: &FramePath,
    propagators: &TransversalPropagatorPath,
    h: f64,
    p_minus: usize,
) -> Result<ReducedCocycle> {
    if (frames.h - h).abs() > 1e-12 * h {
        return Err(LiaoError::Precondition(format!(
            "frame path step {} differs from {h}",
            frames.h
        )));
    }
    if propagators.times.len() != frames.times.len() {
        return Err(LiaoError::Precondition(
            "frames and propagators must share a grid".into(),
        ));
    }
    let cocycle = ReducedCocycle::from_step_factors(frames.times.clone(), h, &frames.step_factors, p_minus)?;
    let residual = cocycle.propagator_residual(propagators);
    if !(residual <= 1e-6) {
        return Err(LiaoError::Inconsistent(format!(
            "accumulated step factors disagree with the propagator by {residual:e}"
        )));
    }
    Ok(cocycle)
}

/// `R*` at a single point from the frame, without transport:
/// with `M = γᵀ S′ γ`, `R_ii = M_ii` and `R_ij = M_ij + M_ji` for `i < j`.
pub fn transversal_generator(spec: &VectorFieldSpec, frame: &TransversalFrame) -> Result<DMatrix<f64>> {
    let jac = spec.jacobian(&frame.base)?;
    let m = frame.columns.tr_mul(&(jac * &frame.columns));
    let k = m.nrows();
    let mut r = DMatrix::zeros(k, k);
    for i in 0..k {
        r[(i, i)] = m[(i, i)];
        for j in (i + 1)..k {
            r[(i, j)] = m[(i, j)] + m[(j, i)];
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityCertificate {
    pub eta_hat: f64,
    pub d_hat: f64,
    pub window_t: f64,
    pub pass: bool,
    /// Largest stable window average (should be ≤ −eta_hat).
    pub worst_stable_average: f64,
    /// Smallest unstable window average (should be ≥ eta_hat).
    pub worst_unstable_average: f64,
    pub d_grid: Vec<f64>,
    /// Worst margin `min(−stable, unstable)` per entry of `d_grid`.
    pub rate_by_length: Vec<f64>,
    pub t0_stride: f64,
    pub t0_count: usize,
}

/// Sliding-window test: every `T` in `d_grid` and every sampled start `t₀`
/// with `[t₀, t₀+T] ⊂ [−window_T, window_T]`.
pub fn certify_hyperbolic(
    cocycle: &ReducedCocycle,
    d_grid: &[f64],
    window_t: f64,
) -> Result<HyperbolicityCertificate> {
    let required = d_grid.iter().cloned().fold(0.0, f64::max);
    if d_grid.is_empty() || d_grid.iter().any(|&d| !(d > 0.0)) {
        return Err(LiaoError::Validation("window lengths must be positive".into()));
    }
    if window_t < required {
        return Err(LiaoError::InsufficientWindow { window: window_t, required });
    }
    let (lo, hi) = cocycle.span();
    let slack = 1e-9 * cocycle.h;
    if lo > -window_t + slack || hi < window_t - slack {
        return Err(LiaoError::InsufficientWindow {
            window: (-lo).min(hi),
            required: window_t,
        });
    }
    let h = cocycle.h;
    let k = cocycle.dimension();
    let p = cocycle.p_minus;
    let first = cocycle
        .times
        .iter()
        .position(|&t| t >= -window_t - slack)
        .unwrap_or(0);
    let last = cocycle
        .times
        .iter()
        .rposition(|&t| t <= window_t + slack)
        .unwrap_or(cocycle.len() - 1);

    let mut rates = Vec::with_capacity(d_grid.len());
    let mut worst_s = f64::NEG_INFINITY;
    let mut worst_u = f64::INFINITY;
    let mut t0_count = 0;
    for &d in d_grid {
        let steps = (d / h).round() as usize;
        let starts: Vec<usize> = (first..=last)
            .step_by(T0_STRIDE)
            .filter(|&a| a + steps <= last)
            .collect();
        t0_count = t0_count.max(starts.len());
        let len = steps as f64 * h;
        let (s, u) = starts
            .par_iter()
            .map(|&a| {
                let b = a + steps;
                let s = (0..p)
                    .map(|j| cocycle.window_integral(j, a, b) / len)
                    .fold(f64::NEG_INFINITY, f64::max);
                let u = (p..k)
                    .map(|j| cocycle.window_integral(j, a, b) / len)
                    .fold(f64::INFINITY, f64::min);
                (s, u)
            })
            .reduce(
                || (f64::NEG_INFINITY, f64::INFINITY),
                |x, y| (x.0.max(y.0), x.1.min(y.1)),
            );
        if starts.is_empty() {
            rates.push(f64::NEG_INFINITY);
            continue;
        }
        worst_s = worst_s.max(s);
        worst_u = worst_u.min(u);
        rates.push((-s).min(u));
    }
    // eta(d) = worst margin over all lengths ≥ d
    let mut order: Vec<usize> = (0..d_grid.len()).collect();
    order.sort_by(|&a, &b| d_grid[a].total_cmp(&d_grid[b]));
    let mut best = None;
    for (pos, &i) in order.iter().enumerate() {
        let eta = order[pos..].iter().map(|&j| rates[j]).fold(f64::INFINITY, f64::min);
        if eta > 0.0 && eta.is_finite() {
            best = Some((d_grid[i], eta));
            break;
        }
    }
    let (d_hat, eta_hat, pass) = match best {
        Some((d, e)) => (d, e, true),
        None => (required, rates.iter().cloned().fold(f64::INFINITY, f64::min), false),
    };
    Ok(HyperbolicityCertificate {
        eta_hat,
        d_hat,
        window_t,
        pass,
        worst_stable_average: worst_s,
        worst_unstable_average: worst_u,
        d_grid: d_grid.to_vec(),
        rate_by_length: rates,
        t0_stride: T0_STRIDE as f64 * h,
        t0_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyConstants {
    pub eta_a: f64,
    pub xi_a: f64,
    pub tail_bound: f64,
    /// Time at which the truncated double integral is largest.
    pub xi_argmax: f64,
    /// Set when `tail_bound` exceeds 1% of `xi_a`.
    pub tail_flagged: bool,
}

/// Green-kernel mass `Σ_{k≤p₋} ∫_{t₀}^{t} e^{Ω_k(t)−Ω_k(s)} ds + Σ_{k>p₋} ∫_t^{t_N} e^{Ω_k(t)−Ω_k(s)} ds`
/// at every grid time, for `Ω_k` piecewise linear on a uniform grid.
pub fn xi_profile(log_growth: &[Vec<f64>], h: f64, p_minus: usize) -> Vec<f64> {
    let m = log_growth.len();
    let k = log_growth.first().map_or(0, |v| v.len());
    let mut total = vec![0.0; m];
    // ∫_0^1 e^{Δ u} du, stable near Δ = 0
    let phi = |d: f64| if d.abs() < 1e-12 { 1.0 + 0.5 * d } else { d.exp_m1() / d };
    for j in 0..k {
        if j < p_minus {
            let mut acc = 0.0;
            for i in 0..m {
                if i > 0 {
                    let d = log_growth[i][j] - log_growth[i - 1][j];
                    acc = d.exp() * acc + h * phi(d);
                }
                total[i] += acc;
            }
        } else {
            let mut acc = 0.0;
            for i in (0..m).rev() {
                if i + 1 < m {
                    let d = log_growth[i + 1][j] - log_growth[i][j];
                    acc = (-d).exp() * acc + h * phi(-d);
                }
                total[i] += acc;
            }
        }
    }
    total
}

pub fn dichotomy_constants(
    cocycle: &ReducedCocycle,
    certificate: &HyperbolicityCertificate,
) -> Result<DichotomyConstants> {
    if !certificate.pass || !(certificate.eta_hat > 0.0) {
        return Err(LiaoError::Precondition(
            "dichotomy constants need a passing hyperbolicity certificate".into(),
        ));
    }
    let eta_a = cocycle.entry_sum_bound();
    let profile = xi_profile(&cocycle.log_growth, cocycle.h, cocycle.p_minus);
    let (arg, xi_a) = profile
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let (lo, hi) = cocycle.span();
    let t = cocycle.times[arg];
    let dist = (t - lo).min(hi - t);
    let k = cocycle.dimension() as f64;
    let tail_bound = k * (-certificate.eta_hat * dist).exp() / certificate.eta_hat;
    if !(xi_a.is_finite() && eta_a.is_finite()) {
        return Err(LiaoError::Overflow("dichotomy constants".into()));
    }
    Ok(DichotomyConstants {
        eta_a,
        xi_a,
        tail_bound,
        xi_argmax: t,
        tail_flagged: tail_bound > 0.01 * xi_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v))
    }

    #[test]
    fn single_point_grid() {
        let c = ReducedCocycle::from_step_factors(vec![0.0], 1e-3, &[], 0).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.r_samples[0].is_empty());
        let c = ReducedCocycle::from_step_factors(vec![0.0, 0.1], 0.1, &[DMatrix::identity(2, 2)], 1).unwrap();
        assert_eq!(c.r_samples[0], DMatrix::zeros(2, 2));
        assert_eq!(c.c_accum[1], DMatrix::identity(2, 2));
    }

    #[test]
    fn non_triangular_factor_rejected() {
        let mut f = DMatrix::identity(2, 2);
        f[(1, 0)] = 1e-6;
        let err = ReducedCocycle::from_step_factors(vec![0.0, 0.1], 0.1, &[f], 1).unwrap_err();
        assert!(matches!(err, LiaoError::Inconsistent(_)));
    }

    #[test]
    fn constant_example_certificate_and_constants() {
        let c = ReducedCocycle::constant(&diag(&[-1.0, 1.0]), (-40.0, 40.0), 1e-2, 1).unwrap();
        let cert = certify_hyperbolic(&c, &DEFAULT_D_GRID, 10.0).unwrap();
        assert!(cert.pass);
        assert!((cert.eta_hat - 1.0).abs() < 1e-9);
        let k = dichotomy_constants(&c, &cert).unwrap();
        assert!((k.eta_a - 2.0).abs() < 1e-9);
        assert!((k.xi_a - 2.0).abs() < 1e-9);
        assert!(k.tail_bound <= 1e-10);
    }

    #[test]
    fn binding_rate_is_smallest_magnitude() {
        let c = ReducedCocycle::constant(&diag(&[-3.0, 2.0]), (-12.0, 12.0), 1e-2, 1).unwrap();
        let cert = certify_hyperbolic(&c, &DEFAULT_D_GRID, 10.0).unwrap();
        assert!((cert.eta_hat - 2.0).abs() < 1e-9);
    }

    #[test]
    fn neutral_direction_fails() {
        let c = ReducedCocycle::constant(&diag(&[0.0, 1.0]), (-12.0, 12.0), 1e-2, 1).unwrap();
        assert!(!certify_hyperbolic(&c, &DEFAULT_D_GRID, 10.0).unwrap().pass);
        assert!(matches!(
            certify_hyperbolic(&c, &DEFAULT_D_GRID, 5.0),
            Err(LiaoError::InsufficientWindow { .. })
        ));
    }

    #[test]
    fn xi_for_pure_unstable_and_scaled_rates() {
        let c = ReducedCocycle::constant(&diag(&[1.0]), (-40.0, 40.0), 1e-2, 0).unwrap();
        let cert = certify_hyperbolic(&c, &DEFAULT_D_GRID, 10.0).unwrap();
        assert!((dichotomy_constants(&c, &cert).unwrap().xi_a - 1.0).abs() < 1e-9);
        let c2 = ReducedCocycle::constant(&diag(&[-2.0, 2.0]), (-40.0, 40.0), 1e-2, 1).unwrap();
        let cert2 = certify_hyperbolic(&c2, &DEFAULT_D_GRID, 10.0).unwrap();
        assert!((dichotomy_constants(&c2, &cert2).unwrap().xi_a - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generator_formula_on_example() {
        let spec = VectorFieldSpec::parse("S", &["1", "y", "-z"]).unwrap();
        let frame = TransversalFrame::new(
            nalgebra::DVector::zeros(3),
            DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        );
        assert_eq!(transversal_generator(&spec, &frame).unwrap(), diag(&[-1.0, 1.0]));
    }
}
