//! Bounded solutions of `ż = A(t)z + f(t, z)` with `A` upper triangular and
//! hyperbolic with index `p₋`, the Δ map and its ε bound.
//!
//! The finite window `[−T, T]` stands in for the real line. Components are
//! solved from the last to the first: component `k` sees the already computed
//! `z_j`, `j > k`, as forcing and solves a scalar equation with its own Green
//! kernel, forward from `−T` when `k < p₋` and backward from `T` otherwise.
//! The scalar solves use RK4 with step `2·hn`, so coefficients are only ever
//! sampled on the grid `t_i = i·hn`; odd nodes are filled by interpolation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiaoError, Result};
use crate::field::integrator::{self, IntegratorOptions};
use crate::linalg::entry_sum;
use crate::reduced::xi_profile;

pub type CoefficientFn<'a> = Arc<dyn Fn(f64) -> Result<DMatrix<f64>> + Send + Sync + 'a>;
pub type ForcingFn<'a> = Arc<dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// Perturbed trajectories larger than this are not trusted by [`delta_map`].
/// Smallest defect limit; below this the stencil and the RK4 sweep, not the
/// Picard tolerance, set the residual.
pub const DEFECT_FLOOR: f64 = 1e-9;

pub const DELTA_BLOWUP: f64 = 1e12;

#[derive(Clone)]
pub struct DichotomyProblem<'a> {
    pub p: usize,
    pub p_minus: usize,
    pub a: CoefficientFn<'a>,
    pub f: ForcingFn<'a>,
    pub eta_a: f64,
    pub xi_a: f64,
    pub eta_f: f64,
    pub l_f: f64,
    /// Half-width `T` of the window.
    pub horizon: f64,
    /// Grid spacing `hn`; the window is rounded out to an even number of steps per side.
    pub step: f64,
    /// Exponential rate used for the reported truncation bound.
    pub rate: f64,
    /// `false` when `f` ignores `z`; the solve is then a single kernel application.
    pub state_dependent: bool,
}

impl std::fmt::Debug for DichotomyProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DichotomyProblem")
            .field("p", &self.p)
            .field("p_minus", &self.p_minus)
            .field("eta_a", &self.eta_a)
            .field("xi_a", &self.xi_a)
            .field("eta_f", &self.eta_f)
            .field("l_f", &self.l_f)
            .field("horizon", &self.horizon)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl<'a> DichotomyProblem<'a> {
    pub fn new<A, F>(p: usize, p_minus: usize, a: A, f: F) -> Self
    where
        A: Fn(f64) -> Result<DMatrix<f64>> + Send + Sync + 'a,
        F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a,
    {
        DichotomyProblem {
            p,
            p_minus,
            a: Arc::new(a),
            f: Arc::new(f),
            eta_a: 0.0,
            xi_a: 0.0,
            eta_f: 0.0,
            l_f: 0.0,
            horizon: 40.0,
            step: 1e-2,
            rate: 1.0,
            state_dependent: true,
        }
    }

    pub fn with_constants(mut self, eta_a: f64, xi_a: f64, eta_f: f64, l_f: f64) -> Self {
        self.eta_a = eta_a;
        self.xi_a = xi_a;
        self.eta_f = eta_f;
        self.l_f = l_f;
        self
    }

    pub fn with_window(mut self, horizon: f64, step: f64) -> Self {
        self.horizon = horizon;
        self.step = step;
        self
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn state_independent(mut self) -> Self {
        self.state_dependent = false;
        self
    }

    /// Half the number of grid intervals; always even so `t = 0` is an RK4 node.
    fn half_nodes(&self) -> usize {
        let n = (self.horizon / self.step - 1e-9).ceil().max(2.0) as usize;
        n + n % 2
    }

    /// Grid times `(i − N)·hn`, `i = 0..=2N`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.half_nodes() as i64;
        (-n..=n).map(|i| i as f64 * self.step).collect()
    }

    fn check(&self) -> Result<()> {
        if self.p == 0 || self.p_minus > self.p {
            return Err(LiaoError::Validation(format!(
                "index p_minus = {} outside 0..={}",
                self.p_minus, self.p
            )));
        }
        if !(self.step > 0.0 && self.horizon > 0.0) {
            return Err(LiaoError::Validation("window and step must be positive".into()));
        }
        Ok(())
    }

    /// `ξ_A(1 + 2η_Aξ_A)^p`, the norm bound of the triangular Green operator.
    pub fn green_bound(&self) -> f64 {
        self.xi_a * (1.0 + 2.0 * self.eta_a * self.xi_a).powi(self.p as i32)
    }
}

/// `ε = η_f ξ_A (1 + 2η_Aξ_A)^p` and the homeomorphism threshold `1/(ξ_A(1 + η_Aξ_A)^p)`.
pub fn epsilon_bound(eta_a: f64, xi_a: f64, eta_f: f64, p: usize) -> (f64, f64) {
    let eps = eta_f * xi_a * (1.0 + 2.0 * eta_a * xi_a).powi(p as i32);
    let threshold = 1.0 / (xi_a * (1.0 + eta_a * xi_a).powi(p as i32));
    (eps, threshold)
}

/// Coefficients sampled on the grid.
struct Sampled {
    times: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    h: f64,
}

impl Sampled {
    fn new(problem: &DichotomyProblem<'_>) -> Result<Self> {
        let times = problem.grid();
        let a = times
            .iter()
            .map(|&t| (problem.a)(t))
            .collect::<Result<Vec<_>>>()?;
        if a.iter().any(|m| m.shape() != (problem.p, problem.p)) {
            return Err(LiaoError::Validation("coefficient matrix has the wrong shape".into()));
        }
        Ok(Sampled {
            times,
            a,
            h: problem.step,
        })
    }

    fn len(&self) -> usize {
        self.times.len()
    }

    fn center(&self) -> usize {
        self.times.len() / 2
    }

    fn forcing(&self, problem: &DichotomyProblem<'_>, z: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        self.times
            .par_iter()
            .zip(z.par_iter())
            .map(|(&t, zi)| (problem.f)(t, zi))
            .collect()
    }

    /// One application of the Green operator to the forcing `g`.
    fn green(&self, p_minus: usize, g: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let m = self.len();
        let p = g[0].len();
        let big = 2.0 * self.h;
        let mut z = vec![DVector::zeros(p); m];
        let mut coupling = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut zk = vec![0.0; m];
        for k in (0..p).rev() {
            for i in 0..m {
                let a = &self.a[i];
                diag[i] = a[(k, k)];
                coupling[i] = g[i][k] + ((k + 1)..p).map(|j| a[(k, j)] * z[i][j]).sum::<f64>();
            }
            let rk4 = |z0: f64, i0: usize, i2: usize, hstep: f64| {
                let i1 = (i0 + i2) / 2;
                let f = |i: usize, y: f64| diag[i] * y + coupling[i];
                let k1 = f(i0, z0);
                let k2 = f(i1, z0 + 0.5 * hstep * k1);
                let k3 = f(i1, z0 + 0.5 * hstep * k2);
                let k4 = f(i2, z0 + hstep * k3);
                z0 + hstep / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            };
            if k < p_minus {
                zk[0] = 0.0;
                let mut i = 0;
                while i + 2 < m {
                    zk[i + 2] = rk4(zk[i], i, i + 2, big);
                    i += 2;
                }
            } else {
                zk[m - 1] = 0.0;
                let mut i = m - 1;
                while i >= 2 {
                    zk[i - 2] = rk4(zk[i], i, i - 2, -big);
                    i -= 2;
                }
            }
            let mut i = 1;
            while i < m {
                zk[i] = if i >= 5 && i + 5 < m {
                    // sixth-order midpoint rule from the surrounding even nodes
                    (3.0 * (zk[i - 5] + zk[i + 5]) - 25.0 * (zk[i - 3] + zk[i + 3])
                        + 150.0 * (zk[i - 1] + zk[i + 1]))
                        / 256.0
                } else {
                    let d0 = diag[i - 1] * zk[i - 1] + coupling[i - 1];
                    let d1 = diag[i + 1] * zk[i + 1] + coupling[i + 1];
                    0.5 * (zk[i - 1] + zk[i + 1]) + big * (d0 - d1) / 8.0
                };
                i += 2;
            }
            for i in 0..m {
                z[i][k] = zk[i];
            }
        }
        z
    }

    /// Largest `‖ż − A z − g‖` at the even nodes of the central half of the
    /// window, `ż` by the sixth-order central stencil. The outer quarters hold
    /// the start-up layers of the truncated problem and are skipped.
    fn defect(&self, z: &[DVector<f64>], g: &[DVector<f64>]) -> f64 {
        let big = 2.0 * self.h;
        let m = self.len();
        let c = self.center();
        let quarter = (c / 2) & !1;
        let mut worst: f64 = 0.0;
        let mut i = (c - quarter).max(6);
        while i + 6 < m && i <= c + quarter {
            let dz = ((&z[i + 6] - &z[i - 6]) - (&z[i + 4] - &z[i - 4]) * 9.0 + (&z[i + 2] - &z[i - 2]) * 45.0)
                / (60.0 * big);
            let r = dz - &self.a[i] * &z[i] - &g[i];
            worst = worst.max(r.amax());
            i += 2;
        }
        worst
    }

    /// Value at an arbitrary `t` inside the grid, cubic Hermite between nodes.
    fn interpolate(&self, z: &[DVector<f64>], g: &[DVector<f64>], t: f64) -> DVector<f64> {
        let lo = self.times[0];
        let s = ((t - lo) / self.h).clamp(0.0, (self.len() - 1) as f64);
        let i = (s.floor() as usize).min(self.len() - 2);
        let u = s - i as f64;
        if u == 0.0 {
            return z[i].clone();
        }
        let d0 = &self.a[i] * &z[i] + &g[i];
        let d1 = &self.a[i + 1] * &z[i + 1] + &g[i + 1];
        let y = integrator::hermite(
            self.times[i],
            z[i].as_slice(),
            d0.as_slice(),
            self.times[i + 1],
            z[i + 1].as_slice(),
            d1.as_slice(),
            t,
        );
        DVector::from_vec(y)
    }
}

fn sup_norm(z: &[DVector<f64>]) -> f64 {
    z.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

fn sup_change(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct BoundedSolution {
    pub times: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    /// `z(0)`.
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Sup-norm change of the last Picard step.
    pub increment: f64,
    /// Last observed ratio of successive increments.
    pub contraction: f64,
    pub defect: f64,
    pub horizon: f64,
    /// `η_f · ξ_A(1 + 2η_Aξ_A)^p`.
    pub norm_bound: f64,
    /// `norm_bound · e^{−rate·T}`, the truncation error estimate at `t = 0`.
    pub tail_bound: f64,
}

impl BoundedSolution {
    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.z)
    }
}

/// Picard iteration from `z ≡ 0`.
pub fn bounded_solution(problem: &DichotomyProblem<'_>, tol: f64, max_iter: usize) -> Result<BoundedSolution> {
    bounded_solution_from(problem, tol, max_iter, None)
}

/// Picard iteration from an optional initial guess, given as a function of `t`.
pub fn bounded_solution_from(
    problem: &DichotomyProblem<'_>,
    tol: f64,
    max_iter: usize,
    initial: Option<&dyn Fn(f64) -> DVector<f64>>,
) -> Result<BoundedSolution> {
    problem.check()?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(LiaoError::Validation("tolerance and iteration budget must be positive".into()));
    }
    if problem.state_dependent && !(problem.l_f * problem.xi_a < 1.0) {
        return Err(LiaoError::Precondition(format!(
            "L_f·ξ_A = {} is not below 1",
            problem.l_f * problem.xi_a
        )));
    }
    let grid = Sampled::new(problem)?;
    let p = problem.p;
    let mut z: Vec<DVector<f64>> = match initial {
        Some(f) => grid.times.iter().map(|&t| f(t)).collect(),
        None => vec![DVector::zeros(p); grid.len()],
    };
    let mut g = grid.forcing(problem, &z)?;
    let mut increment = f64::INFINITY;
    let mut previous = f64::INFINITY;
    let mut ratio = 0.0;
    let mut iterations = 0;
    let budget = if problem.state_dependent { max_iter } else { 1 };
    while iterations < budget {
        let next = grid.green(problem.p_minus, &g);
        if next.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(LiaoError::Overflow("the bounded-solution iterate".into()));
        }
        increment = sup_change(&next, &z);
        z = next;
        iterations += 1;
        if !problem.state_dependent {
            break;
        }
        g = grid.forcing(problem, &z)?;
        if previous.is_finite() && previous > 0.0 {
            ratio = increment / previous;
        }
        previous = increment;
        if increment <= tol * (1.0 - ratio.min(0.99)) {
            break;
        }
    }
    if problem.state_dependent && !(increment <= tol * (1.0 - ratio.min(0.99))) {
        return Err(LiaoError::NonContraction {
            iterations,
            ratio,
        });
    }
    let defect = grid.defect(&z, &g);
    let limit = (10.0 * tol).max(DEFECT_FLOOR);
    if !(defect <= limit) {
        return Err(LiaoError::Defect { defect, limit });
    }
    let norm_bound = problem.eta_f * problem.green_bound();
    let x = z[grid.center()].clone();
    Ok(BoundedSolution {
        times: grid.times,
        x,
        z,
        iterations,
        increment,
        contraction: ratio,
        defect,
        horizon: problem.horizon,
        norm_bound,
        tail_bound: norm_bound * (-problem.rate * problem.horizon).exp(),
    })
}

/// Solutions of `ż = A z (+ f(t, z))` through `(s, u)`, sampled at `times`.
pub fn solve_ivp(
    problem: &DichotomyProblem<'_>,
    s: f64,
    u: &DVector<f64>,
    times: &[f64],
    with_forcing: bool,
    tol: f64,
) -> Result<Vec<DVector<f64>>> {
    let p = problem.p;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let z = DVector::from_column_slice(y);
        let mut d = (problem.a)(t)? * &z;
        if with_forcing {
            d += (problem.f)(t, &z)?;
        }
        dy.copy_from_slice(d.as_slice());
        Ok(())
    };
    let opts = IntegratorOptions::new(tol)
        .with_blowup(DELTA_BLOWUP * (1.0 + u.amax()), p)
        .with_max_step(problem.step.max(1e-3) * 50.0);
    let mut out = vec![DVector::zeros(p); times.len()];
    let mut fwd: Vec<(usize, f64)> = times.iter().cloned().enumerate().filter(|&(_, t)| t >= s).collect();
    let mut back: Vec<(usize, f64)> = times.iter().cloned().enumerate().filter(|&(_, t)| t < s).collect();
    fwd.sort_by(|a, b| a.1.total_cmp(&b.1));
    back.sort_by(|a, b| b.1.total_cmp(&a.1));
    for side in [fwd, back] {
        if side.is_empty() {
            continue;
        }
        let stops: Vec<f64> = side.iter().map(|x| x.1).collect();
        let sol = integrator::integrate(rhs, s, u.as_slice(), &stops, &opts, false).map_err(|e| match e {
            LiaoError::Divergence { last_time, norm } => LiaoError::UnreliableDelta(format!(
                "solution through s = {s} reaches {norm:e} near t = {last_time}"
            )),
            other => other,
        })?;
        // sol.states[0] is the start; stops equal to s repeat it
        for (j, (idx, _)) in side.iter().enumerate() {
            out[*idx] = DVector::from_column_slice(&sol.states[j + 1]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DeltaValue {
    pub s: f64,
    pub u: DVector<f64>,
    /// `Δ_s(u)`.
    pub image: DVector<f64>,
    /// Sup norm of the perturbed solution over the window.
    pub trajectory_sup: f64,
}

/// `Δ_s(u) = u − w(s)`, with `w` the bounded solution of `ẇ = Aw + f(t, z_{A,f}(t; s, u))`.
pub fn delta_map(problem: &DichotomyProblem<'_>, s: f64, u: &DVector<f64>, tol: f64) -> Result<DeltaValue> {
    problem.check()?;
    let grid = Sampled::new(problem)?;
    let (lo, hi) = (grid.times[0], grid.times[grid.len() - 1]);
    if s < lo || s > hi || u.len() != problem.p {
        return Err(LiaoError::Precondition(format!("(s, u) outside the window [{lo}, {hi}]")));
    }
    let z = solve_ivp(problem, s, u, &grid.times, true, tol)?;
    let g = grid.forcing(problem, &z)?;
    let w = grid.green(problem.p_minus, &g);
    if w.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(LiaoError::Overflow("the Δ-map kernel".into()));
    }
    let ws = grid.interpolate(&w, &g, s);
    Ok(DeltaValue {
        s,
        u: u.clone(),
        image: u - ws,
        trajectory_sup: sup_norm(&z),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub pass: bool,
    pub observed: f64,
    pub claimed: f64,
    /// Time (and state, when relevant) of the worst sample.
    pub witness: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub conditions: Vec<ConditionCheck>,
    pub xi_tail_bound: f64,
}

impl ClassReport {
    pub fn pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Checks membership in the triangular class by sampling; `z` is
/// drawn from the ball of radius `z_radius`.
pub fn validate_class<R: Rng>(
    problem: &DichotomyProblem<'_>,
    sample_budget: usize,
    z_radius: f64,
    rng: &mut R,
) -> Result<ClassReport> {
    problem.check()?;
    if sample_budget < 100 {
        return Err(LiaoError::Validation("sample budget must be at least 100".into()));
    }
    let grid = Sampled::new(problem)?;
    let p = problem.p;

    let mut below = (0.0f64, 0.0);
    let mut sum = (0.0f64, 0.0);
    for (t, a) in grid.times.iter().zip(&grid.a) {
        let b = crate::linalg::below_diagonal_max(a);
        if b > below.0 {
            below = (b, *t);
        }
        let s = entry_sum(a);
        if s > sum.0 {
            sum = (s, *t);
        }
    }

    // (c): Ω_k by the trapezoid rule on the diagonal
    let m = grid.len();
    let mut omega = vec![vec![0.0; p]; m];
    let c = grid.center();
    for i in c..m - 1 {
        for k in 0..p {
            omega[i + 1][k] = omega[i][k] + 0.5 * grid.h * (grid.a[i][(k, k)] + grid.a[i + 1][(k, k)]);
        }
    }
    for i in (1..=c).rev() {
        for k in 0..p {
            omega[i - 1][k] = omega[i][k] - 0.5 * grid.h * (grid.a[i][(k, k)] + grid.a[i - 1][(k, k)]);
        }
    }
    let profile = xi_profile(&omega, grid.h, problem.p_minus);
    let (arg, xi) = profile
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let span = grid.times[m - 1] - grid.times[0];
    let rate = (0..p)
        .map(|k| (omega[m - 1][k] - omega[0][k]).abs() / span)
        .fold(f64::INFINITY, f64::min);
    let dist = (grid.times[arg] - grid.times[0]).min(grid.times[m - 1] - grid.times[arg]);
    let xi_tail = if rate > 0.0 {
        p as f64 * (-rate * dist).exp() / rate
    } else {
        f64::INFINITY
    };

    let mut f_sup = (0.0f64, vec![]);
    let mut lip = (0.0f64, vec![]);
    let (lo, hi) = (grid.times[0], grid.times[m - 1]);
    let draw = |rng: &mut R| -> DVector<f64> {
        let v = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n == 0.0 {
            v
        } else {
            v * (z_radius * rng.random::<f64>().powf(1.0 / p as f64) / n)
        }
    };
    for _ in 0..sample_budget {
        let t = rng.random_range(lo..=hi);
        let z1 = draw(rng);
        let z2 = draw(rng);
        let f1 = (problem.f)(t, &z1)?;
        let f2 = (problem.f)(t, &z2)?;
        for (fz, zz) in [(&f1, &z1), (&f2, &z2)] {
            if fz.norm() > f_sup.0 {
                let mut w = vec![t];
                w.extend(zz.iter());
                f_sup = (fz.norm(), w);
            }
        }
        let dz = (&z1 - &z2).norm();
        if dz > 0.0 {
            let q = (&f1 - &f2).norm() / dz;
            if q > lip.0 {
                let mut w = vec![t];
                w.extend(z1.iter());
                w.extend(z2.iter());
                lip = (q, w);
            }
        }
    }

    let rel = 1.0 + 1e-6;
    let conditions = vec![
        ConditionCheck {
            name: "triangular".into(),
            pass: below.0 <= 1e-12,
            observed: below.0,
            claimed: 0.0,
            witness: (below.0 > 0.0).then(|| vec![below.1]),
        },
        ConditionCheck {
            name: "bounded".into(),
            pass: sum.0 <= problem.eta_a * rel,
            observed: sum.0,
            claimed: problem.eta_a,
            witness: Some(vec![sum.1]),
        },
        ConditionCheck {
            name: "hyperbolic".into(),
            pass: rate > 0.0 && xi <= problem.xi_a * rel,
            observed: xi,
            claimed: problem.xi_a,
            witness: Some(vec![grid.times[arg]]),
        },
        ConditionCheck {
            name: "forcing_bounded".into(),
            pass: f_sup.0 <= problem.eta_f * rel,
            observed: f_sup.0,
            claimed: problem.eta_f,
            witness: Some(f_sup.1),
        },
        ConditionCheck {
            name: "lipschitz".into(),
            pass: lip.0 <= problem.l_f * rel,
            observed: lip.0,
            claimed: problem.l_f,
            witness: Some(lip.1),
        },
    ];
    Ok(ClassReport {
        conditions,
        xi_tail_bound: xi_tail,
    })
}

#[derive(Debug, Clone)]
pub struct ContinuityTable {
    pub lambdas: Vec<f64>,
    /// `Δ*(λ)`, or `None` where the solve failed.
    pub values: Vec<Option<DVector<f64>>>,
    pub failures: Vec<(f64, String)>,
    /// `(spacing, max ‖Δ*(λ) − Δ*(λ′)‖)` for every multiple of the grid spacing.
    pub modulus: Vec<(f64, f64)>,
}

/// `λ ↦ Δ*(λ) = x(λ)` over a uniform parameter grid.
pub fn continuity_probe<'a, F>(family: F, lambdas: &[f64], tol: f64, max_iter: usize) -> ContinuityTable
where
    F: Fn(f64) -> DichotomyProblem<'a> + Sync,
{
    let results: Vec<Result<DVector<f64>>> = lambdas
        .par_iter()
        .map(|&l| bounded_solution(&family(l), tol, max_iter).map(|s| s.x))
        .collect();
    let mut values = Vec::with_capacity(lambdas.len());
    let mut failures = Vec::new();
    for (l, r) in lambdas.iter().zip(results) {
        match r {
            Ok(x) => values.push(Some(x)),
            Err(e) => {
                failures.push((*l, e.to_string()));
                values.push(None);
            }
        }
    }
    let mut modulus = Vec::new();
    for m in 1..lambdas.len() {
        let mut worst: f64 = 0.0;
        let mut spacing: f64 = 0.0;
        for i in 0..lambdas.len() - m {
            spacing = spacing.max((lambdas[i + m] - lambdas[i]).abs());
            if let (Some(a), Some(b)) = (&values[i], &values[i + m]) {
                worst = worst.max((a - b).norm());
            }
        }
        modulus.push((spacing, worst));
    }
    ContinuityTable {
        lambdas: lambdas.to_vec(),
        values,
        failures,
        modulus,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn saddle<'a>(f: impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a) -> DichotomyProblem<'a> {
        DichotomyProblem::new(2, 1, |_| Ok(DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]))), f)
            .with_constants(2.0, 2.0, 0.0, 0.0)
    }

    #[test]
    fn epsilon_formula() {
        let (e, l) = epsilon_bound(2.0, 2.0, 0.01, 2);
        assert!((e - 1.62).abs() < 1e-12);
        assert!((l - 0.02).abs() < 1e-15);
        assert_eq!(epsilon_bound(2.0, 2.0, 0.0, 2).0, 0.0);
        assert_eq!(epsilon_bound(1.0, 1.0, 1.0, 1), (3.0, 0.5));
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let sol = bounded_solution(&saddle(|_, _| Ok(DVector::zeros(2))), 1e-10, 30).unwrap();
        assert_eq!(sol.sup_norm(), 0.0);
    }

    #[test]
    fn constant_forcing_single_pass() {
        let pr = saddle(|_, _| Ok(DVector::from_vec(vec![0.0, 0.01])))
            .with_constants(2.0, 2.0, 0.01, 0.0)
            .state_independent();
        let sol = bounded_solution(&pr, 1e-10, 30).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.x[1] + 0.01).abs() < 1e-12);
        assert!(sol.x[0].abs() < 1e-14);
        assert!(sol.sup_norm() <= sol.norm_bound);
    }

    #[test]
    fn triangular_coupling() {
        // ż1 = -z1 + z2, ż2 = z2 + 1: z2 = -1, z1 = -1
        let pr = DichotomyProblem::new(
            2,
            1,
            |_| Ok(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 1.0])),
            |_, _| Ok(DVector::from_vec(vec![0.0, 1.0])),
        )
        .with_window(30.0, 0.01)
        .state_independent();
        let sol = bounded_solution(&pr, 1e-10, 5).unwrap();
        assert!((sol.x[0] + 1.0).abs() < 1e-10 && (sol.x[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn class_witnesses() {
        let mut rng = rand::rng();
        let bad = DichotomyProblem::new(
            2,
            1,
            |_| Ok(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.5, 1.0])),
            |_, _| Ok(DVector::zeros(2)),
        )
        .with_constants(3.0, 2.0, 0.0, 0.0)
        .with_window(10.0, 0.05);
        let r = validate_class(&bad, 100, 1.0, &mut rng).unwrap();
        assert!(!r.condition("triangular").unwrap().pass);
        assert!(r.condition("triangular").unwrap().witness.is_some());
    }
}
