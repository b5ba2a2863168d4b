//! The conjugacy `H_V(w) = w + h_{V,ξ}(w)` between orbits of `S` on a sampled
//! invariant set and orbits of a perturbation `V`, with its checks.
//!
//! For each sample the transversal coordinates of the `V`-orbit shadowing the
//! `S`-orbit of `w` are the bounded solution of `ẏ = R*(t)y + Ṽ(t, y)`, where
//! `Ṽ` is the bump-cut remainder of the standard system of `V`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dichotomy::{bounded_solution, BoundedSolution, DichotomyProblem};
use crate::error::{LiaoError, Result};
use crate::field::VectorFieldSpec;
use crate::frame::{frame_transport, stable_first_frame, TransversalFrame};
use crate::reduced::ReducedCocycle;
use crate::standard::{bump_modify, chart_solution, remainder_stats, RemainderStats, SectionChart, StandardSystem, BUMP_LIPSCHITZ};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugacyConfig {
    pub epsilon: f64,
    pub xi: f64,
    /// `η_Λ`, sup of `Σ|R*_ij|` over the sampled set.
    pub eta_lambda: f64,
    /// `ξ_Λ`, sup of the Green-kernel mass over the sampled set.
    pub xi_lambda: f64,
    pub rho_xi: f64,
    pub kappa: f64,
    /// Dichotomy rate used for truncation bounds.
    pub rate: f64,
    pub p_minus: usize,
    pub horizon: f64,
    pub h: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Upper limit for the estimated chart radius.
    pub max_radius: f64,
    /// Time over which the stable-first frame is probed.
    pub probe_time: f64,
    /// Section times at which equivariance is checked.
    pub equivariance_times: Vec<f64>,
    /// Random pairs per probed node in the Lipschitz estimate.
    pub lipschitz_pairs: usize,
    /// Grid nodes between remainder probes.
    pub probe_stride: usize,
    /// Samples re-solved with a rotated frame.
    pub frame_checks: usize,
    /// Enforce the remainder-size inequality instead of only reporting it.
    pub strict_neighborhood: bool,
    pub seed: u64,
}

impl ConjugacyConfig {
    /// `ρ_ξ` and `κ` from `η_Λ`, `ξ_Λ` and the transversal dimension `n − 1`.
    pub fn new(epsilon: f64, xi: f64, eta_lambda: f64, xi_lambda: f64, rate: f64, n: usize, p_minus: usize) -> Self {
        let denom = 4.0 * xi_lambda * (1.0 + 2.0 * eta_lambda * xi_lambda).powi(n as i32 - 1);
        ConjugacyConfig {
            epsilon,
            xi,
            eta_lambda,
            xi_lambda,
            rho_xi: xi / denom,
            kappa: 1.0 / denom,
            rate,
            p_minus,
            horizon: 25.0,
            h: 1e-2,
            tol: 1e-10,
            max_iter: 50,
            max_radius: 1.0,
            probe_time: 10.0,
            equivariance_times: vec![-10.0, -5.0, 5.0, 10.0],
            lipschitz_pairs: 4,
            probe_stride: 50,
            frame_checks: 5,
            strict_neighborhood: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("xi", self.xi),
            ("xi_lambda", self.xi_lambda),
            ("rate", self.rate),
            ("horizon", self.horizon),
            ("h", self.h),
            ("tol", self.tol),
            ("max_radius", self.max_radius),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(LiaoError::Validation(format!("{name} must be positive")));
        }
        if !(self.xi < 1.0) {
            return Err(LiaoError::Validation("xi must be below 1".into()));
        }
        if self.kappa * self.xi_lambda > 0.25 * (1.0 + 1e-12) {
            return Err(LiaoError::Validation("kappa·xi_lambda exceeds 1/4".into()));
        }
        Ok(())
    }
}

/// The neighbourhood checklist for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodChecklist {
    pub remainder: RemainderStats,
    /// `sup‖V*_rem‖ ≤ ε·ρ_ξ` over `‖y‖ ≤ ξ`.
    pub remainder_bound: f64,
    pub remainder_ok: bool,
    /// `Lip(V*_rem) ≤ κ`.
    pub lipschitz_ok: bool,
    /// Extra Lipschitz constant contributed by the bump, `3.75·sup‖V*_rem‖/ξ`.
    pub bump_lipschitz: f64,
    pub speed_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleOffset {
    pub w: Vec<f64>,
    /// Column-major `n × (n−1)` frame at `w`.
    pub frame: Vec<f64>,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub sup_z: f64,
    pub iterations: usize,
    pub defect: f64,
    pub chart_radius: f64,
    /// `‖x‖ ≤ min(ε, ξ)/4`.
    pub within_closeness: bool,
    /// `sup‖z‖ ≤ ξ/2`, so the bump never acts on the solution.
    pub within_flat_core: bool,
    /// `|⟨S(w), h⟩| / ‖S(w)‖`.
    pub section_residual: f64,
    pub checklist: NeighborhoodChecklist,
}

impl SampleOffset {
    pub fn image(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.w) + DVector::from_column_slice(&self.h)
    }
}

/// Chart and cocycle along one sample orbit.
pub struct SampleContext {
    pub chart: SectionChart,
    pub cocycle: ReducedCocycle,
}

fn build_context(s: &VectorFieldSpec, w: &DVector<f64>, frame: &TransversalFrame, config: &ConjugacyConfig) -> Result<SampleContext> {
    let half = (config.horizon / config.h - 1e-9).ceil().max(2.0) as i64;
    let half = half + half % 2;
    let extent = half as f64 * config.h;
    let path = frame_transport(s, w, frame, (-extent, extent), config.h)?;
    let cocycle = ReducedCocycle::from_step_factors(path.times.clone(), config.h, &path.step_factors, config.p_minus)?;
    let radius = SectionChart::estimate_radius(&path, config.max_radius, config.probe_stride.max(1) * 4)?;
    if config.xi > radius {
        return Err(LiaoError::Validation(format!(
            "xi = {} exceeds the chart radius {radius}",
            config.xi
        )));
    }
    let chart = SectionChart::new(path, radius)?;
    Ok(SampleContext { chart, cocycle })
}

fn checklist(system: &StandardSystem<'_>, config: &ConjugacyConfig, sample_seed: u64) -> Result<NeighborhoodChecklist> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let indices: Vec<usize> = (0..system.cocycle.len()).step_by(config.probe_stride.max(1)).collect();
    let stats = remainder_stats(system, &indices, config.xi, config.lipschitz_pairs, &mut rng)?;
    let bound = config.epsilon * config.rho_xi;
    Ok(NeighborhoodChecklist {
        remainder: stats,
        remainder_bound: bound,
        remainder_ok: stats.sup_norm <= bound,
        lipschitz_ok: stats.lipschitz <= config.kappa,
        bump_lipschitz: BUMP_LIPSCHITZ * stats.sup_norm / config.xi,
        speed_ok: stats.min_speed >= 0.5 && stats.max_speed <= 2.0,
    })
}

fn solve_in_context(
    v: &VectorFieldSpec,
    ctx: &SampleContext,
    config: &ConjugacyConfig,
    sample_seed: u64,
) -> Result<(BoundedSolution, NeighborhoodChecklist)> {
    let system = StandardSystem::new(&ctx.chart, v, &ctx.cocycle)?;
    let check = checklist(&system, config, sample_seed)?;
    if !check.lipschitz_ok {
        return Err(LiaoError::NeighborhoodViolated {
            inequality: "remainder lipschitz",
            value: check.remainder.lipschitz,
            bound: config.kappa,
        });
    }
    if config.strict_neighborhood && !check.remainder_ok {
        return Err(LiaoError::NeighborhoodViolated {
            inequality: "remainder size",
            value: check.remainder.sup_norm,
            bound: check.remainder_bound,
        });
    }
    let radius = ctx.chart.radius;
    let sys = system;
    let forcing = bump_modify(move |t, y: &DVector<f64>| Ok(sys.evaluate(t, y)?.remainder), config.xi, radius);
    let k = ctx.cocycle.dimension();
    let problem = DichotomyProblem::new(k, config.p_minus, move |t| sys.linear_part(t), forcing)
        .with_constants(
            config.eta_lambda,
            config.xi_lambda,
            check.remainder.sup_norm,
            check.remainder.lipschitz,
        )
        .with_window(config.horizon, config.h)
        .with_rate(config.rate);
    let sol = bounded_solution(&problem, config.tol, config.max_iter)?;
    Ok((sol, check))
}

/// `h_{V,ξ}(w)` with the given frame at `w`.
pub fn conjugacy_offset(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    w: &DVector<f64>,
    frame: &TransversalFrame,
    config: &ConjugacyConfig,
) -> Result<SampleOffset> {
    conjugacy_offset_with_context(s, v, w, frame, config, config.seed).map(|(o, _)| o)
}

fn conjugacy_offset_with_context(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    w: &DVector<f64>,
    frame: &TransversalFrame,
    config: &ConjugacyConfig,
    sample_seed: u64,
) -> Result<(SampleOffset, SampleContext)> {
    config.validate()?;
    if v.dimension() != s.dimension() {
        return Err(LiaoError::Validation("S and V have different dimensions".into()));
    }
    let ctx = build_context(s, w, frame, config)?;
    let (sol, check) = solve_in_context(v, &ctx, config, sample_seed)?;
    let h = &frame.columns * &sol.x;
    let speed = s.eval(w)?;
    let section_residual = speed.dot(&h).abs() / speed.norm();
    let sup_z = sol.sup_norm();
    let offset = SampleOffset {
        w: w.as_slice().to_vec(),
        frame: frame.columns.as_slice().to_vec(),
        within_closeness: sol.x.norm() <= config.epsilon.min(config.xi) / 4.0,
        within_flat_core: sup_z <= config.xi / 2.0,
        x: sol.x.as_slice().to_vec(),
        h: h.as_slice().to_vec(),
        sup_z,
        iterations: sol.iterations,
        defect: sol.defect,
        chart_radius: ctx.chart.radius,
        section_residual,
        checklist: check,
    };
    Ok((offset, ctx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceResidual {
    pub t: f64,
    /// `‖ψ_V(t, H_V(w)) − H_V(t·w)‖`.
    pub residual: f64,
    /// Ambient time taken by the `V`-orbit to reach section time `t`.
    pub ambient_time: f64,
}

/// Compares the chart evolution of `H_V(w)` with independently computed
/// offsets at `φ_t(w)`.
pub fn verify_equivariance(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    offset: &SampleOffset,
    times: &[f64],
    config: &ConjugacyConfig,
) -> Result<Vec<EquivarianceResidual>> {
    let w = DVector::from_column_slice(&offset.w);
    let n = w.len();
    let frame = TransversalFrame::new(w.clone(), DMatrix::from_column_slice(n, n - 1, &offset.frame));
    let ctx = build_context(s, &w, &frame, config)?;
    equivariance_in_context(s, v, offset, &ctx, times, config)
}

fn equivariance_in_context(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    offset: &SampleOffset,
    ctx: &SampleContext,
    times: &[f64],
    config: &ConjugacyConfig,
) -> Result<Vec<EquivarianceResidual>> {
    let (lo, hi) = ctx.chart.span();
    if times.iter().any(|&t| t < lo || t > hi) {
        return Err(LiaoError::Precondition("equivariance times exceed the transported span".into()));
    }
    let system = StandardSystem::new(&ctx.chart, v, &ctx.cocycle)?;
    let x = DVector::from_column_slice(&offset.x);
    let evolved = chart_solution(&system, 0.0, &x, times, config.tol)?;
    times
        .iter()
        .zip(evolved)
        .map(|(&t, (y, tau))| {
            let psi = ctx.chart.embed(t, &y)?;
            let base = ctx.chart.point(t)?.base;
            let frame = stable_first_frame(s, &base, config.probe_time, config.tol)?;
            let other = conjugacy_offset(s, v, &base, &frame, config)?;
            Ok(EquivarianceResidual {
                t,
                residual: (psi - other.image()).norm(),
                ambient_time: tau,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameCheck {
    pub sample: usize,
    pub difference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub min_image_separation: f64,
    pub min_sample_separation: f64,
    /// Pairs `(i, j)` with `‖w_i − w_j‖ ≥ ε` whose images come closer than
    /// `‖w_i − w_j‖ − 2·max‖h‖`.
    pub violations: Vec<(usize, usize)>,
    pub injective: bool,
    /// `2ε / inf‖S‖`, the re-entry time bound for the tube argument.
    pub tube_time: f64,
    pub frame_checks: Vec<FrameCheck>,
    pub max_frame_difference: f64,
    pub frame_independent: bool,
}

/// Frame `γ·diag(Q_s, Q_u)` with random orthogonal blocks.
pub fn rotated_frame<R: Rng>(frame: &TransversalFrame, p_minus: usize, rng: &mut R) -> TransversalFrame {
    let k = frame.dimension();
    let mut q = DMatrix::zeros(k, k);
    for (start, len) in [(0, p_minus), (p_minus, k - p_minus)] {
        if len == 0 {
            continue;
        }
        let a = DMatrix::from_fn(len, len, |_, _| rng.random_range(-1.0..1.0));
        let mut block = a.qr().q();
        if rng.random::<bool>() {
            block.column_mut(0).neg_mut();
        }
        q.view_mut((start, start), (len, len)).copy_from(&block);
    }
    frame.rotated(&q)
}

pub fn verify_injectivity_and_frame_independence(
    offsets: &[SampleOffset],
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    config: &ConjugacyConfig,
) -> Result<InjectivityReport> {
    if offsets.is_empty() {
        return Err(LiaoError::Precondition("no offsets to check".into()));
    }
    let max_h = offsets
        .iter()
        .map(|o| DVector::from_column_slice(&o.h).norm())
        .fold(0.0, f64::max);
    let mut min_image = f64::INFINITY;
    let mut min_sample = f64::INFINITY;
    let mut violations = Vec::new();
    let images: Vec<DVector<f64>> = offsets.iter().map(|o| o.image()).collect();
    for i in 0..offsets.len() {
        for j in (i + 1)..offsets.len() {
            let dw = (DVector::from_column_slice(&offsets[i].w) - DVector::from_column_slice(&offsets[j].w)).norm();
            let dh = (&images[i] - &images[j]).norm();
            min_image = min_image.min(dh);
            min_sample = min_sample.min(dw);
            if dw >= config.epsilon && dh < dw - 2.0 * max_h {
                violations.push((i, j));
            }
        }
    }
    let inf_speed = offsets
        .iter()
        .map(|o| s.eval(&DVector::from_column_slice(&o.w)).map(|v| v.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut picks: Vec<usize> = (0..offsets.len()).collect();
    for i in (1..picks.len()).rev() {
        picks.swap(i, rng.random_range(0..=i));
    }
    picks.truncate(config.frame_checks.min(offsets.len()));
    picks.sort_unstable();
    let frames: Vec<(usize, TransversalFrame)> = picks
        .iter()
        .map(|&i| {
            let o = &offsets[i];
            let w = DVector::from_column_slice(&o.w);
            let n = w.len();
            let f = TransversalFrame::new(w, DMatrix::from_column_slice(n, n - 1, &o.frame));
            (i, rotated_frame(&f, config.p_minus, &mut rng))
        })
        .collect();
    let frame_checks = frames
        .par_iter()
        .map(|(i, f)| {
            let o = conjugacy_offset(s, v, &f.base, f, config)?;
            let diff = (DVector::from_column_slice(&o.h) - DVector::from_column_slice(&offsets[*i].h)).norm();
            Ok(FrameCheck {
                sample: *i,
                difference: diff,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_frame_difference = frame_checks.iter().map(|c| c.difference).fold(0.0, f64::max);
    Ok(InjectivityReport {
        min_image_separation: if offsets.len() > 1 { min_image } else { f64::INFINITY },
        min_sample_separation: if offsets.len() > 1 { min_sample } else { f64::INFINITY },
        injective: violations.is_empty() && (offsets.len() < 2 || min_image > 0.0),
        violations,
        tube_time: 2.0 * config.epsilon / inf_speed,
        frame_checks,
        max_frame_difference,
        frame_independent: max_frame_difference <= 10.0 * config.tol.max(1e-9),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugacyResult {
    pub offsets: Vec<SampleOffset>,
    /// Sample index for each accepted offset.
    pub accepted: Vec<usize>,
    pub equivariance: Vec<Vec<EquivarianceResidual>>,
    pub failures: Vec<SampleFailure>,
    pub injectivity: Option<InjectivityReport>,
    pub max_offset: f64,
}

impl ConjugacyResult {
    pub fn max_equivariance_residual(&self) -> f64 {
        self.equivariance
            .iter()
            .flatten()
            .map(|r| r.residual)
            .fold(0.0, f64::max)
    }
}

/// Offsets, equivariance residuals and the injectivity/frame report for every sample.
pub fn conjugacy_map(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    samples: &[DVector<f64>],
    config: &ConjugacyConfig,
) -> Result<ConjugacyResult> {
    config.validate()?;
    let outcomes: Vec<Result<(SampleOffset, Vec<EquivarianceResidual>)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let frame = stable_first_frame(s, w, config.probe_time, config.tol)?;
            let sample_seed = config.seed.wrapping_add(i as u64);
            let (offset, ctx) = conjugacy_offset_with_context(s, v, w, &frame, config, sample_seed)?;
            let eq = equivariance_in_context(s, v, &offset, &ctx, &config.equivariance_times, config)?;
            Ok((offset, eq))
        })
        .collect();
    let mut offsets = Vec::new();
    let mut accepted = Vec::new();
    let mut equivariance = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok((o, e)) => {
                offsets.push(o);
                accepted.push(i);
                equivariance.push(e);
            }
            Err(e) => failures.push(SampleFailure {
                sample: i,
                message: e.to_string(),
            }),
        }
    }
    let max_offset = offsets
        .iter()
        .map(|o| DVector::from_column_slice(&o.h).norm())
        .fold(0.0, f64::max);
    let injectivity = if offsets.is_empty() {
        None
    } else {
        Some(verify_injectivity_and_frame_independence(&offsets, s, v, config)?)
    };
    Ok(ConjugacyResult {
        offsets,
        accepted,
        equivariance,
        failures,
        injectivity,
        max_offset,
    })
}
