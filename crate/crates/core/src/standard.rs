//! Section charts `P*(t, y) = φ_t(w) + γ(t)y`, lifted fields and the standard
//! systems `V*` with their remainders `V*_rem = V* − R*(t)y`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiaoError, Result};
use crate::field::VectorFieldSpec;
use crate::frame::FramePath;
use crate::linalg::{condition_number, spectral_norm};
use crate::reduced::ReducedCocycle;

/// Lifts through a chart jacobian worse conditioned than this are rejected.
pub const MAX_LIFT_CONDITION: f64 = 1e8;

/// Condition threshold used when estimating the chart radius.
pub const RADIUS_CONDITION: f64 = 1e6;

/// Admissible range of the longitudinal speed `V̂⁰`.
pub const SPEED_WINDOW: (f64, f64) = (0.5, 2.0);

/// Chart data at one section time.
#[derive(Debug, Clone)]
pub struct ChartPoint {
    pub time: f64,
    pub base: DVector<f64>,
    pub velocity: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub dgamma: DMatrix<f64>,
}

impl ChartPoint {
    /// `J = [S(φ_t w) + γ′y, γ]`.
    pub fn jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.base.len();
        let mut j = DMatrix::zeros(n, n);
        j.set_column(0, &(&self.velocity + &self.dgamma * y));
        j.view_mut((0, 1), (n, n - 1)).copy_from(&self.gamma);
        j
    }

    pub fn embed(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.gamma * y
    }
}

/// A tube chart around the orbit of `w`, valid for `‖y‖ < radius`.
#[derive(Debug, Clone)]
pub struct SectionChart {
    frames: FramePath,
    nodes: Vec<ChartPoint>,
    pub radius: f64,
}

impl SectionChart {
    pub fn new(frames: FramePath, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(LiaoError::Validation("chart radius must be positive".into()));
        }
        let m = frames.len();
        let h = frames.h;
        let mut nodes = Vec::with_capacity(m);
        for i in 0..m {
            let before = if i > 0 {
                frames.frames[i - 1].columns.clone()
            } else {
                frames.frame_at(frames.times[i] - h)?.columns
            };
            let after = if i + 1 < m {
                frames.frames[i + 1].columns.clone()
            } else {
                frames.frame_at(frames.times[i] + h)?.columns
            };
            nodes.push(ChartPoint {
                time: frames.times[i],
                base: frames.frames[i].base.clone(),
                velocity: frames.velocities[i].clone(),
                gamma: frames.frames[i].columns.clone(),
                dgamma: (after - before) / (2.0 * h),
            });
        }
        Ok(SectionChart { frames, nodes, radius })
    }

    pub fn frames(&self) -> &FramePath {
        &self.frames
    }

    pub fn field(&self) -> &VectorFieldSpec {
        self.frames.field()
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.frames.initial().base
    }

    pub fn span(&self) -> (f64, f64) {
        self.frames.span()
    }

    pub fn nodes(&self) -> &[ChartPoint] {
        &self.nodes
    }

    /// Chart data at `t`; grid times are cached, other times are transported.
    pub fn point(&self, t: f64) -> Result<ChartPoint> {
        if let Some(i) = self.frames.index_of(t) {
            return Ok(self.nodes[i].clone());
        }
        let f = self.frames.frame_at(t)?;
        let dgamma = self.frames.frame_derivative_at(t)?;
        let velocity = self.field().eval(&f.base)?;
        Ok(ChartPoint {
            time: t,
            base: f.base,
            velocity,
            gamma: f.columns,
            dgamma,
        })
    }

    fn check_radius(&self, y: &DVector<f64>) -> Result<()> {
        let norm = y.norm();
        if norm >= self.radius {
            return Err(LiaoError::OutOfChart {
                norm,
                radius: self.radius,
            });
        }
        Ok(())
    }

    /// `P*(t, y)`.
    pub fn embed(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_radius(y)?;
        Ok(self.point(t)?.embed(y))
    }

    /// Frame coordinates of `p` in the section at time `t`, and the residual
    /// component of `p − φ_t(w)` along the flow direction.
    pub fn coordinates(&self, t: f64, p: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let c = self.point(t)?;
        let d = p - &c.base;
        let along = c.velocity.dot(&d) / c.velocity.norm();
        Ok((c.gamma.tr_mul(&d), along))
    }

    pub fn jacobian(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.point(t)?.jacobian(y))
    }

    /// Largest `r ≤ max_radius` of the form `max_radius·2^{-k}` for which the
    /// chart jacobian stays below `RADIUS_CONDITION` on a probe grid.
    pub fn estimate_radius(frames: &FramePath, max_radius: f64, probe_stride: usize) -> Result<f64> {
        let chart = SectionChart::new(frames.clone(), max_radius)?;
        let k = frames.field().dimension() - 1;
        let mut r = max_radius;
        for _ in 0..40 {
            let ok = chart.nodes.iter().step_by(probe_stride.max(1)).all(|c| {
                (0..k).all(|j| {
                    [-1.0, 1.0].iter().all(|s| {
                        let mut y = DVector::zeros(k);
                        y[j] = s * r * 0.999;
                        condition_number(&c.jacobian(&y)) < RADIUS_CONDITION
                    })
                })
            });
            if ok {
                return Ok(r);
            }
            r *= 0.5;
        }
        Err(LiaoError::ChartDegeneracy {
            time: 0.0,
            condition: f64::INFINITY,
        })
    }
}

/// `V̂ = J⁻¹ V(P*(t, y))` at a prepared chart point.
pub fn lift_at(point: &ChartPoint, v: &VectorFieldSpec, y: &DVector<f64>) -> Result<DVector<f64>> {
    let j = point.jacobian(y);
    let cond = condition_number(&j);
    if !(cond < MAX_LIFT_CONDITION) {
        return Err(LiaoError::ChartDegeneracy {
            time: point.time,
            condition: cond,
        });
    }
    let rhs = v.eval(&point.embed(y))?;
    j.lu()
        .solve(&rhs)
        .ok_or(LiaoError::ChartDegeneracy {
            time: point.time,
            condition: f64::INFINITY,
        })
}

pub fn lift_field(chart: &SectionChart, v: &VectorFieldSpec, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
    chart.check_radius(y)?;
    lift_at(&chart.point(t)?, v, y)
}

/// One evaluation of a standard system.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardValue {
    pub rhs: DVector<f64>,
    pub remainder: DVector<f64>,
    pub speed: f64,
}

/// `V*` from a lift, enforcing the speed window.
fn ratio(lift: &DVector<f64>, time: f64) -> Result<(DVector<f64>, f64)> {
    let speed = lift[0];
    if !(SPEED_WINDOW.0..=SPEED_WINDOW.1).contains(&speed) {
        return Err(LiaoError::NotInNeighborhood { time, speed });
    }
    let n = lift.len();
    Ok((lift.rows(1, n - 1) / speed, speed))
}

/// The standard system of `field` in `chart`, with the linear part taken from `cocycle`.
#[derive(Clone, Copy)]
pub struct StandardSystem<'a> {
    pub chart: &'a SectionChart,
    pub field: &'a VectorFieldSpec,
    pub cocycle: &'a ReducedCocycle,
}

impl<'a> StandardSystem<'a> {
    pub fn new(chart: &'a SectionChart, field: &'a VectorFieldSpec, cocycle: &'a ReducedCocycle) -> Result<Self> {
        if cocycle.len() != chart.frames.len() {
            return Err(LiaoError::Precondition("chart and cocycle must share a grid".into()));
        }
        Ok(StandardSystem { chart, field, cocycle })
    }

    /// `R*(t)`, linear between grid times.
    pub fn linear_part(&self, t: f64) -> Result<DMatrix<f64>> {
        let c = self.cocycle;
        if let Some(i) = self.chart.frames.index_of(t) {
            return Ok(c.r_samples[i].clone());
        }
        let (lo, hi) = c.span();
        if t < lo || t > hi {
            return Err(LiaoError::Precondition(format!("t = {t} outside the cocycle span")));
        }
        let s = (t - lo) / c.h;
        let i = (s.floor() as usize).min(c.len() - 2);
        let a = s - i as f64;
        Ok(&c.r_samples[i] * (1.0 - a) + &c.r_samples[i + 1] * a)
    }

    /// `(V*, V*_rem, V̂⁰)` at `(t, y)`.
    pub fn evaluate(&self, t: f64, y: &DVector<f64>) -> Result<StandardValue> {
        self.chart.check_radius(y)?;
        let point = self.chart.point(t)?;
        let (rhs, speed) = ratio(&lift_at(&point, self.field, y)?, t)?;
        let remainder = &rhs - self.linear_part(t)? * y;
        Ok(StandardValue { rhs, remainder, speed })
    }

    /// `V*(t, y)` only; no cocycle needed.
    pub fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        self.chart.check_radius(y)?;
        let point = self.chart.point(t)?;
        ratio(&lift_at(&point, self.field, y)?, t)
    }
}

pub fn standard_rhs_and_remainder(
    chart: &SectionChart,
    v: &VectorFieldSpec,
    cocycle: &ReducedCocycle,
    t: f64,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let s = StandardSystem::new(chart, v, cocycle)?.evaluate(t, y)?;
    Ok((s.rhs, s.remainder, s.speed))
}

/// Solution of `ẏ = V*(t, y)` from `(t0, y0)` sampled at `targets`, with the
/// ambient time `τ(t) = ∫_{t0}^t 1/V̂⁰` carried along.
pub fn chart_solution(
    system: &StandardSystem<'_>,
    t0: f64,
    y0: &DVector<f64>,
    targets: &[f64],
    tol: f64,
) -> Result<Vec<(DVector<f64>, f64)>> {
    use crate::field::integrator::{integrate, IntegratorOptions};
    let k = y0.len();
    let rhs = |t: f64, u: &[f64], du: &mut [f64]| -> Result<()> {
        let y = DVector::from_column_slice(&u[..k]);
        let (v, speed) = system.rhs(t, &y)?;
        du[..k].copy_from_slice(v.as_slice());
        du[k] = 1.0 / speed;
        Ok(())
    };
    let opts = IntegratorOptions::new(tol).with_max_step(system.chart.frames.h.max(1e-3) * 10.0);
    let mut start = y0.as_slice().to_vec();
    start.push(0.0);
    let mut out = vec![(DVector::zeros(k), 0.0); targets.len()];
    let mut fwd: Vec<(usize, f64)> = targets.iter().cloned().enumerate().filter(|&(_, t)| t >= t0).collect();
    let mut back: Vec<(usize, f64)> = targets.iter().cloned().enumerate().filter(|&(_, t)| t < t0).collect();
    fwd.sort_by(|a, b| a.1.total_cmp(&b.1));
    back.sort_by(|a, b| b.1.total_cmp(&a.1));
    for side in [fwd, back] {
        if side.is_empty() {
            continue;
        }
        let stops: Vec<f64> = side.iter().map(|x| x.1).collect();
        let sol = integrate(rhs, t0, &start, &stops, &opts, false)?;
        for (j, (idx, _)) in side.iter().enumerate() {
            let u = &sol.states[j + 1];
            out[*idx] = (DVector::from_column_slice(&u[..k]), u[k]);
        }
    }
    Ok(out)
}

/// `q(s) = s³(10 − 15s + 6s²)`, the C² smoothstep.
fn smoothstep(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// `b ≡ 1` on `[0, 1/2]`, `b ≡ 0` on `[1, ∞)`, `q(2(1 − r))` between.
pub fn bump(r: f64) -> f64 {
    if r <= 0.5 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        smoothstep(2.0 * (1.0 - r))
    }
}

/// Lipschitz constant of `b`: `max |q′| · 2 = 15/8 · 2`.
pub const BUMP_LIPSCHITZ: f64 = 3.75;

/// `Ṽ(t, y) = b(‖y‖/ξ)·rem(t, y)` inside the chart, zero outside and beyond `ξ`.
pub fn bump_modify<F>(rem: F, xi: f64, radius: f64) -> impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    move |t, y| {
        let r = y.norm();
        let b = bump(r / xi);
        if b == 0.0 || r > radius {
            return Ok(DVector::zeros(y.len()));
        }
        Ok(rem(t, y)? * b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDistance {
    /// Sampled `sup ‖Ŝ − V̂‖ + ‖∂_y(Ŝ − V̂)‖`.
    pub distance: f64,
    /// Sampled `sup ‖S − V‖ + ‖S′ − V′‖` at the embedded points.
    pub ambient_distance: f64,
    /// `ambient_distance / distance`, a lower-bound diagnostic for the
    /// constant relating the two; `None` when the distance vanishes.
    pub flat_ratio: Option<f64>,
    pub sample_count: usize,
}

/// Sampled lift distance between `s` and `v` over `(chart, t)` pairs and `y` samples.
pub fn field_distance(
    s: &VectorFieldSpec,
    v: &VectorFieldSpec,
    charts: &[(&SectionChart, f64)],
    y_samples: &[DVector<f64>],
) -> Result<FieldDistance> {
    if charts.is_empty() {
        return Err(LiaoError::Precondition("field distance needs at least one chart".into()));
    }
    const STEP: f64 = 1e-5;
    let mut distance: f64 = 0.0;
    let mut ambient: f64 = 0.0;
    let mut count = 0;
    for (chart, t) in charts {
        let point = chart.point(*t)?;
        for y in y_samples {
            chart.check_radius(y)?;
            let diff = |y: &DVector<f64>| -> Result<DVector<f64>> {
                Ok(lift_at(&point, s, y)? - lift_at(&point, v, y)?)
            };
            let d0 = diff(y)?;
            let k = y.len();
            let mut dd = DMatrix::zeros(d0.len(), k);
            for j in 0..k {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += STEP;
                ym[j] -= STEP;
                dd.set_column(j, &((diff(&yp)? - diff(&ym)?) / (2.0 * STEP)));
            }
            distance = distance.max(d0.norm() + spectral_norm(&dd));
            let p = point.embed(y);
            let gap = (s.eval(&p)? - v.eval(&p)?).norm() + spectral_norm(&(s.jacobian(&p)? - v.jacobian(&p)?));
            ambient = ambient.max(gap);
            count += 1;
        }
    }
    Ok(FieldDistance {
        distance,
        ambient_distance: ambient,
        flat_ratio: (distance > 0.0).then(|| ambient / distance),
        sample_count: count,
    })
}

/// Sampled size and Lipschitz constant of a remainder over a ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderStats {
    /// `sup ‖V*_rem‖` over `‖y‖ ≤ ball`.
    pub sup_norm: f64,
    /// Largest difference quotient over `‖y‖ ≤ ball`.
    pub lipschitz: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

/// Probes the remainder at the given grid indices: the centre, `±ball·e_j`,
/// and `pairs` random pairs per index drawn from `rng`.
pub fn remainder_stats<R: Rng>(
    system: &StandardSystem<'_>,
    indices: &[usize],
    ball: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<RemainderStats> {
    let k = system.cocycle.dimension();
    let mut stats = RemainderStats {
        sup_norm: 0.0,
        lipschitz: 0.0,
        min_speed: f64::INFINITY,
        max_speed: 0.0,
    };
    let inner = ball.min(system.chart.radius * (1.0 - 1e-9));
    let random_point = |rng: &mut R| -> DVector<f64> {
        let v = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n == 0.0 {
            v
        } else {
            v * (inner * rng.random::<f64>().powf(1.0 / k as f64) / n)
        }
    };
    for &i in indices {
        let t = system.cocycle.times[i];
        let mut pts = vec![DVector::zeros(k)];
        for j in 0..k {
            for s in [-1.0, 1.0] {
                let mut y = DVector::zeros(k);
                y[j] = s * inner;
                pts.push(y);
            }
        }
        for _ in 0..pairs {
            pts.push(random_point(rng));
            pts.push(random_point(rng));
        }
        let vals = pts
            .iter()
            .map(|y| system.evaluate(t, y))
            .collect::<Result<Vec<_>>>()?;
        for v in &vals {
            stats.sup_norm = stats.sup_norm.max(v.remainder.norm());
            stats.min_speed = stats.min_speed.min(v.speed);
            stats.max_speed = stats.max_speed.max(v.speed);
        }
        let mut quotient = |a: usize, b: usize| {
            let dy = (&pts[a] - &pts[b]).norm();
            if dy > 0.0 {
                let q = (&vals[a].remainder - &vals[b].remainder).norm() / dy;
                stats.lipschitz = stats.lipschitz.max(q);
            }
        };
        for j in 1..=2 * k {
            quotient(0, j);
        }
        let base = 1 + 2 * k;
        for p in 0..pairs {
            quotient(base + 2 * p, base + 2 * p + 1);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{frame_transport, TransversalFrame};

    fn example() -> VectorFieldSpec {
        VectorFieldSpec::parse("S", &["1", "y", "-z"]).unwrap()
    }

    fn chart(w: DVector<f64>, span: (f64, f64)) -> SectionChart {
        let f0 = TransversalFrame::new(
            w.clone(),
            DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        );
        let path = frame_transport(&example(), &w, &f0, span, 0.01).unwrap();
        SectionChart::new(path, 0.5).unwrap()
    }

    fn v(y: f64) -> DVector<f64> {
        DVector::from_vec(vec![y])
    }

    #[test]
    fn embedding_on_example() {
        let c = chart(DVector::zeros(3), (0.0, 4.0));
        let p = c.embed(3.0, &DVector::from_vec(vec![0.1, -0.2])).unwrap();
        assert!((p - DVector::from_vec(vec![3.0, -0.2, 0.1])).amax() < 1e-12);
        let (y, along) = c.coordinates(3.0, &DVector::from_vec(vec![3.0, -0.2, 0.1])).unwrap();
        assert!((y - DVector::from_vec(vec![0.1, -0.2])).amax() < 1e-12);
        assert!(along.abs() < 1e-12);
        assert!(matches!(
            c.embed(1.0, &DVector::from_vec(vec![0.6, 0.0])),
            Err(LiaoError::OutOfChart { .. })
        ));
    }

    #[test]
    fn lift_of_constant_perturbation() {
        let c = chart(DVector::zeros(3), (-1.0, 1.0));
        let d = 0.01;
        let vf = VectorFieldSpec::parse("V", &["1", "y + 0.01", "-z"]).unwrap();
        let y = DVector::from_vec(vec![0.2, -0.1]);
        let lift = lift_field(&c, &vf, 0.5, &y).unwrap();
        assert!((lift - DVector::from_vec(vec![1.0, -0.2, -0.1 + d])).amax() < 1e-12);
        let s = lift_field(&c, &example(), 0.3, &DVector::zeros(2)).unwrap();
        assert!((s - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn bump_shape() {
        assert_eq!(bump(0.0), 1.0);
        assert_eq!(bump(0.5), 1.0);
        assert_eq!(bump(1.0), 0.0);
        assert_eq!(bump(3.0), 0.0);
        assert!((bump(0.75) - 0.5).abs() < 1e-15);
        let grid: Vec<f64> = (0..=1000).map(|i| 0.5 + i as f64 * 5e-4).collect();
        let slope = grid
            .windows(2)
            .map(|w| (bump(w[1]) - bump(w[0])).abs() / (w[1] - w[0]))
            .fold(0.0, f64::max);
        assert!(slope <= BUMP_LIPSCHITZ + 1e-9);
        let f = bump_modify(|_, y: &DVector<f64>| Ok(y.clone() + v(1.0)), 0.1, 1.0);
        assert_eq!(f(0.0, &v(0.04)).unwrap(), v(1.04));
        assert_eq!(f(0.0, &v(0.2)).unwrap(), v(0.0));
    }
}
