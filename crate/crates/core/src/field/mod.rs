//! Vector fields on Euclidean space, their flows and variational equations.

pub mod expr;
pub mod integrator;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LiaoError, Result};
use crate::linalg::spectral_norm;
pub use expr::{Expr, Term, Trig, TrigKind};
pub use integrator::{IntegratorOptions, DEFAULT_BLOWUP};

/// A C¹ vector field given as one term list per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawField", into = "RawField")]
pub struct VectorFieldSpec {
    pub name: String,
    pub components: Vec<Expr>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    #[serde(default)]
    name: String,
    dimension: usize,
    components: Vec<String>,
}

impl TryFrom<RawField> for VectorFieldSpec {
    type Error = LiaoError;

    fn try_from(raw: RawField) -> Result<Self> {
        if raw.components.len() != raw.dimension {
            return Err(LiaoError::Validation(format!(
                "field `{}` declares dimension {} but has {} components",
                raw.name,
                raw.dimension,
                raw.components.len()
            )));
        }
        let comps: Vec<&str> = raw.components.iter().map(String::as_str).collect();
        VectorFieldSpec::parse(&raw.name, &comps)
    }
}

impl From<VectorFieldSpec> for RawField {
    fn from(spec: VectorFieldSpec) -> Self {
        RawField {
            dimension: spec.dimension(),
            components: spec.components.iter().map(|c| c.to_string()).collect(),
            name: spec.name,
        }
    }
}

impl VectorFieldSpec {
    pub fn parse(name: &str, components: &[&str]) -> Result<Self> {
        let n = components.len();
        if n < 2 {
            return Err(LiaoError::Validation(format!(
                "field `{name}` must have dimension >= 2, got {n}"
            )));
        }
        let vars = expr::ambient_vars(n);
        let components = components
            .iter()
            .map(|c| Expr::parse(c, &vars))
            .collect::<Result<Vec<_>>>()?;
        Ok(VectorFieldSpec {
            name: name.to_string(),
            components,
        })
    }

    pub fn zero(n: usize) -> Self {
        VectorFieldSpec {
            name: "zero".into(),
            components: vec![Expr::zero(); n],
        }
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn eval_into(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        for (k, (c, o)) in self.components.iter().zip(out.iter_mut()).enumerate() {
            *o = c.eval(w);
            if !o.is_finite() {
                return Err(LiaoError::EvaluationOverflow { component: k });
            }
        }
        Ok(())
    }

    /// Row-major Jacobian into `out` (length n²).
    pub fn jacobian_into(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dimension();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in self.components.iter().enumerate() {
            let row = &mut out[k * n..(k + 1) * n];
            c.accumulate_gradient(w, row);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LiaoError::EvaluationOverflow { component: k });
            }
        }
        Ok(())
    }

    pub fn eval(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dimension());
        self.eval_into(w.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    pub fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dimension();
        let mut buf = vec![0.0; n * n];
        self.jacobian_into(w.as_slice(), &mut buf)?;
        Ok(DMatrix::from_row_slice(n, n, &buf))
    }
}

/// `(S(w), S'(w))` with the exact Jacobian of the term list.
pub fn eval_field_and_jacobian(
    spec: &VectorFieldSpec,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if w.len() != spec.dimension() {
        return Err(LiaoError::Validation(format!(
            "point has dimension {}, field has {}",
            w.len(),
            spec.dimension()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(LiaoError::Precondition("evaluation point must be finite".into()));
    }
    Ok((spec.eval(w)?, spec.jacobian(w)?))
}

/// A sampled orbit segment, optionally with fundamental matrices `Dφ_t(w0)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub w0: DVector<f64>,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub fundamentals: Option<Vec<DMatrix<f64>>>,
    slopes: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.times
            .iter()
            .position(|&t| t == 0.0)
            .expect("trajectory grid contains 0")
    }

    fn bracket(&self, t: f64) -> Option<usize> {
        let (first, last) = (self.times[0], *self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t);
        Some(i.saturating_sub(1).min(self.times.len().saturating_sub(2)))
    }

    /// Packed (state, fundamental) sample `i` as one flat vector.
    fn packed(&self, i: usize) -> Vec<f64> {
        let mut v = self.states[i].as_slice().to_vec();
        if let Some(f) = &self.fundamentals {
            v.extend_from_slice(f[i].as_slice());
        }
        v
    }

    fn dense(&self, t: f64) -> Option<Vec<f64>> {
        if self.times.len() == 1 {
            return (t == self.times[0]).then(|| self.packed(0));
        }
        let i = self.bracket(t)?;
        if t == self.times[i] {
            return Some(self.packed(i));
        }
        if t == self.times[i + 1] {
            return Some(self.packed(i + 1));
        }
        Some(integrator::hermite(
            self.times[i],
            &self.packed(i),
            &self.slopes[i],
            self.times[i + 1],
            &self.packed(i + 1),
            &self.slopes[i + 1],
            t,
        ))
    }

    /// Continuous (cubic Hermite) evaluation, exact at grid times.
    pub fn state_at(&self, t: f64) -> Option<DVector<f64>> {
        let n = self.w0.len();
        self.dense(t).map(|v| DVector::from_column_slice(&v[..n]))
    }

    pub fn fundamental_at(&self, t: f64) -> Option<DMatrix<f64>> {
        self.fundamentals.as_ref()?;
        let n = self.w0.len();
        self.dense(t)
            .map(|v| DMatrix::from_column_slice(n, n, &v[n..n + n * n]))
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }
}

/// Right-hand side of `(w, Y)' = (S(w), S'(w) Y)` with `Y` an `n × cols`
/// matrix stored column-major after the state.
pub(crate) fn tangent_system<'a>(
    spec: &'a VectorFieldSpec,
    cols: usize,
) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + 'a {
    let n = spec.dimension();
    let mut jac = vec![0.0; n * n];
    move |_t, y, dy| {
        spec.eval_into(&y[..n], &mut dy[..n])?;
        if cols > 0 {
            spec.jacobian_into(&y[..n], &mut jac)?;
            let x = &y[n..];
            let dx = &mut dy[n..];
            for c in 0..cols {
                for r in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += jac[r * n + k] * x[c * n + k];
                    }
                    dx[c * n + r] = s;
                }
            }
        }
        Ok(())
    }
}

fn run_direction(
    spec: &VectorFieldSpec,
    y0: &[f64],
    stops: &[f64],
    opts: &IntegratorOptions,
    record_steps: bool,
    with_variational: bool,
) -> Result<integrator::Solution> {
    integrator::integrate(
        tangent_system(spec, if with_variational { spec.dimension() } else { 0 }),
        0.0,
        y0,
        stops,
        opts,
        record_steps,
    )
}

fn initial_packed(w0: &DVector<f64>, with_variational: bool) -> Vec<f64> {
    let n = w0.len();
    let mut y0 = w0.as_slice().to_vec();
    if with_variational {
        y0.extend_from_slice(DMatrix::<f64>::identity(n, n).as_slice());
    }
    y0
}

fn assemble(
    w0: &DVector<f64>,
    back: integrator::Solution,
    fwd: integrator::Solution,
    with_variational: bool,
) -> Trajectory {
    let n = w0.len();
    let mut times = Vec::new();
    let mut packed = Vec::new();
    let mut slopes = Vec::new();
    // Backward samples reversed, skipping the duplicated start.
    for i in (1..back.times.len()).rev() {
        times.push(back.times[i]);
        packed.push(back.states[i].clone());
        slopes.push(back.slopes[i].clone());
    }
    for i in 0..fwd.times.len() {
        times.push(fwd.times[i]);
        packed.push(fwd.states[i].clone());
        slopes.push(fwd.slopes[i].clone());
    }
    let states = packed
        .iter()
        .map(|p| DVector::from_column_slice(&p[..n]))
        .collect();
    let fundamentals = with_variational.then(|| {
        packed
            .iter()
            .map(|p| DMatrix::from_column_slice(n, n, &p[n..]))
            .collect()
    });
    Trajectory {
        w0: w0.clone(),
        times,
        states,
        fundamentals,
        slopes,
    }
}

fn check_flow_inputs(spec: &VectorFieldSpec, w0: &DVector<f64>, tol: f64) -> Result<()> {
    if w0.len() != spec.dimension() {
        return Err(LiaoError::Validation(format!(
            "initial point has dimension {}, field has {}",
            w0.len(),
            spec.dimension()
        )));
    }
    if !(tol > 0.0) {
        return Err(LiaoError::Precondition("tolerance must be positive".into()));
    }
    Ok(())
}

/// Adaptive integration over `span = (t_min, t_max)`, which must contain 0.
/// The returned grid consists of the accepted steps in both directions.
pub fn integrate_flow(
    spec: &VectorFieldSpec,
    w0: &DVector<f64>,
    span: (f64, f64),
    tol: f64,
    with_variational: bool,
) -> Result<Trajectory> {
    check_flow_inputs(spec, w0, tol)?;
    let (t_min, t_max) = span;
    if !(t_min <= 0.0 && 0.0 <= t_max) {
        return Err(LiaoError::Precondition(format!(
            "span [{t_min}, {t_max}] must contain 0"
        )));
    }
    let n = spec.dimension();
    let opts = IntegratorOptions::new(tol).with_blowup(DEFAULT_BLOWUP, n);
    let y0 = initial_packed(w0, with_variational);
    let fwd = run_direction(spec, &y0, &[t_max], &opts, true, with_variational)?;
    let back = run_direction(spec, &y0, &[t_min], &opts, true, with_variational)?;
    Ok(assemble(w0, back, fwd, with_variational))
}

/// Integration landing exactly on `times` (sorted ascending, containing 0).
pub fn integrate_flow_at(
    spec: &VectorFieldSpec,
    w0: &DVector<f64>,
    times: &[f64],
    tol: f64,
    with_variational: bool,
) -> Result<Trajectory> {
    check_flow_inputs(spec, w0, tol)?;
    if times.windows(2).any(|w| w[1] <= w[0]) || !times.contains(&0.0) {
        return Err(LiaoError::Precondition(
            "output times must be strictly increasing and contain 0".into(),
        ));
    }
    let n = spec.dimension();
    let opts = IntegratorOptions::new(tol).with_blowup(DEFAULT_BLOWUP, n);
    let y0 = initial_packed(w0, with_variational);
    let pos: Vec<f64> = times.iter().cloned().filter(|&t| t > 0.0).collect();
    let neg: Vec<f64> = times.iter().rev().cloned().filter(|&t| t < 0.0).collect();
    let fwd = run_direction(spec, &y0, &pos, &opts, false, with_variational)?;
    let back = run_direction(spec, &y0, &neg, &opts, false, with_variational)?;
    Ok(assemble(w0, back, fwd, with_variational))
}

/// Flow map `φ_t(w)` at a single time.
pub fn flow_to(spec: &VectorFieldSpec, w: &DVector<f64>, t: f64, tol: f64) -> Result<DVector<f64>> {
    let traj = integrate_flow_at(
        spec,
        w,
        &if t > 0.0 {
            vec![0.0, t]
        } else if t < 0.0 {
            vec![t, 0.0]
        } else {
            vec![0.0]
        },
        tol,
        false,
    )?;
    let idx = if t < 0.0 { 0 } else { traj.len() - 1 };
    Ok(traj.states[idx].clone())
}

/// Sampled estimates of the uniformity of the field: speed bounds, Jacobian bound and modulus of continuity of the Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub inf_speed: f64,
    pub sup_speed: f64,
    pub sup_jacobian: f64,
    /// `(δ, worst ‖S'(w) − S'(w')‖)` over probes with `‖w − w'‖ <= δ`, nondecreasing in δ.
    pub continuity_modulus: Vec<(f64, f64)>,
    pub sample_count: usize,
}

fn probe_directions(n: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = s;
            dirs.push(e);
        }
    }
    // Diagonal corners, a fixed subset when n is large.
    let corners = 1usize << n.min(6);
    for mask in 0..corners {
        let v = DVector::from_fn(n, |i, _| {
            if i < 6 && mask & (1 << i) != 0 {
                -1.0
            } else {
                1.0
            }
        });
        dirs.push(v.normalize());
    }
    dirs
}

pub fn check_uniformity(
    spec: &VectorFieldSpec,
    samples: &[DVector<f64>],
    deltas: &[f64],
) -> Result<UniformityReport> {
    if samples.is_empty() {
        return Err(LiaoError::Precondition("no sample points".into()));
    }
    let n = spec.dimension();
    let mut inf_speed = f64::INFINITY;
    let mut sup_speed: f64 = 0.0;
    let mut sup_jacobian: f64 = 0.0;
    let mut sorted: Vec<f64> = deltas.iter().cloned().filter(|d| *d > 0.0).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut worst = vec![0.0f64; sorted.len()];
    let dirs = probe_directions(n);
    for w in samples {
        let (s, j) = eval_field_and_jacobian(spec, w)?;
        let speed = s.norm();
        inf_speed = inf_speed.min(speed);
        sup_speed = sup_speed.max(speed);
        sup_jacobian = sup_jacobian.max(spectral_norm(&j));
        for (k, &delta) in sorted.iter().enumerate() {
            for d in &dirs {
                for frac in [0.5, 1.0] {
                    let probe = w + d * (delta * frac);
                    let jp = spec.jacobian(&probe)?;
                    worst[k] = worst[k].max(spectral_norm(&(jp - &j)));
                }
            }
        }
        if speed == 0.0 {
            return Err(LiaoError::Singularity {
                context: format!("at sample {:?}; the set contains a zero of the field", w.as_slice()),
                speed,
            });
        }
    }
    let mut running: f64 = 0.0;
    let continuity_modulus = sorted
        .iter()
        .zip(worst)
        .map(|(&d, v)| {
            running = running.max(v);
            (d, running)
        })
        .collect();
    Ok(UniformityReport {
        inf_speed,
        sup_speed,
        sup_jacobian,
        continuity_modulus,
        sample_count: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> VectorFieldSpec {
        VectorFieldSpec::parse("S", &["1", "y", "-z"]).unwrap()
    }

    #[test]
    fn example_field_value_and_jacobian() {
        let (v, j) = eval_field_and_jacobian(&example(), &DVector::from_vec(vec![2.0, 0.5, -1.0])).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.5, 1.0]);
        let want = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert_eq!(j, want);
    }

    #[test]
    fn zero_field() {
        let (v, j) = eval_field_and_jacobian(&VectorFieldSpec::zero(4), &DVector::from_element(4, 3.0)).unwrap();
        assert_eq!(v, DVector::zeros(4));
        assert_eq!(j, DMatrix::zeros(4, 4));
    }

    #[test]
    fn trig_forcing_jacobian_by_hand() {
        let f = VectorFieldSpec::parse("V", &["1", "y + 0.01*sin(x)", "-z"]).unwrap();
        let (v, j) = eval_field_and_jacobian(&f, &DVector::zeros(3)).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);
        let want = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.01, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((j - want).norm() < 1e-16);
    }

    #[test]
    fn overflow_names_component() {
        let f = VectorFieldSpec::parse("big", &["1", "x^40"]).unwrap();
        match f.eval(&DVector::from_vec(vec![1e10, 0.0])) {
            Err(LiaoError::EvaluationOverflow { component }) => assert_eq!(component, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn example_flow_closed_form() {
        let tol = 1e-8;
        let traj = integrate_flow(&example(), &DVector::from_vec(vec![0.0, 1.0, 1.0]), (0.0, 1.0), tol, false).unwrap();
        let end = traj.last_state();
        let e = 1f64.exp();
        assert!((end[0] - 1.0).abs() <= tol);
        assert!((end[1] - e).abs() <= tol);
        assert!((end[2] - 1.0 / e).abs() <= tol);
    }

    #[test]
    fn empty_span_gives_start_point() {
        let w0 = DVector::from_vec(vec![0.3, -0.2, 5.0]);
        let traj = integrate_flow(&example(), &w0, (0.0, 0.0), 1e-8, true).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], w0);
        assert_eq!(traj.fundamentals.as_ref().unwrap()[0], DMatrix::identity(3, 3));
    }

    #[test]
    fn variational_closed_form() {
        let tol = 1e-9;
        let traj = integrate_flow_at(&example(), &DVector::zeros(3), &[0.0, 2.0], tol, true).unwrap();
        let x = &traj.fundamentals.as_ref().unwrap()[1];
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2f64.exp(), (-2f64).exp()]));
        assert!((x - want).amax() <= 10.0 * tol * (1.0 + 2f64.exp()));
    }

    #[test]
    fn dense_output_matches_grid_and_interpolates() {
        let traj = integrate_flow(&example(), &DVector::from_vec(vec![0.0, 1.0, 1.0]), (-1.0, 1.0), 1e-10, true).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert_eq!(&traj.state_at(*t).unwrap(), s);
        }
        let mid = traj.state_at(0.123).unwrap();
        assert!((mid[1] - 0.123f64.exp()).abs() < 1e-6);
        assert!(traj.state_at(1.5).is_none());
        assert!(traj.fundamental_at(-0.5).is_some());
    }

    #[test]
    fn divergence_reports_last_time() {
        let f = VectorFieldSpec::parse("blow", &["1", "y^2"]).unwrap();
        let err = integrate_flow(&f, &DVector::from_vec(vec![0.0, 1.0]), (0.0, 2.0), 1e-8, false).unwrap_err();
        assert!(matches!(err, LiaoError::Divergence { last_time, .. } if last_time < 1.0));
    }

    #[test]
    fn uniformity_on_the_axis() {
        let samples: Vec<_> = (-5..=5).map(|k| DVector::from_vec(vec![k as f64, 0.0, 0.0])).collect();
        let r = check_uniformity(&example(), &samples, &[0.1]).unwrap();
        assert_eq!(r.inf_speed, 1.0);
        assert_eq!(r.sup_speed, 1.0);
        assert!((r.sup_jacobian - 1.0).abs() < 1e-14);
        assert_eq!(r.continuity_modulus, vec![(0.1, 0.0)]);
    }

    #[test]
    fn uniformity_modulus_for_quadratic_field() {
        let f = VectorFieldSpec::parse("q", &["1", "y^2", "-z"]).unwrap();
        let samples: Vec<_> = (-100..=100).map(|k| DVector::from_vec(vec![k as f64, 0.0, 0.0])).collect();
        let r = check_uniformity(&f, &samples, &[0.1, 0.05]).unwrap();
        assert_eq!(r.continuity_modulus.len(), 2);
        assert!((r.continuity_modulus[0].1 - 0.1).abs() < 1e-12);
        assert!((r.continuity_modulus[1].1 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn singular_sample_is_rejected() {
        let samples = vec![DVector::zeros(3)];
        let f = VectorFieldSpec::parse("lin", &["x", "y", "-z"]).unwrap();
        assert!(matches!(check_uniformity(&f, &samples, &[0.1]), Err(LiaoError::Singularity { .. })));
    }

    #[test]
    fn serde_round_trip() {
        let f = VectorFieldSpec::parse("V", &["1", "y + 1/100*sin(x)", "-z + 0.01*cos(x)"]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        let back: VectorFieldSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(f, back);
    }
}
