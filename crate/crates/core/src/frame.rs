//! Transversal orthonormal frames and their transport along orbits.
//!
//! A frame at `w` is an `n × (n−1)` matrix `γ` with orthonormal columns
//! spanning `S(w)^⊥`. Transport pushes the columns with the variational flow,
//! projects them back onto the new transversal plane and re-orthonormalizes
//! by Gram-Schmidt with a positive diagonal. The triangular factors of those
//! QR steps are what the reduced module turns into `R*(t)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{LiaoError, Result};
use crate::field::integrator::{self, IntegratorOptions};
use crate::field::{tangent_system, Trajectory, VectorFieldSpec};
use crate::linalg::{condition_number, gram_schmidt};

/// Integration tolerance used inside each transport step.
pub const TRANSPORT_TOL: f64 = 1e-12;

/// Columns whose QR factor is worse conditioned than this abort the transport.
pub const MAX_STEP_CONDITION: f64 = 1e12;

const MIN_SPEED: f64 = 1e-12;

/// An orthonormal basis of `S(w)^⊥`, stored as the columns of an `n × (n−1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransversalFrame {
    pub base: DVector<f64>,
    pub columns: DMatrix<f64>,
}

impl TransversalFrame {
    pub fn new(base: DVector<f64>, columns: DMatrix<f64>) -> Self {
        TransversalFrame { base, columns }
    }

    pub fn dimension(&self) -> usize {
        self.columns.ncols()
    }

    /// `y ↦ γy`, an isometry from coordinates onto the transversal plane.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.columns * y
    }

    /// `v ↦ γᵀv`.
    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.columns.tr_mul(v)
    }

    /// Max deviation of `γᵀγ` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let k = self.columns.ncols();
        (self.columns.tr_mul(&self.columns) - DMatrix::identity(k, k)).amax()
    }

    /// Max `|⟨S(w), col_j⟩| / ‖S(w)‖`.
    pub fn transversality_defect(&self, field_value: &DVector<f64>) -> f64 {
        let s = field_value.norm();
        if s == 0.0 {
            return f64::INFINITY;
        }
        self.columns.tr_mul(field_value).amax() / s
    }

    /// Right-multiplies the columns by an orthogonal `(n−1) × (n−1)` matrix.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Self {
        TransversalFrame {
            base: self.base.clone(),
            columns: &self.columns * q,
        }
    }
}

/// Householder complement of `S_w`: the reflector sending `S_w/‖S_w‖` to
/// `∓e₁`; its remaining columns form the frame. Deterministic in the input.
pub fn orthonormal_complement(s_w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = s_w.len();
    let norm = s_w.norm();
    if !(norm > 0.0) {
        return Err(LiaoError::Singularity {
            context: "while building a transversal frame".into(),
            speed: norm,
        });
    }
    let v = s_w / norm;
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut u = v.clone();
    u[0] += sign;
    let uu = u.norm_squared();
    let mut cols = DMatrix::zeros(n, n - 1);
    for j in 1..n {
        // column j of I - 2 u uᵀ / uᵀu
        for i in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            cols[(i, j - 1)] = delta - 2.0 * u[i] * u[j] / uu;
        }
    }
    Ok(cols)
}

/// Frame at `w` from the Householder complement of `S(w)`.
pub fn default_frame(spec: &VectorFieldSpec, w: &DVector<f64>) -> Result<TransversalFrame> {
    let s = spec.eval(w)?;
    Ok(TransversalFrame::new(w.clone(), orthonormal_complement(&s)?))
}

/// Pushes `(w, Y)` by the tangent flow over `dt`.
fn push(
    spec: &VectorFieldSpec,
    base: &DVector<f64>,
    cols: &DMatrix<f64>,
    dt: f64,
    tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = base.len();
    let k = cols.ncols();
    if dt == 0.0 {
        return Ok((base.clone(), cols.clone()));
    }
    let mut y0 = base.as_slice().to_vec();
    y0.extend_from_slice(cols.as_slice());
    let opts = IntegratorOptions::new(tol)
        .with_blowup(crate::field::DEFAULT_BLOWUP, n)
        .with_initial_step(dt.abs());
    let sol = integrator::integrate(tangent_system(spec, k), 0.0, &y0, &[dt], &opts, false)?;
    let y = sol.last_state();
    Ok((
        DVector::from_column_slice(&y[..n]),
        DMatrix::from_column_slice(n, k, &y[n..]),
    ))
}

/// Projects `Y` onto `S(base)^⊥` and orthonormalizes; returns the new frame and
/// the upper-triangular factor `R` with `Π Y = γ R`.
fn reorthonormalize(
    spec: &VectorFieldSpec,
    base: DVector<f64>,
    pushed: &DMatrix<f64>,
    time: f64,
) -> Result<(TransversalFrame, DMatrix<f64>)> {
    let s = spec.eval(&base)?;
    let speed = s.norm();
    if speed < MIN_SPEED {
        return Err(LiaoError::Singularity {
            context: format!("along the orbit at t = {time}"),
            speed,
        });
    }
    let unit = s / speed;
    let mut projected = pushed.clone();
    for mut col in projected.column_iter_mut() {
        let c = unit.dot(&col);
        col.axpy(-c, &unit, 1.0);
    }
    let (q, r) = gram_schmidt(&projected).ok_or(LiaoError::DegenerateTransport {
        time,
        condition: f64::INFINITY,
    })?;
    let condition = condition_number(&r);
    if condition > MAX_STEP_CONDITION {
        return Err(LiaoError::DegenerateTransport { time, condition });
    }
    Ok((TransversalFrame::new(base, q), r))
}

/// Moves `frame` (based at time `t`) by `dt` along the flow.
fn transport_step(
    spec: &VectorFieldSpec,
    frame: &TransversalFrame,
    t: f64,
    dt: f64,
    tol: f64,
) -> Result<(TransversalFrame, DMatrix<f64>)> {
    let (base, pushed) = push(spec, &frame.base, &frame.columns, dt, tol)?;
    reorthonormalize(spec, base, &pushed, t + dt)
}

/// The frame flow sampled on the uniform grid `t_k = k·h`.
#[derive(Debug, Clone)]
pub struct FramePath {
    field: VectorFieldSpec,
    pub h: f64,
    first_index: i64,
    pub times: Vec<f64>,
    pub frames: Vec<TransversalFrame>,
    /// `S` at each base point.
    pub velocities: Vec<DVector<f64>>,
    /// Forward factor of interval `i`: `Π Dφ_h γ_i = γ_{i+1} F_i`, upper triangular.
    pub step_factors: Vec<DMatrix<f64>>,
    tol: f64,
}

impl FramePath {
    pub fn field(&self) -> &VectorFieldSpec {
        &self.field
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        (-self.first_index) as usize
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap_or(&0.0))
    }

    pub fn initial(&self) -> &TransversalFrame {
        &self.frames[self.zero_index()]
    }

    /// Grid time of node `k` (relative to `t = 0`).
    pub fn node_time(&self, k: i64) -> f64 {
        k as f64 * self.h
    }

    /// Index of `t` when it is (to rounding) a grid time.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.h).round();
        if (t - k * self.h).abs() > 1e-9 * self.h {
            return None;
        }
        let idx = k as i64 - self.first_index;
        (0..self.times.len() as i64).contains(&idx).then_some(idx as usize)
    }

    /// Frame at arbitrary `t` within one step of the sampled span; off-grid
    /// times are reached by a partial transport step from the nearest node.
    pub fn frame_at(&self, t: f64) -> Result<TransversalFrame> {
        if let Some(i) = self.index_of(t) {
            return Ok(self.frames[i].clone());
        }
        let (lo, hi) = self.span();
        if t < lo - self.h || t > hi + self.h {
            return Err(LiaoError::Precondition(format!(
                "t = {t} outside the transported span [{lo}, {hi}]"
            )));
        }
        let k = ((t / self.h).round() as i64 - self.first_index).clamp(0, self.times.len() as i64 - 1) as usize;
        let (frame, _) = transport_step(&self.field, &self.frames[k], self.times[k], t - self.times[k], self.tol)?;
        Ok(frame)
    }

    /// Centered difference `(γ(t+h) − γ(t−h)) / 2h` of the frame columns.
    pub fn frame_derivative_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let plus = self.frame_at(t + self.h)?;
        let minus = self.frame_at(t - self.h)?;
        Ok((plus.columns - minus.columns) / (2.0 * self.h))
    }

    /// Orthonormality and transversality defects over the whole path.
    pub fn max_defects(&self) -> (f64, f64) {
        self.frames
            .iter()
            .zip(&self.velocities)
            .fold((0.0f64, 0.0f64), |(o, t), (f, s)| {
                (o.max(f.orthonormality_defect()), t.max(f.transversality_defect(s)))
            })
    }
}

/// Discrete-QR transport of `frame0` (based at `w0`) over `span`, step `h`.
pub fn frame_transport(
    spec: &VectorFieldSpec,
    w0: &DVector<f64>,
    frame0: &TransversalFrame,
    span: (f64, f64),
    h: f64,
) -> Result<FramePath> {
    if !(h > 0.0) {
        return Err(LiaoError::Precondition("transport step must be positive".into()));
    }
    let (t_min, t_max) = span;
    if !(t_min <= 0.0 && 0.0 <= t_max) {
        return Err(LiaoError::Precondition(format!("span [{t_min}, {t_max}] must contain 0")));
    }
    let n = spec.dimension();
    if w0.len() != n || frame0.columns.shape() != (n, n - 1) {
        return Err(LiaoError::Validation("frame shape does not match the field dimension".into()));
    }
    if (&frame0.base - w0).amax() > 1e-12 * (1.0 + w0.amax()) {
        return Err(LiaoError::Precondition("frame is not based at the initial point".into()));
    }
    let s0 = spec.eval(w0)?;
    if s0.norm() < MIN_SPEED {
        return Err(LiaoError::Singularity {
            context: "at the initial point".into(),
            speed: s0.norm(),
        });
    }
    let k_max = (t_max / h - 1e-9).ceil().max(0.0) as i64;
    let k_min = -((-t_min / h - 1e-9).ceil().max(0.0) as i64);
    let tol = TRANSPORT_TOL;

    let mut fwd_frames = vec![frame0.clone()];
    let mut fwd_factors = Vec::new();
    for k in 0..k_max {
        let (f, r) = transport_step(spec, fwd_frames.last().unwrap(), k as f64 * h, h, tol)?;
        fwd_frames.push(f);
        fwd_factors.push(r);
    }
    let mut back_frames = Vec::new();
    let mut back_factors = Vec::new();
    let mut current = frame0.clone();
    for k in (k_min..0).rev() {
        let (f, b) = transport_step(spec, &current, (k + 1) as f64 * h, -h, tol)?;
        // Π Dφ_{-h} γ_{k+1} = γ_k B  ⇒  Π Dφ_h γ_k = γ_{k+1} B⁻¹
        let inv = b
            .clone()
            .solve_upper_triangular(&DMatrix::identity(n - 1, n - 1))
            .ok_or(LiaoError::DegenerateTransport {
                time: k as f64 * h,
                condition: f64::INFINITY,
            })?;
        back_factors.push(inv);
        back_frames.push(f.clone());
        current = f;
    }
    back_frames.reverse();
    back_factors.reverse();

    let mut frames = back_frames;
    frames.extend(fwd_frames);
    let mut step_factors = back_factors;
    step_factors.extend(fwd_factors);
    let times: Vec<f64> = (k_min..=k_max).map(|k| k as f64 * h).collect();
    let velocities = frames
        .iter()
        .map(|f| spec.eval(&f.base))
        .collect::<Result<Vec<_>>>()?;
    Ok(FramePath {
        field: spec.clone(),
        h,
        first_index: k_min,
        times,
        frames,
        velocities,
        step_factors,
        tol,
    })
}

/// `Ψ_{t,w}` in frame coordinates: `C*(t) = γ(t)ᵀ Π(t) Dφ_t(w) γ(0)`.
#[derive(Debug, Clone)]
pub struct TransversalPropagatorPath {
    pub times: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
}

impl TransversalPropagatorPath {
    pub fn at_index(&self, i: usize) -> &DMatrix<f64> {
        &self.matrices[i]
    }
}

pub fn transversal_propagator(
    traj: &Trajectory,
    frames: &FramePath,
) -> Result<TransversalPropagatorPath> {
    let fundamentals = traj
        .fundamentals
        .as_ref()
        .ok_or_else(|| LiaoError::Precondition("trajectory lacks fundamental matrices".into()))?;
    if traj.times.len() != frames.times.len()
        || traj
            .times
            .iter()
            .zip(&frames.times)
            .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs()))
    {
        return Err(LiaoError::Precondition(
            "trajectory and frame path must share a grid".into(),
        ));
    }
    let gamma0 = &frames.initial().columns;
    let mut matrices = Vec::with_capacity(traj.len());
    for (i, x) in fundamentals.iter().enumerate() {
        let speed = frames.velocities[i].norm();
        if speed < MIN_SPEED {
            return Err(LiaoError::Singularity {
                context: format!("along the orbit at t = {}", traj.times[i]),
                speed,
            });
        }
        // γ(t) ⊥ S, so γ(t)ᵀ Π(t) = γ(t)ᵀ.
        matrices.push(frames.frames[i].columns.tr_mul(&(x * gamma0)));
    }
    Ok(TransversalPropagatorPath {
        times: traj.times.clone(),
        matrices,
    })
}

/// Frame at `w` whose leading `p_minus` columns approximate the stable
/// subspace: right singular vectors of `Ψ_{T,w}` ordered by increasing
/// singular value, each with its largest entry made positive.
pub fn stable_first_frame(
    spec: &VectorFieldSpec,
    w: &DVector<f64>,
    probe_time: f64,
    tol: f64,
) -> Result<TransversalFrame> {
    let base = default_frame(spec, w)?;
    if probe_time <= 0.0 {
        return Ok(base);
    }
    let traj = crate::field::integrate_flow_at(spec, w, &[0.0, probe_time], tol, true)?;
    let end = traj.last_state().clone();
    let s_end = spec.eval(&end)?;
    let g_end = orthonormal_complement(&s_end)?;
    let x = &traj.fundamentals.as_ref().unwrap()[1];
    let c = g_end.tr_mul(&(x * &base.columns));
    let k = c.ncols();
    let svd = c.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| LiaoError::Inconsistent("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut rot = DMatrix::zeros(k, k);
    for (j, &idx) in order.iter().enumerate() {
        let mut col = v_t.row(idx).transpose();
        let amax_pos = col.iamax();
        let ambient = &base.columns * &col;
        // sign fixed on the ambient vector so it does not depend on the base frame
        let lead = ambient.iamax();
        if ambient[lead] < 0.0 || (ambient[lead] == 0.0 && col[amax_pos] < 0.0) {
            col = -col;
        }
        rot.set_column(j, &col);
    }
    Ok(base.rotated(&rot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::integrate_flow_at;

    fn example() -> VectorFieldSpec {
        VectorFieldSpec::parse("S", &["1", "y", "-z"]).unwrap()
    }

    fn zy_frame(w: DVector<f64>) -> TransversalFrame {
        TransversalFrame::new(
            w,
            DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        )
    }

    #[test]
    fn complement_of_axis() {
        let g = orthonormal_complement(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(g, DMatrix::from_column_slice(3, 2, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn complement_invariants() {
        for s in [vec![0.0, 2.0, 0.0], vec![1.0, 1.0, 1.0, 1.0], vec![-3.0, 0.5, 2.0]] {
            let s = DVector::from_vec(s);
            let g = orthonormal_complement(&s).unwrap();
            let f = TransversalFrame::new(DVector::zeros(s.len()), g.clone());
            assert!(f.orthonormality_defect() < 1e-12);
            assert!(f.transversality_defect(&s) < 1e-12);
            assert_eq!(g, orthonormal_complement(&s).unwrap());
        }
        assert!(orthonormal_complement(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn example_frame_path_is_constant() {
        let w = DVector::zeros(3);
        let path = frame_transport(&example(), &w, &zy_frame(w.clone()), (-1.0, 1.0), 1e-2).unwrap();
        let g0 = &path.initial().columns;
        for f in &path.frames {
            assert!((&f.columns - g0).amax() < 1e-14);
        }
        let e = (1e-2f64).exp();
        let f0 = &path.step_factors[0];
        assert!((f0[(0, 0)] - 1.0 / e).abs() < 1e-13);
        assert!((f0[(1, 1)] - e).abs() < 1e-13);
        assert!(f0[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn zero_span_returns_initial_frame() {
        let w = DVector::from_vec(vec![0.5, 0.0, 0.0]);
        let f0 = zy_frame(w.clone());
        let path = frame_transport(&example(), &w, &f0, (0.0, 0.0), 1e-3).unwrap();
        assert_eq!(path.len(), 1);
        assert_eq!(path.frames[0], f0);
        assert!(path.step_factors.is_empty());
    }

    #[test]
    fn off_grid_frames_and_bad_inputs() {
        let w = DVector::zeros(3);
        let path = frame_transport(&example(), &w, &zy_frame(w.clone()), (-0.5, 0.5), 0.1).unwrap();
        let f = path.frame_at(0.234).unwrap();
        assert!((f.base[0] - 0.234).abs() < 1e-12);
        assert!(path.frame_at(3.0).is_err());
        assert!(frame_transport(&example(), &w, &zy_frame(w.clone()), (0.1, 0.5), 0.1).is_err());
        assert!(frame_transport(&example(), &w, &zy_frame(w.clone()), (0.0, 0.5), 0.0).is_err());
    }

    #[test]
    fn propagator_on_example() {
        let w = DVector::zeros(3);
        let h = 1e-2;
        let path = frame_transport(&example(), &w, &zy_frame(w.clone()), (0.0, 1.0), h).unwrap();
        let traj = integrate_flow_at(&example(), &w, &path.times, 1e-12, true).unwrap();
        let prop = transversal_propagator(&traj, &path).unwrap();
        assert_eq!(prop.matrices[0], DMatrix::identity(2, 2));
        let last = prop.matrices.last().unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[(-1f64).exp(), 0.0, 0.0, 1f64.exp()]);
        assert!((last - want).amax() < 1e-8);
    }

    #[test]
    fn stable_first_frame_on_example() {
        let f = stable_first_frame(&example(), &DVector::from_vec(vec![3.0, 0.0, 0.0]), 10.0, 1e-10).unwrap();
        let want = DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((f.columns - want).amax() < 1e-8);
    }

    #[test]
    fn degenerate_transport_is_detected() {
        // Transversal directions collapse at rate e^{-60 t}; one big step loses rank.
        let f = VectorFieldSpec::parse("stiff", &["1", "60*y", "-60*z"]).unwrap();
        let w = DVector::zeros(3);
        let err = frame_transport(&f, &w, &zy_frame(w.clone()), (0.0, 1.0), 1.0).unwrap_err();
        assert!(matches!(err, LiaoError::DegenerateTransport { .. }));
    }
}
