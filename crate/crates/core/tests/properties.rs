use liao_core::dichotomy::epsilon_bound;
use liao_core::field::{flow_to, VectorFieldSpec};
use liao_core::frame::{default_frame, frame_transport, orthonormal_complement, stable_first_frame};
use liao_core::reduced::{certify_hyperbolic, dichotomy_constants, ReducedCocycle};
use liao_core::standard::{bump, chart_solution, SectionChart, StandardSystem, BUMP_LIPSCHITZ};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use proptest::prelude::*;

fn example() -> VectorFieldSpec {
    VectorFieldSpec::parse("S", &["1", "y", "-z"]).unwrap()
}

fn trig() -> VectorFieldSpec {
    VectorFieldSpec::parse("V", &["1", "y + 0.01*sin(x)", "-z + 0.01*cos(x)"]).unwrap()
}

fn pendulum() -> VectorFieldSpec {
    VectorFieldSpec::parse("P", &["y", "-sin(x)", "0.2*cos(x) + 0.1*y^2"]).unwrap()
}

/// `w ↦ Q S(Qᵀ w)` for the example field, written out as linear components.
fn rotated_example(q: &DMatrix<f64>) -> VectorFieldSpec {
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, -1.0]));
    let m = q * d * q.transpose();
    let names = ["x", "y", "z"];
    let comps: Vec<String> = (0..3)
        .map(|i| {
            let mut s = format!("{:.17}", q[(i, 0)]);
            for (j, name) in names.iter().enumerate() {
                let c = m[(i, j)];
                let sign = if c < 0.0 { '-' } else { '+' };
                s.push_str(&format!(" {sign} {:.17}*{name}", c.abs()));
            }
            s
        })
        .collect();
    let refs: Vec<&str> = comps.iter().map(String::as_str).collect();
    VectorFieldSpec::parse("SQ", &refs).unwrap()
}

fn omega_at_common_nodes(spec: &VectorFieldSpec, w: &DVector<f64>, h: f64, stride: usize) -> Vec<Vec<f64>> {
    let f = default_frame(spec, w).unwrap();
    let path = frame_transport(spec, w, &f, (-2.0, 2.0), h).unwrap();
    let c = ReducedCocycle::from_step_factors(path.times.clone(), h, &path.step_factors, 1).unwrap();
    // end nodes use a one-sided generator and are excluded
    (stride..c.len() - stride).step_by(stride).map(|i| c.omega(i)).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn omega_converges_at_second_order() {
    let w = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let coarse = omega_at_common_nodes(&pendulum(), &w, 0.04, 1);
    let mid = omega_at_common_nodes(&pendulum(), &w, 0.02, 2);
    let fine = omega_at_common_nodes(&pendulum(), &w, 0.01, 4);
    let (d1, d2) = (max_diff(&coarse, &mid), max_diff(&mid, &fine));
    let ratio = d1 / d2;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio} ({d1:e} / {d2:e})");
}

#[test]
fn xi_decreases_with_rate() {
    let xi = |rate: f64| {
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![-rate, rate]));
        let c = ReducedCocycle::constant(&r, (-30.0, 30.0), 0.01, 1).unwrap();
        let cert = certify_hyperbolic(&c, &[1.0, 2.0, 5.0, 10.0], 10.0).unwrap();
        dichotomy_constants(&c, &cert).unwrap().xi_a
    };
    let (a, b) = (xi(1.0), xi(2.0));
    assert!((a - 2.0).abs() < 1e-4 && (b - 1.0).abs() < 1e-4 && b < a);
}

#[test]
fn epsilon_bound_monotone() {
    let (e1, t1) = epsilon_bound(2.0, 2.0, 0.01, 2);
    let (e2, t2) = epsilon_bound(2.0, 2.0, 0.02, 2);
    assert!(e2 > e1 && (e2 - 2.0 * e1).abs() < 1e-12);
    assert_eq!(t1, t2);
}

#[test]
fn bump_lipschitz_constant() {
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (a, b) = (i as f64 / n as f64 * 1.5, (i + 1) as f64 / n as f64 * 1.5);
        worst = worst.max((bump(b) - bump(a)).abs() / (b - a));
        assert!((0.0..=1.0).contains(&bump(a)));
    }
    assert!(worst <= BUMP_LIPSCHITZ && worst > 0.99 * BUMP_LIPSCHITZ, "{worst}");
}

/// Solving the standard system of `V` in the chart of `S` and mapping back
/// agrees with the ambient flow of `V` over the carried ambient time.
#[test]
fn chart_conjugates_standard_system_to_flow() {
    let s = example();
    let v = trig();
    let w = DVector::from_vec(vec![0.5, 0.0, 0.0]);
    let frame = stable_first_frame(&s, &w, 10.0, 1e-10).unwrap();
    let path = frame_transport(&s, &w, &frame, (-4.0, 4.0), 0.01).unwrap();
    let c = ReducedCocycle::from_step_factors(path.times.clone(), 0.01, &path.step_factors, 1).unwrap();
    let chart = SectionChart::new(path, 0.5).unwrap();
    let sys = StandardSystem::new(&chart, &v, &c).unwrap();
    let y0 = DVector::from_vec(vec![0.02, -0.01]);
    let p0 = chart.embed(0.0, &y0).unwrap();
    let targets = [-1.5, 0.7, 2.0];
    for ((y, tau), t) in chart_solution(&sys, 0.0, &y0, &targets, 1e-11).unwrap().iter().zip(targets) {
        let via_chart = chart.embed(t, y).unwrap();
        let via_flow = flow_to(&v, &p0, *tau, 1e-11).unwrap();
        assert!((via_chart - via_flow).amax() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn complement_is_orthonormal_and_transversal(v in prop::collection::vec(-10.0f64..10.0, 2..7)) {
        let v = DVector::from_vec(v);
        prop_assume!(v.norm() > 1e-3);
        let c = orthonormal_complement(&v).unwrap();
        let n = v.len();
        prop_assert_eq!(c.shape(), (n, n - 1));
        prop_assert!((c.transpose() * &c - DMatrix::identity(n - 1, n - 1)).amax() < 1e-13);
        prop_assert!((c.transpose() * &v).amax() < 1e-12 * v.norm());
    }

    #[test]
    fn jacobian_matches_central_differences(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let spec = VectorFieldSpec::parse(
            "F",
            &["0.5*x^2*y - sin(2*x + y)", "cos(x - 0.5*z)*y + z^3", "x*y*z + 0.1*sin(z)"],
        )
        .unwrap();
        let w = DVector::from_vec(vec![x, y, z]);
        let j = spec.jacobian(&w).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut e = DVector::zeros(3);
            e[k] = eps;
            let fd = (spec.eval(&(&w + &e)).unwrap() - spec.eval(&(&w - &e)).unwrap()) / (2.0 * eps);
            let scale = 1.0 + j.column(k).amax();
            prop_assert!((fd - j.column(k)).amax() < 1e-6 * scale);
        }
    }

    #[test]
    fn flow_group_law(t in -3.0f64..3.0, s in -3.0f64..3.0, x in -1.0f64..1.0) {
        let spec = pendulum();
        let w = DVector::from_vec(vec![x, 0.3, 0.0]);
        let direct = flow_to(&spec, &w, t + s, 1e-12).unwrap();
        let composed = flow_to(&spec, &flow_to(&spec, &w, s, 1e-12).unwrap(), t, 1e-12).unwrap();
        prop_assert!((direct - composed).amax() < 1e-8);
    }

    #[test]
    fn chart_coordinates_invert_embedding(t in -3.0f64..3.0, a in -0.2f64..0.2, b in -0.2f64..0.2) {
        let s = trig();
        let w = DVector::from_vec(vec![0.0, -0.005, 0.005]);
        let frame = default_frame(&s, &w).unwrap();
        let path = frame_transport(&s, &w, &frame, (-4.0, 4.0), 0.01).unwrap();
        let chart = SectionChart::new(path, 0.5).unwrap();
        let y = DVector::from_vec(vec![a, b]);
        let p = chart.embed(t, &y).unwrap();
        let (y2, along) = chart.coordinates(t, &p).unwrap();
        prop_assert!((y2 - y).amax() < 1e-10);
        prop_assert!(along.abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// A rotated copy of the example has the same exponents and certificate.
    #[test]
    fn rotated_example_keeps_exponents(ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0, x0 in -5.0f64..5.0) {
        let q: DMatrix<f64> = DMatrix::from_iterator(3, 3, Rotation3::from_scaled_axis(Vector3::new(ax, ay, az)).matrix().iter().cloned());
        let spec = rotated_example(&q);
        let w = &q * DVector::from_vec(vec![x0, 0.0, 0.0]);
        let frame = stable_first_frame(&spec, &w, 10.0, 1e-10).unwrap();
        let path = frame_transport(&spec, &w, &frame, (-12.0, 12.0), 0.01).unwrap();
        let c = ReducedCocycle::from_step_factors(path.times.clone(), 0.01, &path.step_factors, 1).unwrap();
        let err = (0..c.len()).map(|i| {
            let o = c.omega(i);
            (o[0] + 1.0).abs().max((o[1] - 1.0).abs())
        }).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "omega error {}", err);
        let cert = certify_hyperbolic(&c, &[1.0, 2.0, 5.0, 10.0], 10.0).unwrap();
        prop_assert!(cert.pass && (cert.eta_hat - 1.0).abs() < 1e-3);
    }
}
