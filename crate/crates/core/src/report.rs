//! Scenario runs and their byte-stable report files.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::conjugacy::{conjugacy_map, ConjugacyConfig, EquivarianceResidual, InjectivityReport, SampleFailure, SampleOffset};
use crate::dichotomy::{bounded_solution, delta_map, epsilon_bound, validate_class, ClassReport};
use crate::error::{LiaoError, Result};
use crate::field::{check_uniformity, UniformityReport};
use crate::frame::{frame_transport, stable_first_frame};
use crate::reduced::{certify_hyperbolic, dichotomy_constants, DichotomyConstants, HyperbolicityCertificate, ReducedCocycle};
use crate::scenario::{Scenario, SCHEMA_VERSION};

/// Float text used in every report: 17 significant digits.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "NaN".to_string()
    }
}

/// Pretty JSON with fixed float formatting.
struct StableFormatter(PrettyFormatter<'static>);

impl Formatter for StableFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` deterministically (struct field order, fixed float format, trailing newline).
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, StableFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_stable_json(value)?)?;
    Ok(())
}

/// Writes a CSV with a header row and float cells.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Header `t,omega_1,...,omega_k`.
pub fn omega_header(k: usize) -> Vec<String> {
    std::iter::once("t".to_string()).chain((1..=k).map(|i| format!("omega_{i}"))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Certify,
    Exponents,
    Delta,
    Conjugate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Exponents => "exponents",
            Command::Delta => "delta",
            Command::Conjugate => "conjugate",
        }
    }
}

/// Files written by a run, and whether every check in it passed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub success: bool,
}

/// Header shared by every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub command: &'static str,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
}

/// One sample orbit: its certificate and, when it passes, its constants.
#[derive(Debug, Clone, Serialize)]
pub struct SampleCertificate {
    pub w: Vec<f64>,
    pub certificate: HyperbolicityCertificate,
    pub constants: Option<DichotomyConstants>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub pass: bool,
    /// Smallest certified rate over the samples.
    pub eta_hat: f64,
    /// Largest Green-kernel mass over the samples.
    pub xi: Option<f64>,
    /// Largest entry-sum bound of the reduced matrix over the samples.
    pub eta: Option<f64>,
    pub tail_bound: Option<f64>,
    pub horizon: f64,
    pub h: f64,
    pub uniformity: UniformityReport,
    pub samples: Vec<SampleCertificate>,
}

/// Grid half-length actually transported: `horizon` rounded up to an even number of steps.
pub fn transported_extent(horizon: f64, h: f64) -> f64 {
    let half = (horizon / h - 1e-9).ceil().max(2.0) as i64;
    (half + half % 2) as f64 * h
}

fn sample_cocycle(scenario: &Scenario, w: &DVector<f64>) -> Result<ReducedCocycle> {
    let nb = &scenario.numeric;
    let frame = stable_first_frame(&scenario.field, w, nb.probe_time, nb.tol)?;
    let extent = transported_extent(nb.horizon, nb.h);
    let path = frame_transport(&scenario.field, w, &frame, (-extent, extent), nb.h)?;
    ReducedCocycle::from_step_factors(path.times.clone(), nb.h, &path.step_factors, scenario.p_minus)
}

/// Certificates for every sample of the scenario.
pub fn certify(scenario: &Scenario, provenance: Provenance) -> Result<CertifyReport> {
    let samples = scenario.samples();
    let nb = &scenario.numeric;
    let uniformity = check_uniformity(&scenario.field, &samples, &nb.uniformity_deltas)?;
    let per_sample: Vec<SampleCertificate> = samples
        .par_iter()
        .map(|w| {
            let cocycle = sample_cocycle(scenario, w)?;
            let certificate = certify_hyperbolic(&cocycle, &nb.d_grid, nb.window_t)?;
            let constants = if certificate.pass {
                Some(dichotomy_constants(&cocycle, &certificate)?)
            } else {
                None
            };
            Ok(SampleCertificate {
                w: w.as_slice().to_vec(),
                certificate,
                constants,
            })
        })
        .collect::<Result<_>>()?;
    let pass = per_sample.iter().all(|s| s.certificate.pass);
    let eta_hat = per_sample.iter().map(|s| s.certificate.eta_hat).fold(f64::INFINITY, f64::min);
    let fold = |get: fn(&DichotomyConstants) -> f64| -> Option<f64> {
        pass.then(|| per_sample.iter().filter_map(|s| s.constants.as_ref().map(get)).fold(0.0, f64::max))
    };
    Ok(CertifyReport {
        provenance,
        pass,
        eta_hat,
        xi: fold(|c| c.xi_a),
        eta: fold(|c| c.eta_a),
        tail_bound: fold(|c| c.tail_bound),
        horizon: nb.horizon,
        h: nb.h,
        uniformity,
        samples: per_sample,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentsReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub files: Vec<String>,
    /// Mean of each qualitative function over the transported window, per sample.
    pub mean_omega: Vec<Vec<f64>>,
}

/// Qualitative functions along every sample orbit; one row per grid node.
pub fn exponents(scenario: &Scenario) -> Result<Vec<Vec<Vec<f64>>>> {
    scenario
        .samples()
        .par_iter()
        .map(|w| {
            let cocycle = sample_cocycle(scenario, w)?;
            Ok((0..cocycle.len())
                .map(|i| std::iter::once(cocycle.times[i]).chain(cocycle.omega(i)).collect())
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundedSummary {
    pub iterations: usize,
    pub increment: f64,
    pub contraction: f64,
    pub defect: f64,
    pub horizon: f64,
    pub norm_bound: f64,
    pub tail_bound: f64,
    pub sup_norm: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaFailure {
    pub s: f64,
    pub u: Vec<f64>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub epsilon_bound: f64,
    pub homeomorphism_threshold: f64,
    pub class: ClassReport,
    pub bounded_solution: BoundedSummary,
    /// Largest `‖Δ_s(u) − u‖` over the evaluated samples.
    pub max_shift: f64,
    pub evaluated: usize,
    pub failures: Vec<DeltaFailure>,
}

/// Everything the `delta` command writes.
pub struct DeltaRun {
    pub report: DeltaReport,
    pub solution_rows: Vec<Vec<f64>>,
    pub delta_rows: Vec<Vec<f64>>,
}

pub fn delta(scenario: &Scenario, provenance: Provenance) -> Result<DeltaRun> {
    let block = scenario
        .dichotomy
        .as_ref()
        .ok_or_else(|| LiaoError::Validation("the delta command needs a `dichotomy` block".into()))?;
    let problem = block.problem()?;
    let p = block.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(provenance.seed);
    let class = validate_class(&problem, block.class_samples, block.z_radius, &mut rng)?;
    let sol = bounded_solution(&problem, block.tol, block.max_iter)?;
    let (epsilon_bound, homeomorphism_threshold) = epsilon_bound(block.eta_a, block.xi_a, block.eta_f, p);

    let m = block.delta_samples;
    let points: Vec<(f64, DVector<f64>)> = (0..m)
        .map(|i| {
            let s = if m > 1 {
                block.s_range[0] + (block.s_range[1] - block.s_range[0]) * i as f64 / (m - 1) as f64
            } else {
                block.s_range[0]
            };
            let dir = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let scale = block.u_radius * rng.random::<f64>();
            let u = if dir.norm() > 0.0 { dir.normalize() * scale } else { dir };
            (s, u)
        })
        .collect();
    let values: Vec<_> = points.par_iter().map(|(s, u)| (s, u, delta_map(&problem, *s, u, block.tol))).collect();
    let mut delta_rows = Vec::new();
    let mut failures = Vec::new();
    let mut max_shift: f64 = 0.0;
    for (s, u, r) in values {
        match r {
            Ok(d) => {
                max_shift = max_shift.max((&d.image - &d.u).norm());
                let mut row = vec![d.s];
                row.extend(d.u.iter());
                row.extend(d.image.iter());
                row.push(d.trajectory_sup);
                delta_rows.push(row);
            }
            Err(e) if !e.is_validation() => failures.push(DeltaFailure {
                s: *s,
                u: u.as_slice().to_vec(),
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let solution_rows = sol
        .times
        .iter()
        .zip(&sol.z)
        .map(|(t, z)| std::iter::once(*t).chain(z.iter().cloned()).collect())
        .collect();
    let report = DeltaReport {
        provenance,
        epsilon_bound,
        homeomorphism_threshold,
        class,
        bounded_solution: BoundedSummary {
            iterations: sol.iterations,
            increment: sol.increment,
            contraction: sol.contraction,
            defect: sol.defect,
            horizon: sol.horizon,
            norm_bound: sol.norm_bound,
            tail_bound: sol.tail_bound,
            sup_norm: sol.sup_norm(),
            x: sol.x.as_slice().to_vec(),
        },
        max_shift,
        evaluated: delta_rows.len(),
        failures,
    };
    Ok(DeltaRun {
        report,
        solution_rows,
        delta_rows,
    })
}

/// What the conjugacy run relied on from certification.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateRef {
    pub scenario_hash: String,
    pub pass: bool,
    pub eta_hat: f64,
    pub eta_lambda: f64,
    pub xi_lambda: f64,
    pub tail_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugateReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub samples: Vec<Vec<f64>>,
    /// One entry per sample; `null` where the sample failed.
    pub offsets: Vec<Option<SampleOffset>>,
    /// Equivariance residuals per sample; empty where the sample failed.
    pub residuals: Vec<Vec<EquivarianceResidual>>,
    pub config: ConjugacyConfig,
    pub certificate_ref: CertificateRef,
    pub failures: Vec<SampleFailure>,
    pub injectivity: Option<InjectivityReport>,
    pub max_offset: f64,
    pub max_residual: f64,
}

pub fn conjugate(scenario: &Scenario, provenance: Provenance) -> Result<ConjugateReport> {
    let v = scenario
        .perturbation
        .as_ref()
        .ok_or_else(|| LiaoError::Validation("the conjugate command needs a `perturbation` field".into()))?;
    let cert = certify(scenario, provenance.clone())?;
    let (Some(xi_lambda), Some(eta_lambda), Some(tail_bound)) = (cert.xi, cert.eta, cert.tail_bound) else {
        return Err(LiaoError::Precondition(format!(
            "hyperbolicity certificate failed (eta_hat = {})",
            cert.eta_hat
        )));
    };
    let nb = &scenario.numeric;
    let mut config = ConjugacyConfig::new(
        nb.epsilon,
        nb.xi,
        eta_lambda,
        xi_lambda,
        cert.eta_hat,
        scenario.dimension(),
        scenario.p_minus,
    );
    config.horizon = nb.horizon;
    config.h = nb.h;
    config.tol = nb.tol;
    config.max_iter = nb.max_iter;
    config.max_radius = nb.max_radius;
    config.probe_time = nb.probe_time;
    config.equivariance_times = nb.equivariance_times.clone();
    config.lipschitz_pairs = nb.lipschitz_pairs;
    config.probe_stride = nb.probe_stride;
    config.frame_checks = nb.frame_checks;
    config.strict_neighborhood = nb.strict_neighborhood;
    config.seed = provenance.seed;

    let samples = scenario.samples();
    let result = conjugacy_map(&scenario.field, v, &samples, &config)?;
    let max_residual = result.max_equivariance_residual();
    let mut offsets = vec![None; samples.len()];
    let mut residuals = vec![Vec::new(); samples.len()];
    for ((i, o), e) in result.accepted.iter().zip(result.offsets).zip(result.equivariance) {
        offsets[*i] = Some(o);
        residuals[*i] = e;
    }
    Ok(ConjugateReport {
        certificate_ref: CertificateRef {
            scenario_hash: provenance.scenario_hash.clone(),
            pass: cert.pass,
            eta_hat: cert.eta_hat,
            eta_lambda,
            xi_lambda,
            tail_bound,
        },
        provenance,
        samples: samples.iter().map(|w| w.as_slice().to_vec()).collect(),
        offsets,
        residuals,
        config,
        failures: result.failures,
        injectivity: result.injectivity,
        max_offset: result.max_offset,
        max_residual,
    })
}

/// Runs `command` on a loaded scenario and writes its reports into `out`.
pub fn run(command: Command, scenario: &Scenario, hash: &str, seed: u64, out: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out)?;
    let provenance = Provenance {
        schema_version: SCHEMA_VERSION,
        command: command.name(),
        scenario: scenario.name.clone(),
        scenario_hash: hash.to_string(),
        seed,
    };
    let mut files = Vec::new();
    let success = match command {
        Command::Certify => {
            let report = certify(scenario, provenance)?;
            let path = out.join("certificate.json");
            write_json(&path, &report)?;
            files.push(path);
            report.pass
        }
        Command::Exponents => {
            let series = exponents(scenario)?;
            let k = scenario.dimension() - 1;
            let mut names = Vec::new();
            let mut mean_omega = Vec::new();
            for (i, rows) in series.iter().enumerate() {
                let name = format!("omega_{i}.csv");
                let path = out.join(&name);
                write_csv(&path, &omega_header(k), rows)?;
                files.push(path);
                names.push(name);
                let count = rows.len().max(1) as f64;
                mean_omega.push((1..=k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / count).collect());
            }
            let path = out.join("exponents.json");
            write_json(
                &path,
                &ExponentsReport {
                    provenance,
                    files: names,
                    mean_omega,
                },
            )?;
            files.push(path);
            true
        }
        Command::Delta => {
            let p = scenario.dichotomy.as_ref().map_or(0, |d| d.dimension());
            let run = delta(scenario, provenance)?;
            let z_cols = (1..=p).map(|k| format!("z_{k}"));
            let header: Vec<String> = std::iter::once("t".to_string()).chain(z_cols).collect();
            let path = out.join("bounded_solution.csv");
            write_csv(&path, &header, &run.solution_rows)?;
            files.push(path);
            let header: Vec<String> = std::iter::once("s".to_string())
                .chain((1..=p).map(|k| format!("u_{k}")))
                .chain((1..=p).map(|k| format!("delta_{k}")))
                .chain(std::iter::once("trajectory_sup".to_string()))
                .collect();
            let path = out.join("delta_map.csv");
            write_csv(&path, &header, &run.delta_rows)?;
            files.push(path);
            let path = out.join("delta.json");
            write_json(&path, &run.report)?;
            files.push(path);
            run.report.class.pass() && run.report.failures.is_empty()
        }
        Command::Conjugate => {
            let report = conjugate(scenario, provenance)?;
            let rows: Vec<Vec<f64>> = report
                .residuals
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().map(move |e| vec![i as f64, e.t, e.residual, e.ambient_time]))
                .collect();
            let path = out.join("residuals.csv");
            let header = ["sample", "t", "residual", "ambient_time"].map(String::from);
            write_csv(&path, &header, &rows)?;
            files.push(path);
            let path = out.join("conjugacy.json");
            write_json(&path, &report)?;
            files.push(path);
            report.failures.is_empty() && report.injectivity.as_ref().is_some_and(|r| r.injective && r.frame_independent)
        }
    };
    Ok(RunOutcome { files, success })
}

/// Exit status for a finished run: 0 success, 2 validation failure, 3 numeric failure.
pub fn exit_code(result: &Result<RunOutcome>) -> i32 {
    match result {
        Ok(o) if o.success => 0,
        Ok(_) => 3,
        Err(e) if e.is_validation() => 2,
        Err(_) => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stable_json_float_format() {
        let text = String::from_utf8(to_stable_json(&json!({"a": 0.1, "b": [1.0, f64::NAN]})).unwrap()).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        assert!(text.contains("1.0000000000000000e0"));
        assert!(text.contains("null"));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn header_format() {
        assert_eq!(omega_header(2).join(","), "t,omega_1,omega_2");
    }
}
