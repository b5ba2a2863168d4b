use thiserror::Error;

pub type Result<T, E = LiaoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LiaoError {
    #[error("parse error in `{input}` at byte {position}: {message}")]
    Parse {
        input: String,
        position: usize,
        message: String,
    },

    #[error("component {component} evaluated to a non-finite value")]
    EvaluationOverflow { component: usize },

    #[error("trajectory diverged (|state| = {norm:e}) after t = {last_time}")]
    Divergence { last_time: f64, norm: f64 },

    #[error("integrator exceeded {steps} steps before reaching t = {target}")]
    StepLimit { steps: usize, target: f64 },

    #[error("field vanishes ({speed:e}) {context}")]
    Singularity { context: String, speed: f64 },

    #[error("frame transport degenerate at t = {time} (condition {condition:e}); use a smaller step")]
    DegenerateTransport { time: f64, condition: f64 },

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error("window {window} shorter than the largest test length {required}")]
    InsufficientWindow { window: f64, required: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("point leaves the chart: |y| = {norm} >= radius {radius}")]
    OutOfChart { norm: f64, radius: f64 },

    #[error("chart jacobian ill-conditioned ({condition:e}) at t = {time}; shrink the chart radius")]
    ChartDegeneracy { time: f64, condition: f64 },

    #[error("longitudinal speed {speed} outside [1/2, 2] at t = {time}; perturbation too large")]
    NotInNeighborhood { time: f64, speed: f64 },

    #[error("neighborhood inequality {inequality} violated: {value:e} > {bound:e}")]
    NeighborhoodViolated {
        inequality: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("Picard iteration did not contract after {iterations} iterations (empirical ratio {ratio})")]
    NonContraction { iterations: usize, ratio: f64 },

    #[error("bounded solution defect {defect:e} exceeds {limit:e}")]
    Defect { defect: f64, limit: f64 },

    #[error("non-finite values in {0}; rescale or shrink the horizon")]
    Overflow(String),

    #[error("perturbed trajectory unreliable on the window: {0}")]
    UnreliableDelta(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LiaoError {
    /// Input-side problems (bad scenario, bad arguments) as opposed to numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LiaoError::Parse { .. }
                | LiaoError::Validation(_)
                | LiaoError::UnknownKeys(_)
                | LiaoError::Json(_)
                | LiaoError::Io(_)
        )
    }
}
