use thiserror::Error;

/// Errors raised by the simulator and its supporting operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("degenerate Jacobian: det = {det:e} at node {node}")]
    DegenerateJacobian { node: usize, det: f64 },
    #[error("interface polyline self-intersects (segments {a} and {b})")]
    SelfIntersecting { a: usize, b: usize },
    #[error("no active fluid cell near point ({x}, {y})")]
    InterpolationOutOfDomain { x: f64, y: f64 },
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("line search failed after {iterations} backtracks")]
    LineSearchFailed { iterations: usize },
    #[error("solver hit the iteration cap ({iterations}) with decrement {decrement:e}")]
    MaxIterations { iterations: usize, decrement: f64 },
    #[error("contact imminent: separation {separation:e} below threshold {threshold:e}")]
    ContactImminent { separation: f64, threshold: f64 },
    #[error("injectivity lost: Ciarlet–Nečas residual {residual:e} exceeds {tolerance:e}")]
    InjectivityViolated { residual: f64, tolerance: f64 },
    #[error("flow-map sample {index} escaped the fluid region by {distance:e}")]
    SampleEscaped { index: usize, distance: f64 },
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("invalid configuration: {0}")]
    ValidationError(String),
    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, SimError>;

impl SimError {
    pub fn io(context: impl Into<String>, err: std::io::Error) -> Self {
        SimError::Io { context: context.into(), message: err.to_string() }
    }
}
