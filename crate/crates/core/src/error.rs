use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient history: need t - r >= {needed}, trajectory starts at {available}")]
    InsufficientHistory { needed: f64, available: f64 },

    #[error("integrator configuration: {0}")]
    Configuration(String),

    #[error("solution blew up after t = {last_valid_t}")]
    BlowUp { last_valid_t: f64 },

    #[error("column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("composition mismatch: {0}")]
    Composition(String),

    #[error("window too short: h = {h} < r = {r}")]
    Window { h: f64, r: f64 },

    #[error("stable and unstable frames nearly collinear at window {window} (sin angle {angle:e})")]
    SplittingDegeneracy { window: usize, angle: f64 },

    #[error("no exponential dichotomy: {0}")]
    Refusal(String),

    #[error("root on contour near {re} + {im}i; adjust the search box")]
    BoxAdjust { re: f64, im: f64 },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("quadrature did not converge on [{a}, {b}]; refine the mesh")]
    Quadrature { a: f64, b: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
