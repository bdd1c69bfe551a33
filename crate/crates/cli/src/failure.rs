use std::fmt;

use ddelab::Error;

/// Process-ending error: printed as `ddelab:error:<kind>: <message>` and
/// mapped to the exit code.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl Failure {
    pub fn new(kind: &'static str, message: String, code: u8) -> Self {
        Self { kind, message, code }
    }

    pub fn schema(message: String) -> Self {
        Self::new("schema", message, 2)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ddelab:error:{}: {}", self.kind, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = classify(&e);
        Self::new(kind, e.to_string(), code)
    }
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Column { source, .. } => classify(source),
        Error::BlowUp { .. } => ("blow_up", 3),
        Error::Refusal(_) => ("refusal", 5),
        Error::Io(_) => ("io", 1),
        Error::Parameter(_) | Error::Domain(_) | Error::Shape(_) | Error::Window { .. } | Error::Configuration(_) => {
            ("parameter", 2)
        }
        _ => ("numerics", 1),
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string(), 1)
    }
}
