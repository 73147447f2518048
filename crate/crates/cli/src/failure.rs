use std::path::PathBuf;

/// Failures that map to their own exit status.
#[derive(Debug)]
pub enum Failure {
    MissingInput(PathBuf),
    InvalidConfig(String),
    SchemaMismatch { expected: String, found: String },
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            Failure::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            Failure::SchemaMismatch { expected, found } => {
                write!(f, "schema mismatch: model expects {expected}, data has {found}")
            }
        }
    }
}

impl std::error::Error for Failure {}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;
pub const EXIT_SCHEMA_MISMATCH: u8 = 4;

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::MissingInput(_) => EXIT_MISSING_INPUT,
                Failure::InvalidConfig(_) => EXIT_USAGE,
                Failure::SchemaMismatch { .. } => EXIT_SCHEMA_MISMATCH,
            };
        }
        if let Some(e) = cause.downcast_ref::<attend::Error>() {
            match e {
                attend::Error::SchemaMismatch { .. } => return EXIT_SCHEMA_MISMATCH,
                attend::Error::Config(_) => return EXIT_USAGE,
                attend::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => return EXIT_MISSING_INPUT,
                _ => {}
            }
        }
    }
    EXIT_FAILURE
}
