use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a mathematical operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model, policy or configuration fails validation.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// A policy has no action distribution at a state the run reached.
    #[error("policy `{policy}` is undefined at state {state}, step {step}")]
    UndefinedPolicy {
        policy: String,
        state: usize,
        step: usize,
    },

    /// An enumeration or construction would exceed its configured cap.
    #[error("{what}: {count} exceeds the cap of {cap}")]
    SizeCap { what: &'static str, count: f64, cap: f64 },

    #[error("unknown policy id `{0}`")]
    UnknownPolicy(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A built-in or file environment could not be constructed.
    #[error("environment error: {0}")]
    Environment(String),

    /// A JSON document does not follow its schema; `pointer` locates the offending value.
    #[error("schema violation at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { what, reason: reason.into() }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

/// Deserializes `text` as `T`, reporting failures as a JSON pointer into the document.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let pointer = json_pointer(err.path());
        Error::Schema { pointer, message: err.inner().to_string() }
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}
