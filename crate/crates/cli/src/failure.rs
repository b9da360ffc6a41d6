use std::fmt;

use doa_core::Error as CoreError;
use serde_json::json;

/// Invalid flags, configuration files or path layouts.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Input that parsed but cannot be used, e.g. a missing prediction file.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

pub fn config(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn data(msg: impl Into<String>) -> anyhow::Error {
    DataError(msg.into()).into()
}

fn classify_core(e: &CoreError) -> (&'static str, u8) {
    use CoreError::*;
    match e {
        Config(_) => ("config", 2),
        Io(_) => ("io", 3),
        NonFiniteLoss { .. } | NonFinite(_) | NegativeConcentration { .. } => ("numerical", 5),
        ShapeMismatch(_) | MissingNorms => ("model_mismatch", 6),
        _ => ("data", 4),
    }
}

pub struct Report {
    pub code: u8,
    pub json: String,
}

pub fn report(e: &anyhow::Error) -> Report {
    let mut kind = ("internal", 1u8);
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            kind = classify_core(c);
            break;
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            kind = ("config", 2);
            break;
        }
        if cause.is::<DataError>() || cause.is::<serde_json::Error>() {
            kind = ("data", 4);
            break;
        }
        if cause.is::<std::io::Error>() {
            kind = ("io", 3);
            break;
        }
    }
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    let json = json!({
        "status": "error",
        "kind": kind.0,
        "exit_code": kind.1,
        "message": chain.join(": "),
        "causes": chain,
    });
    Report {
        code: kind.1,
        json: json.to_string(),
    }
}
