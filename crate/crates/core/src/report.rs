//! JSON envelopes for persisted reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    /// Report type, e.g. `duality` or `smp`.
    pub kind: String,
    pub report: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: &str, report: T) -> Self {
        Envelope {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            report,
        }
    }
}

pub fn to_json<T: Serialize>(kind: &str, report: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Envelope::new(kind, report))?)
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, report: &T) -> Result<()> {
    let mut text = to_json(kind, report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    #[test]
    fn envelope_round_trip() {
        let e = Estimate {
            mean: 0.1 + 0.2,
            half_width: 1e-17,
        };
        let text = to_json("estimate", &e).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        let back: Envelope<Estimate> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.report, e);
    }
}
