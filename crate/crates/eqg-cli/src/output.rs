//! Provenance-stamped result emission.
//!
//! Every CSV starts with a provenance comment (config hash, seed, version)
//! and — unless `--strict` — a timestamp comment; the data that follows is
//! printed at 17 significant digits so files re-ingest bit-exactly. JSON
//! reports embed the same provenance as a `provenance` object.

use std::fs;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::Failure;

pub struct Emitter {
    pub dir: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    /// Strict mode omits the timestamp line so repeated runs are
    /// byte-identical.
    pub strict: bool,
}

impl Emitter {
    fn version() -> &'static str {
        env!("CARGO_PKG_VERSION")
    }

    fn unix_now() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    /// Comment lines prepended to every CSV.
    fn provenance_comment(&self) -> String {
        let mut lines = format!(
            "# provenance config_sha256={} seed={} version={}\n",
            self.config_sha256,
            self.seed,
            Self::version()
        );
        if !self.strict {
            lines.push_str(&format!("# generated_unix {}\n", Self::unix_now()));
        }
        lines
    }

    fn provenance_json(&self) -> Value {
        let mut obj = json!({
            "configSha256": self.config_sha256,
            "seed": self.seed,
            "version": Self::version(),
        });
        if !self.strict {
            obj["generatedUnix"] = json!(Self::unix_now());
        }
        obj
    }

    fn ensure_dir(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| Failure::Output(format!("{}: {e}", self.dir.display())))
    }

    /// Write `body` (header row plus data rows) under the provenance
    /// comment. Returns the file path.
    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf, Failure> {
        self.ensure_dir()?;
        let path = self.dir.join(name);
        let content = format!("{}{body}", self.provenance_comment());
        fs::write(&path, content).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    /// Serialize `report` to pretty JSON with a `provenance` field injected
    /// at the top level. Returns the file path.
    pub fn write_json<T: Serialize>(&self, name: &str, report: &T) -> Result<PathBuf, Failure> {
        self.ensure_dir()?;
        let mut value = serde_json::to_value(report)
            .map_err(|e| Failure::Output(format!("serializing {name}: {e}")))?;
        match &mut value {
            Value::Object(map) => {
                map.insert("provenance".into(), self.provenance_json());
            }
            _ => {
                value = json!({
                    "provenance": self.provenance_json(),
                    "value": value,
                });
            }
        }
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(&value)
            .map_err(|e| Failure::Output(format!("serializing {name}: {e}")))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
