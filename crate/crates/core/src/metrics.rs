//! Line-delimited training metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics log: `{"step": .., "<name>": .., ...}`.
///
/// Wall-clock time is left out so logs from identical runs are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(step: usize, values: &[(&str, f64)]) -> Self {
        Self { step, values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Write records as JSON lines, rejecting non-monotone steps.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(w) = records.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(Error::invalid(format!("metrics steps not increasing: {} then {}", w[0].step, w[1].step)));
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_flat_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![MetricsRecord::new(0, &[("loss", 2.5), ("lr", 0.1)]), MetricsRecord::new(1, &[("loss", 2.0), ("lr", 0.2)])];
        write_metrics(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"step":0,"loss":2.5,"lr":0.1}"#);
        assert_eq!(read_metrics(&p).unwrap(), recs);
        let bad = vec![recs[1].clone(), recs[0].clone()];
        assert!(write_metrics(&p, &bad).is_err());
    }
}
