use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::StepResult;
use crate::error::Result;

/// One environment transition as written to a JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub actions: Vec<usize>,
    #[serde(flatten)]
    pub step: StepResult,
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CoopNav, Environment, GridConfig};

    #[test]
    fn trace_roundtrip() {
        let mut env = CoopNav::new(GridConfig::default()).unwrap();
        let records: Vec<TraceRecord> = (0..4)
            .map(|t| {
                let actions = vec![t % 5, 1, 3];
                TraceRecord {
                    t,
                    step: env.step(&actions).unwrap(),
                    actions,
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_trace(&mut buf, &records).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 4);
        assert_eq!(read_trace(buf.as_slice()).unwrap(), records);
    }
}
