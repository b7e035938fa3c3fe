use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One training iteration. Loss fields are `None` when the term is not used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub iteration: usize,
    pub stage: u8,
    pub sup_au: Option<f64>,
    pub con: Option<f64>,
    pub bcl: Option<f64>,
    pub sup_ced: Option<f64>,
    pub pcl: Option<f64>,
    pub total: f64,
    pub lambda_g: f64,
    pub lr: f64,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

impl RunLogRecord {
    /// Equality ignoring wall time.
    pub fn same_run(&self, other: &Self) -> bool {
        RunLogRecord { wall_time: 0.0, ..self.clone() } == RunLogRecord { wall_time: 0.0, ..other.clone() }
    }
}

pub fn write_jsonl<W: Write>(w: &mut W, records: &[RunLogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<RunLogRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let r = RunLogRecord {
            iteration: 3,
            stage: 1,
            sup_au: Some(0.5),
            con: None,
            bcl: Some(1.25),
            sup_ced: None,
            pcl: None,
            total: 0.6,
            lambda_g: 0.001,
            lr: 0.01,
            wall_time: 1.5,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[r.clone(), r.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = read_jsonl(&text).unwrap();
        assert_eq!(back, vec![r.clone(), r.clone()]);
        assert!(back[0].same_run(&RunLogRecord { wall_time: 9.0, ..r }));
    }
}
