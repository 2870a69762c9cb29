//! The `metrics.csv` row format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

/// Header, in order: `seed,engine,round,eval_nu,mean_accuracy,wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    /// Scenario label.
    pub engine: String,
    pub round: usize,
    pub eval_nu: usize,
    pub mean_accuracy: f64,
    pub wall_ms: u64,
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
