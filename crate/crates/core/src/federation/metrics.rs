//! Per-round metrics and their CSV/JSON forms.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics CSV.
pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "wall_clock_s",
    "mean_acc",
    "flops",
    "traffic_bytes",
    "energy_j",
    "peak_mem_bytes",
    "arm_id",
];

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    /// Cumulative simulated seconds.
    pub wall_clock_s: f64,
    pub mean_acc: f64,
    pub flops: u64,
    pub traffic_bytes: u64,
    pub energy_j: f64,
    pub peak_mem_bytes: u64,
    pub arm_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub row: MetricsRow,
    /// Flops spent inside transformer layers (excludes embedding and head).
    pub layer_flops: u64,
    /// Sampled devices, ascending.
    pub participants: Vec<usize>,
    /// Validation accuracy of each participant after local training.
    pub accuracies: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Uploaded layer count per participant.
    pub shared_layers: Vec<usize>,
    /// Per-participant round time.
    pub round_seconds: Vec<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: impl IntoIterator<Item = MetricsRow>, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_HEADER).map_err(csv_error)?;
    for row in rows {
        out.serialize(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a metrics CSV, checking the header. Errors carry the 1-based line
/// number of the offending row.
pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::input(format!(
            "line 1: expected header {}, found {}",
            METRICS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: MetricsRow = record.map_err(|e| Error::input(format!("line {}: {e}", i + 2)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}

/// First cumulative wall-clock at which mean accuracy reaches `target`.
pub fn time_to_accuracy(rows: &[MetricsRow], target: f64) -> Option<f64> {
    rows.iter().find(|r| r.mean_acc >= target).map(|r| r.wall_clock_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: usize,
    pub target_accuracy: f64,
    /// `None` when the target was never reached.
    pub time_to_accuracy_s: Option<f64>,
    /// Mean test accuracy over devices with a non-empty test slice.
    pub final_accuracy: f64,
    pub pretrain_accuracy: f64,
    pub wall_clock_s: f64,
    pub total_flops: u64,
    pub total_layer_flops: u64,
    pub total_traffic_bytes: u64,
    pub total_energy_j: f64,
    pub peak_mem_bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, clock: f64, acc: f64) -> MetricsRow {
        MetricsRow {
            round,
            wall_clock_s: clock,
            mean_acc: acc,
            flops: 10,
            traffic_bytes: 20,
            energy_j: 0.5,
            peak_mem_bytes: 30,
            arm_id: "decay@0.4".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(1, 1.5, 0.25), row(2, 3.0, 0.5)];
        let mut buf = Vec::new();
        write_metrics_csv(rows.clone(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("round,wall_clock_s,mean_acc,flops,traffic_bytes,energy_j,peak_mem_bytes,arm_id\n"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn empty_table_has_header_only() {
        let mut buf = Vec::new();
        write_metrics_csv(Vec::new(), &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        assert!(read_metrics_csv(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "round,wall_clock_s,mean_acc,flops,traffic_bytes,energy_j,peak_mem_bytes,arm_id\n1,1,0.5,1,1,1,1,a\n2,x,0.5,1,1,1,1,a\n";
        let err = read_metrics_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(read_metrics_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn time_to_accuracy_examples() {
        let rows = vec![row(1, 1.0, 0.3), row(2, 2.0, 0.7), row(3, 3.0, 0.9)];
        assert_eq!(time_to_accuracy(&rows, 0.7), Some(2.0));
        assert_eq!(time_to_accuracy(&rows, 0.95), None);
        assert_eq!(time_to_accuracy(&[], 0.1), None);
    }
}
