//! Text summary and plot table for a metrics CSV.

use std::fmt::Write as _;

use droppeft_core::federation::{time_to_accuracy, MetricsRow};

/// Human-readable summary of a run's metrics.
pub fn summarize(rows: &[MetricsRow], target: f64) -> String {
    let mut out = String::new();
    let Some(last) = rows.last() else {
        out.push_str("no rounds\n");
        return out;
    };
    let flops: u64 = rows.iter().map(|r| r.flops).sum();
    let traffic: u64 = rows.iter().map(|r| r.traffic_bytes).sum();
    let energy: f64 = rows.iter().map(|r| r.energy_j).sum();
    let peak = rows.iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0);
    let tta = match time_to_accuracy(rows, target) {
        Some(t) => format!("{t:.3} s"),
        None => "not reached".to_string(),
    };
    writeln!(out, "rounds: {}", rows.len()).unwrap();
    writeln!(out, "simulated wall clock: {:.3} s", last.wall_clock_s).unwrap();
    writeln!(out, "final mean accuracy: {:.4}", last.mean_acc).unwrap();
    writeln!(out, "time to accuracy {target:.4}: {tta}").unwrap();
    writeln!(out, "total flops: {flops}").unwrap();
    writeln!(out, "total traffic: {traffic} bytes").unwrap();
    writeln!(out, "total energy: {energy:.3} J").unwrap();
    writeln!(out, "peak memory: {peak} bytes").unwrap();
    out
}

/// At most `points` rows, evenly spaced and always including the first and
/// last round.
pub fn downsample(rows: &[MetricsRow], points: usize) -> Vec<&MetricsRow> {
    let n = rows.len();
    if n <= points || points == 0 {
        return rows.iter().collect();
    }
    if points == 1 {
        return vec![&rows[n - 1]];
    }
    let mut picked: Vec<usize> = (0..points)
        .map(|i| (i * (n - 1) + (points - 1) / 2) / (points - 1))
        .collect();
    picked.dedup();
    picked.into_iter().map(|i| &rows[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<MetricsRow> {
        (1..=n)
            .map(|r| MetricsRow {
                round: r,
                wall_clock_s: r as f64,
                mean_acc: r as f64 / n as f64,
                flops: 1,
                traffic_bytes: 2,
                energy_j: 0.5,
                peak_mem_bytes: r as u64,
                arm_id: "none".into(),
            })
            .collect()
    }

    #[test]
    fn empty_summary() {
        assert_eq!(summarize(&[], 0.5), "no rounds\n");
    }

    #[test]
    fn not_reached_marker() {
        assert!(summarize(&rows(3), 1.5).contains("time to accuracy 1.5000: not reached"));
    }

    #[test]
    fn downsample_keeps_ends() {
        let r = rows(101);
        let d = downsample(&r, 11);
        assert_eq!(d.len(), 11);
        assert_eq!(d[0].round, 1);
        assert_eq!(d[10].round, 101);
        assert_eq!(d[5].round, 51);
        assert_eq!(downsample(&r[..5], 11).len(), 5);
    }
}
