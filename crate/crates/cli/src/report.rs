//! Report rendering: parses the emitted CSVs back and prints the paper-style
//! tables (efficacy / accuracy to two decimals).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mxlab_core::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub rad: String,
    pub attack: String,
    pub efficacy: f64,
    pub accuracy: f64,
    pub mean_cost: f64,
    pub n: usize,
}

fn bad_csv(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::InvalidDataset(format!("{}: {what}", path.display()))
}

/// Parses `summary.csv` (`tag,efficacy,accuracy,mean_cost,n`).
pub fn parse_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad_csv(path, "empty file"))?;
    if header != "tag,efficacy,accuracy,mean_cost,n" {
        return Err(bad_csv(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad_csv(path, format!("line {}: wrong arity", lineno + 2)));
        }
        let (rad, attack) = fields[0]
            .split_once('/')
            .ok_or_else(|| bad_csv(path, format!("tag {:?} lacks rad/attack form", fields[0])))?;
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad_csv(path, format!("line {}: {e}", lineno + 2)))
        };
        rows.push(SummaryRow {
            rad: rad.to_string(),
            attack: attack.to_string(),
            efficacy: parse_f(fields[1])?,
            accuracy: parse_f(fields[2])?,
            mean_cost: parse_f(fields[3])?,
            n: fields[4]
                .parse()
                .map_err(|e| bad_csv(path, format!("line {}: {e}", lineno + 2)))?,
        });
    }
    Ok(rows)
}

/// Renders the grouped efficacy/accuracy table for one run directory.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut by_rad: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        by_rad.entry(&row.rad).or_default().push(row);
    }
    let mut out = String::new();
    for (rad, rows) in by_rad {
        out.push_str(&format!("setting {rad}\n"));
        out.push_str(&format!(
            "  {:<28} {:>8} {:>9} {:>10} {:>6}\n",
            "attack", "efficacy", "accuracy", "mean_cost", "n"
        ));
        for row in rows {
            out.push_str(&format!(
                "  {:<28} {:>8.2} {:>8.0}% {:>10.2} {:>6}\n",
                row.attack,
                row.efficacy,
                row.accuracy * 100.0,
                row.mean_cost,
                row.n
            ));
        }
        out.push('\n');
    }
    out
}

/// Prints summary, partition, and timing tables found under `dir`.
pub fn render_run_dir(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let summary = dir.join("summary.csv");
    if summary.exists() {
        out.push_str(&render_summary(&parse_summary(&summary)?));
    }
    let partition = dir.join("partition.csv");
    if partition.exists() {
        out.push_str("partition (scenario, p, avg_latency_ms, amplification)\n");
        for line in fs::read_to_string(&partition)?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 4 {
                let p: f64 = f[1].parse().unwrap_or(f64::NAN);
                let lat: f64 = f[2].parse().unwrap_or(f64::NAN);
                let amp = if f[3].is_empty() {
                    "-".to_string()
                } else {
                    format!("{:.2}", f[3].parse::<f64>().unwrap_or(f64::NAN))
                };
                out.push_str(&format!("  {:<28} {:>6.2} {:>8.2} {:>6}\n", f[0], p, lat, amp));
            }
        }
        out.push('\n');
    }
    let timing = dir.join("timing.csv");
    if timing.exists() {
        out.push_str("crafting time (machine-dependent)\n");
        for line in fs::read_to_string(&timing)?.lines().skip(1) {
            if let Some((tag, secs)) = line.split_once(',') {
                let s: f64 = secs.parse().unwrap_or(f64::NAN);
                out.push_str(&format!("  {tag:<28} {s:>8.2} s\n"));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        fs::write(
            &path,
            "tag,efficacy,accuracy,mean_cost,n\nrad5/baseline,0.62,0.9125,0.38,400\nrad5/deepsloth,0.013,0.1475,0.99,400\n",
        )
        .unwrap();
        let rows = parse_summary(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rad, "rad5");
        assert_eq!(rows[1].attack, "deepsloth");
        assert!((rows[1].efficacy - 0.013).abs() < 1e-12);
        let table = render_summary(&rows);
        assert!(table.contains("setting rad5"));
        assert!(table.contains("0.01"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        fs::write(&path, "a,b\n").unwrap();
        assert!(parse_summary(&path).is_err());
    }
}
