//! Early-exit capability curve, efficacy, and evaluation reports.

use std::io::Write;

use rayon::prelude::*;

use crate::dataset::SampleSet;
use crate::error::{Error, Result};
use crate::multiexit::MultiExitNetwork;
use crate::policy::{adaptive_infer, ExitPolicy, InferenceRecord};

pub const DEFAULT_GRID_SIZE: usize = 1001;

/// Empirical CDF of per-sample cost fractions, sampled on a uniform grid
/// over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EecCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl EecCurve {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV export with header `cost_fraction,cumulative_fraction`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "cost_fraction,cumulative_fraction")?;
        for (c, v) in self.grid.iter().zip(&self.values) {
            writeln!(w, "{c},{v}")?;
        }
        Ok(())
    }
}

/// Curve from raw cost fractions; `build_eec` is the record-level entry point.
pub(crate) fn eec_from_costs(costs: &[f64], grid_size: usize) -> Result<EecCurve> {
    if costs.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if grid_size < 2 {
        return Err(Error::InvalidConfig("grid size must be at least 2".into()));
    }
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    let n = sorted.len() as f64;

    let mut grid = Vec::with_capacity(grid_size);
    let mut values = Vec::with_capacity(grid_size);
    let mut covered = 0usize;
    for i in 0..grid_size {
        let c = i as f64 / (grid_size - 1) as f64;
        while covered < sorted.len() && sorted[covered] <= c {
            covered += 1;
        }
        grid.push(c);
        values.push(covered as f64 / n);
    }
    Ok(EecCurve { grid, values })
}

/// Builds the early-exit capability curve: the value at cost `c` is the
/// fraction of records with `cost_fraction <= c`.
pub fn build_eec(records: &[InferenceRecord], grid_size: usize) -> Result<EecCurve> {
    let costs: Vec<f64> = records.iter().map(|r| r.cost_fraction).collect();
    eec_from_costs(&costs, grid_size)
}

/// Area under the EEC curve via the trapezoidal rule. Close to 1 when most
/// samples exit very early; 0 when no early exits are used.
pub fn efficacy(curve: &EecCurve) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.grid.len() {
        area += (curve.values[i] + curve.values[i - 1]) / 2.0 * (curve.grid[i] - curve.grid[i - 1]);
    }
    area
}

/// Aggregate evaluation of a network + policy over a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub efficacy: f64,
    pub accuracy: f64,
    pub per_exit_counts: Vec<usize>,
    pub mean_cost_fraction: f64,
    /// Wall-clock seconds spent crafting the perturbations under evaluation,
    /// when an attack stage supplied them. Machine-dependent; never asserted.
    pub crafting_seconds: Option<f64>,
}

impl EvalReport {
    pub fn num_samples(&self) -> usize {
        self.per_exit_counts.iter().sum()
    }
}

/// Per-sample adaptive inference over a labeled set. Samples are processed
/// individually; the parallel map preserves input order, so results are
/// identical to a sequential run.
pub fn evaluate_records(
    net: &MultiExitNetwork,
    policy: &ExitPolicy,
    set: &SampleSet,
) -> Result<Vec<InferenceRecord>> {
    policy.validate(net.num_exits())?;
    for &label in set.labels() {
        if label >= net.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: net.num_classes(),
            });
        }
    }
    set.samples()
        .par_iter()
        .map(|x| adaptive_infer(net, policy, x))
        .collect()
}

/// Builds an [`EvalReport`] from precomputed records and their labels.
pub fn report_from_records(
    records: &[InferenceRecord],
    labels: &[usize],
    num_exits: usize,
    grid_size: usize,
) -> Result<EvalReport> {
    if records.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "records vs labels",
            expected: vec![labels.len()],
            found: vec![records.len()],
        });
    }
    let curve = build_eec(records, grid_size)?;
    let mut per_exit_counts = vec![0usize; num_exits];
    let mut correct = 0usize;
    let mut cost_sum = 0.0;
    for (r, &y) in records.iter().zip(labels) {
        per_exit_counts[r.exit_index] += 1;
        if r.predicted_label == y {
            correct += 1;
        }
        cost_sum += r.cost_fraction;
    }
    Ok(EvalReport {
        efficacy: efficacy(&curve),
        accuracy: correct as f64 / records.len() as f64,
        per_exit_counts,
        mean_cost_fraction: cost_sum / records.len() as f64,
        crafting_seconds: None,
    })
}

/// Adaptive inference plus aggregation in one call.
pub fn evaluate(net: &MultiExitNetwork, policy: &ExitPolicy, set: &SampleSet) -> Result<EvalReport> {
    let records = evaluate_records(net, policy, set)?;
    report_from_records(&records, set.labels(), net.num_exits(), DEFAULT_GRID_SIZE)
}

/// CSV rows for a batch of tagged reports, header
/// `tag,efficacy,accuracy,mean_cost,n`.
pub fn write_report_csv<W: Write>(rows: &[(String, EvalReport)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "tag,efficacy,accuracy,mean_cost,n")?;
    for (tag, r) in rows {
        writeln!(
            w,
            "{tag},{},{},{},{}",
            r.efficacy,
            r.accuracy,
            r.mean_cost_fraction,
            r.num_samples()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records_at(costs: &[f64]) -> Vec<InferenceRecord> {
        costs
            .iter()
            .map(|&c| InferenceRecord {
                exit_index: 0,
                cost_fraction: c,
                predicted_label: 0,
                score: 0.0,
            })
            .collect()
    }

    #[test]
    fn all_final_exit_gives_near_zero_efficacy() {
        let curve = build_eec(&records_at(&[1.0; 5]), DEFAULT_GRID_SIZE).unwrap();
        assert!(curve.values()[..DEFAULT_GRID_SIZE - 1].iter().all(|&v| v == 0.0));
        assert_eq!(*curve.values().last().unwrap(), 1.0);
        assert!(efficacy(&curve) <= 1.0 / DEFAULT_GRID_SIZE as f64);
    }

    #[test]
    fn all_zero_cost_gives_near_one_efficacy() {
        let curve = build_eec(&records_at(&[0.0; 5]), DEFAULT_GRID_SIZE).unwrap();
        assert!(curve.values().iter().all(|&v| v == 1.0));
        assert!(efficacy(&curve) >= 0.999);
    }

    #[test]
    fn two_point_cdf_steps_where_expected() {
        let curve = build_eec(&records_at(&[0.5, 1.0]), 1001).unwrap();
        // 0 before 0.5, 0.5 on [0.5, 1), 1.0 at 1.
        assert_eq!(curve.values()[499], 0.0);
        assert_eq!(curve.values()[500], 0.5);
        assert_eq!(curve.values()[999], 0.5);
        assert_eq!(curve.values()[1000], 1.0);
        // Exact oracle: 1 - mean(cost) = 0.25.
        assert!((efficacy(&curve) - 0.25).abs() <= 2.0 / 1001.0);
    }

    #[test]
    fn empty_records_error() {
        assert!(matches!(build_eec(&[], 1001), Err(Error::EmptyRecords)));
    }

    #[test]
    fn report_counts_and_accuracy() {
        let records = vec![
            InferenceRecord { exit_index: 0, cost_fraction: 0.2, predicted_label: 1, score: 0.9 },
            InferenceRecord { exit_index: 2, cost_fraction: 1.0, predicted_label: 0, score: 0.4 },
            InferenceRecord { exit_index: 0, cost_fraction: 0.2, predicted_label: 1, score: 0.95 },
        ];
        let report = report_from_records(&records, &[1, 1, 0], 3, 1001).unwrap();
        assert_eq!(report.per_exit_counts, vec![2, 0, 1]);
        assert!((report.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(report.num_samples(), 3);
        assert!((report.mean_cost_fraction - 1.4 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        use crate::policy::{ExitPolicy, StopCriterion};
        use crate::testutil::{self, toy_net};
        let net = toy_net(60);
        let mut rng = testutil::rng(61);
        let samples = vec![testutil::random_tensor(&mut rng, vec![1, 4, 4], 1.0)];
        let labels = vec![3usize]; // only 3 classes: 0..=2
        let set = SampleSet::new(&samples, &labels).unwrap();
        let policy = ExitPolicy::never(StopCriterion::Confidence, net.num_exits());
        assert!(matches!(
            evaluate(&net, &policy, &set),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn csv_round_trip_matches() {
        let curve = build_eec(&records_at(&[0.25, 0.75, 0.75]), 101).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "cost_fraction,cumulative_fraction");
        for (line, (c, v)) in lines.zip(curve.grid().iter().zip(curve.values())) {
            let mut parts = line.split(',');
            let pc: f64 = parts.next().unwrap().parse().unwrap();
            let pv: f64 = parts.next().unwrap().parse().unwrap();
            assert_eq!(pc, *c);
            assert_eq!(pv, *v);
        }
    }

    proptest! {
        // The discrete identity behind the metric: integral of the CDF equals
        // 1 - mean(cost), up to grid resolution.
        #[test]
        fn efficacy_matches_one_minus_mean_cost(
            costs in proptest::collection::vec(0.0f64..=1.0, 1..200),
        ) {
            let curve = eec_from_costs(&costs, DEFAULT_GRID_SIZE).unwrap();
            let eff = efficacy(&curve);
            let mean: f64 = costs.iter().sum::<f64>() / costs.len() as f64;
            prop_assert!((eff - (1.0 - mean)).abs() <= 2.0 / DEFAULT_GRID_SIZE as f64);
            prop_assert!((0.0..=1.0).contains(&eff));
        }

        // Moving any record to a strictly smaller cost never lowers efficacy.
        #[test]
        fn efficacy_monotone_under_cost_reduction(
            costs in proptest::collection::vec(0.01f64..=1.0, 2..50),
            idx in 0usize..50,
            shrink in 0.1f64..1.0,
        ) {
            let idx = idx % costs.len();
            let eff_before = efficacy(&eec_from_costs(&costs, 1001).unwrap());
            let mut reduced = costs.clone();
            reduced[idx] *= shrink;
            let eff_after = efficacy(&eec_from_costs(&reduced, 1001).unwrap());
            prop_assert!(eff_after >= eff_before - 1e-12);
        }
    }
}
