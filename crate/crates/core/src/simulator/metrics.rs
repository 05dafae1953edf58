use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::model::StateVector;

/// Sensitivity `TP/PO` and specificity `TN/NE` of flagging every individual
/// whose marginal is at least `threshold`; `None` when the denominator is 0.
pub fn sensitivity_specificity(marginal: &[f64], threshold: f64, truth: &StateVector) -> (Option<f64>, Option<f64>) {
    assert_eq!(marginal.len(), truth.len(), "marginal and truth differ in length");
    let (mut tp, mut po, mut tn, mut ne) = (0usize, 0usize, 0usize, 0usize);
    for (i, &m) in marginal.iter().enumerate() {
        let flagged = m >= threshold;
        if truth.get(i) {
            po += 1;
            tp += flagged as usize;
        } else {
            ne += 1;
            tn += !flagged as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    (ratio(tp, po), ratio(tn, ne))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub cycle: usize,
    pub threshold: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    pub n_runs: usize,
    pub n_sens_defined: usize,
}

/// Per (policy, cycle, threshold) averages. Sensitivity averages only runs
/// with at least one infected individual; specificity only runs with at
/// least one healthy one. An average over no runs is NaN.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str = "policy,cycle,threshold,mean_sensitivity,mean_specificity,n_runs,n_sens_defined";

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.count += 1;
        }
    }

    fn value(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

impl MetricsTable {
    /// Aggregates trajectories of one policy, cycles `1..=T`.
    pub fn from_trajectories(policy: &str, trajectories: &[Trajectory], thresholds: &[f64]) -> Self {
        let cycles = trajectories.iter().map(|t| t.cycles.len()).max().unwrap_or(0);
        let mut rows = Vec::new();
        for cycle in 1..=cycles {
            for &threshold in thresholds {
                let (mut sens, mut spec) = (Mean::default(), Mean::default());
                let mut runs = 0;
                for t in trajectories {
                    let Some(rec) = t.cycles.get(cycle - 1) else {
                        continue;
                    };
                    runs += 1;
                    let (se, sp) = sensitivity_specificity(&rec.marginal, threshold, &t.truth);
                    sens.add(se);
                    spec.add(sp);
                }
                rows.push(MetricsRow {
                    policy: policy.to_string(),
                    cycle,
                    threshold,
                    mean_sensitivity: sens.value(),
                    mean_specificity: spec.value(),
                    n_runs: runs,
                    n_sens_defined: sens.count,
                });
            }
        }
        MetricsTable { rows }
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn find(&self, policy: &str, cycle: usize, threshold: f64) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.cycle == cycle && r.threshold == threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.policy),
                r.cycle,
                r.threshold,
                r.mean_sensitivity,
                r.mean_specificity,
                r.n_runs,
                r.n_sens_defined
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub threshold: f64,
    pub mean_specificity: f64,
    pub mean_sensitivity: f64,
}

/// Mean (specificity, sensitivity) at `cycle` for every threshold.
pub fn frontier(trajectories: &[Trajectory], cycle: usize, thresholds: &[f64]) -> Vec<FrontierPoint> {
    thresholds
        .iter()
        .map(|&threshold| {
            let (mut sens, mut spec) = (Mean::default(), Mean::default());
            for t in trajectories {
                if let Some(rec) = cycle.checked_sub(1).and_then(|c| t.cycles.get(c)) {
                    let (se, sp) = sensitivity_specificity(&rec.marginal, threshold, &t.truth);
                    sens.add(se);
                    spec.add(sp);
                }
            }
            FrontierPoint {
                threshold,
                mean_specificity: spec.value(),
                mean_sensitivity: sens.value(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::CycleRecord;

    fn sv(bits: &[u8]) -> StateVector {
        StateVector::from_bits(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
    }

    fn traj(truth: &[u8], marginal: Vec<f64>) -> Trajectory {
        Trajectory {
            version: Trajectory::VERSION,
            policy: "p".into(),
            run: 0,
            truth: sv(truth),
            cycles: vec![CycleRecord {
                cycle: 1,
                groups: vec![],
                outcomes: vec![],
                marginal,
                source: crate::decoder::DecodeSource::Lbp,
                bridge_steps: None,
                elapsed_ms: 0.0,
            }],
        }
    }

    #[test]
    fn confusion_examples() {
        let truth = sv(&[0, 1, 1, 0]);
        assert_eq!(sensitivity_specificity(&[0.0, 1.0, 1.0, 0.0], 0.5, &truth), (Some(1.0), Some(1.0)));
        assert_eq!(sensitivity_specificity(&[0.3, 0.2], 0.5, &sv(&[0, 0])), (None, Some(1.0)));
        assert_eq!(sensitivity_specificity(&[0.2, 0.8], 0.1, &sv(&[0, 1])), (Some(1.0), Some(0.0)));
        assert_eq!(sensitivity_specificity(&[0.2, 0.8], 0.9, &sv(&[0, 1])), (Some(0.0), Some(1.0)));
    }

    #[test]
    fn frontier_extremes() {
        let ts = vec![traj(&[0, 1, 0], vec![0.0, 0.4, 0.7]), traj(&[1, 1, 0], vec![0.1, 0.9, 0.2])];
        let f = frontier(&ts, 1, &[0.0, 1.0 + 1e-9]);
        assert_eq!(f[0].mean_sensitivity, 1.0);
        assert_eq!(f[1].mean_specificity, 1.0);
    }

    #[test]
    fn table_skips_undefined_sensitivity() {
        let ts = vec![traj(&[0, 0, 0], vec![0.0, 0.4, 0.7]), traj(&[1, 1, 0], vec![0.1, 0.9, 0.2])];
        let m = MetricsTable::from_trajectories("p", &ts, &[0.5]);
        let row = m.find("p", 1, 0.5).unwrap();
        assert_eq!(row.n_runs, 2);
        assert_eq!(row.n_sens_defined, 1);
        assert_eq!(row.mean_sensitivity, 0.5);
        assert!((row.mean_specificity - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        let csv = m.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }
}
