use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Outcome of one run. Collision counts are controlled/uncontrolled pairs
/// summed over timesteps, so an overlap lasting `k` steps counts `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Executed timesteps.
    pub steps: usize,
    /// Goals reached per timestep of the mission.
    pub throughput: f64,
    pub goals: usize,
    pub goals_per_agent: Vec<usize>,
    /// Per agent: steps until its last goal arrival.
    pub service_time: Vec<usize>,
    /// One-shot runs: timestep at which every agent has arrived.
    pub makespan: Option<usize>,
    pub collisions: usize,
    pub collisions_per_step: Vec<usize>,
    /// Collisions involving an agent that was excluded from planning.
    pub forced_collisions: usize,
    /// Uncontrolled agents sharing a cell (not a violation).
    pub uncontrolled_overlaps: usize,
    /// Controlled/controlled vertex or swap conflicts in the executed
    /// trajectories. Always zero for a correct planner.
    pub controlled_conflicts: usize,
    pub windows: usize,
    pub violation_windows: usize,
    /// Agent-windows spent excluded.
    pub exclusions: usize,
    /// Fraction of windows whose interval sets contained every true
    /// uncontrolled position.
    pub coverage: Option<f64>,
    /// Collisions not explained by leaving the interval sets or by an
    /// exclusion. Always zero for a correct planner.
    pub containment_violations: usize,
    pub realtime_violations: usize,
    pub runtime_s: f64,
    pub window_runtimes_s: Vec<f64>,
    pub expanded: usize,
    pub w_final: f64,
    /// Mean number of interval vertices per step.
    pub mean_set_size: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(n_controlled: usize) -> Self {
        Self {
            steps: 0,
            throughput: 0.0,
            goals: 0,
            goals_per_agent: alloc::vec![0; n_controlled],
            service_time: alloc::vec![0; n_controlled],
            makespan: None,
            collisions: 0,
            collisions_per_step: Vec::new(),
            forced_collisions: 0,
            uncontrolled_overlaps: 0,
            controlled_conflicts: 0,
            windows: 0,
            violation_windows: 0,
            exclusions: 0,
            coverage: None,
            containment_violations: 0,
            realtime_violations: 0,
            runtime_s: 0.0,
            window_runtimes_s: Vec::new(),
            expanded: 0,
            w_final: 0.0,
            mean_set_size: None,
        }
    }

    /// At least one collision with an uncontrolled agent.
    pub fn violation(&self) -> bool {
        self.collisions > 0
    }

    /// Zero all wall-clock fields so records can be compared byte for byte.
    pub fn strip_timing(&mut self) {
        self.runtime_s = 0.0;
        for r in &mut self.window_runtimes_s {
            *r = 0.0;
        }
        self.realtime_violations = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Stat {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub throughput: Stat,
    pub collisions: Stat,
    pub runtime_s: Stat,
    pub violation_rate: f64,
    pub coverage: Option<Stat>,
}

/// Mean/median/max per group key.
pub fn aggregate<K: Ord + Clone>(records: &[(K, MetricsRecord)]) -> Vec<(K, Summary)> {
    let mut groups: BTreeMap<K, Vec<&MetricsRecord>> = BTreeMap::new();
    for (k, r) in records {
        groups.entry(k.clone()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let col = |f: &dyn Fn(&MetricsRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let cov: Vec<f64> = rs.iter().filter_map(|r| r.coverage).collect();
            let summary = Summary {
                runs: rs.len(),
                throughput: Stat::of(&col(&|r| r.throughput)).expect("group is non-empty"),
                collisions: Stat::of(&col(&|r| r.collisions as f64)).expect("group is non-empty"),
                runtime_s: Stat::of(&col(&|r| r.runtime_s)).expect("group is non-empty"),
                violation_rate: rs.iter().filter(|r| r.violation()).count() as f64 / rs.len() as f64,
                coverage: Stat::of(&cov),
            };
            (k, summary)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(throughput: f64, collisions: usize) -> MetricsRecord {
        MetricsRecord {
            throughput,
            collisions,
            ..MetricsRecord::empty(1)
        }
    }

    #[test]
    fn single_record_summary_equals_it() {
        let s = aggregate(&[("a", rec(0.5, 3))]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].1.throughput, Stat { mean: 0.5, median: 0.5, max: 0.5 });
        assert_eq!(s[0].1.violation_rate, 1.0);
    }

    #[test]
    fn three_seeds_mean() {
        let rs = [("k", rec(0.1, 0)), ("k", rec(0.2, 2)), ("k", rec(0.6, 4)), ("j", rec(1.0, 0))];
        let s = aggregate(&rs);
        let k = &s.iter().find(|(k, _)| *k == "k").unwrap().1;
        assert!((k.throughput.mean - 0.3).abs() < 1e-12);
        assert_eq!(k.throughput.median, 0.2);
        assert_eq!(k.collisions.max, 4.0);
        assert_eq!(k.collisions.mean, 2.0);
        assert!((k.violation_rate - 2.0 / 3.0).abs() < 1e-12);
    }
}
