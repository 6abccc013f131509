//! Accuracy metrics and the exports behind the distribution figures.
//!
//! Worst-group accuracy is the minimum over the nonempty attribute x label
//! groups; the average is plain accuracy over every meta interaction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, GroupKey};
use crate::io::{round6, write_atomic, write_json_atomic};

pub const RATIO_BINS: usize = 20;

/// Positive for `p >= 0.5`.
pub fn classify(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub group: GroupKey,
    pub predicted: u8,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub count: usize,
    pub correct: usize,
}

impl GroupStat {
    /// `None` for an empty group.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Indexed by `GroupKey::index`.
    pub groups: [GroupStat; GroupKey::COUNT],
}

impl GroupMetrics {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn correct(&self) -> usize {
        self.groups.iter().map(|g| g.correct).sum()
    }

    /// Minimum accuracy over nonempty groups.
    pub fn worst(&self) -> Option<f64> {
        self.groups
            .iter()
            .filter_map(GroupStat::accuracy)
            .min_by(f64::total_cmp)
    }
}

pub fn group_accuracies(predictions: &[Prediction]) -> GroupMetrics {
    let mut m = GroupMetrics::default();
    for p in predictions {
        let g = &mut m.groups[p.group.index()];
        g.count += 1;
        g.correct += usize::from(p.predicted == p.label);
    }
    m
}

/// Correct-response ratio of one examinee's selected questions or meta set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub examinee: u32,
    pub attribute: Attribute,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    pub correct: usize,
    /// Absent for empty groups.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t: usize,
    pub ood: bool,
    pub worst: f64,
    pub avg: f64,
    pub n_predictions: usize,
    pub n_examinees: usize,
    /// Examinees left out (too short a support set, or not balanceable).
    pub n_excluded: usize,
    pub groups: Vec<GroupRow>,
    pub selected_ratios: Vec<RatioRecord>,
    pub meta_ratios: Vec<RatioRecord>,
}

impl EvalReport {
    /// `Worst 0.3824, Avg 0.6118`.
    pub fn summary(&self) -> String {
        format!("Worst {:.4}, Avg {:.4}", self.worst, self.avg)
    }

    pub fn label(&self) -> String {
        format!("Metrics@{}", self.t)
    }

    fn rounded(&self) -> EvalReport {
        let round_records = |rs: &[RatioRecord]| {
            rs.iter()
                .map(|r| RatioRecord {
                    ratio: round6(r.ratio),
                    ..*r
                })
                .collect()
        };
        EvalReport {
            worst: round6(self.worst),
            avg: round6(self.avg),
            groups: self
                .groups
                .iter()
                .map(|g| GroupRow {
                    accuracy: g.accuracy.map(round6),
                    ..g.clone()
                })
                .collect(),
            selected_ratios: round_records(&self.selected_ratios),
            meta_ratios: round_records(&self.meta_ratios),
            ..self.clone()
        }
    }
}

/// Builds the report from meta-set predictions. With no predictions both
/// metrics are 0.
pub fn report(predictions: &[Prediction], t: usize, ood: bool) -> EvalReport {
    let metrics = group_accuracies(predictions);
    let total = metrics.total();
    let avg = if total == 0 {
        0.0
    } else {
        metrics.correct() as f64 / total as f64
    };
    EvalReport {
        t,
        ood,
        worst: metrics.worst().unwrap_or(0.0),
        avg,
        n_predictions: total,
        n_examinees: 0,
        n_excluded: 0,
        groups: GroupKey::all()
            .map(|g| {
                let s = metrics.groups[g.index()];
                GroupRow {
                    group: g.to_string(),
                    count: s.count,
                    correct: s.correct,
                    accuracy: s.accuracy(),
                }
            })
            .collect(),
        selected_ratios: Vec::new(),
        meta_ratios: Vec::new(),
    }
}

/// Bin of a ratio in `[0, 1]` over `RATIO_BINS` equal bins; 1.0 falls in
/// the last bin.
pub fn ratio_bin(ratio: f64) -> usize {
    ((ratio * RATIO_BINS as f64).floor() as usize).min(RATIO_BINS - 1)
}

/// Per-attribute histogram of ratios.
pub fn selected_ratio_distribution(records: &[RatioRecord]) -> BTreeMap<Attribute, [usize; RATIO_BINS]> {
    let mut out = BTreeMap::new();
    for r in records {
        out.entry(r.attribute).or_insert([0; RATIO_BINS])[ratio_bin(r.ratio)] += 1;
    }
    out
}

/// Mean ratio per attribute.
pub fn mean_ratio_by_attribute(records: &[RatioRecord]) -> BTreeMap<Attribute, f64> {
    let mut acc: BTreeMap<Attribute, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.attribute).or_insert((0.0, 0));
        e.0 += r.ratio;
        e.1 += 1;
    }
    acc.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect()
}

pub fn groups_csv(report: &EvalReport) -> String {
    let mut s = String::from("group,count,accuracy\n");
    for g in &report.groups {
        let acc = g.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(s, "{},{},{}", g.group, g.count, acc).expect("write to string");
    }
    s
}

pub fn ratios_csv(records: &[RatioRecord]) -> String {
    let mut s = String::from("examinee_id,attribute,ratio\n");
    for r in records {
        writeln!(s, "{},{},{:.6}", r.examinee, r.attribute, r.ratio).expect("write to string");
    }
    s
}

/// Writes `report.json`, `groups.csv`, `selected_ratios.csv` and
/// `meta_ratios.csv` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &EvalReport) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_json_atomic(dir.join("report.json"), &report.rounded())?;
    write_atomic(dir.join("groups.csv"), groups_csv(report).as_bytes())?;
    write_atomic(
        dir.join("selected_ratios.csv"),
        ratios_csv(&report.selected_ratios).as_bytes(),
    )?;
    write_atomic(
        dir.join("meta_ratios.csv"),
        ratios_csv(&report.meta_ratios).as_bytes(),
    )
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn predictions() -> impl Strategy<Value = Vec<Prediction>> {
        prop::collection::vec((0usize..GroupKey::COUNT, 0u8..2, 0u8..2), 1..400).prop_map(|v| {
            v.into_iter()
                .map(|(g, predicted, label)| Prediction {
                    group: GroupKey::from_index(g),
                    predicted,
                    label,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn worst_bounds_avg_and_groups_partition(preds in predictions()) {
            let r = report(&preds, 10, false);
            prop_assert!(r.worst <= r.avg);
            prop_assert_eq!(r.groups.iter().map(|g| g.count).sum::<usize>(), preds.len());
            let weighted: f64 = r.groups.iter().filter_map(|g| g.accuracy.map(|a| a * g.count as f64)).sum();
            prop_assert!((weighted / preds.len() as f64 - r.avg).abs() <= 1e-12);
        }

        #[test]
        fn ratio_bins_are_in_range(r in 0.0f64..=1.0) {
            let b = ratio_bin(r);
            prop_assert!(b < RATIO_BINS);
            prop_assert!(b as f64 / RATIO_BINS as f64 <= r + 1e-12);
        }
    }
}
