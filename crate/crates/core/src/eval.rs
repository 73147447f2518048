//! Splits, ROC/AUC, per-user/per-category aggregation, the random baseline,
//! repeated trials, sensor ablation and class-conditional feature summaries.
//!
//! Scores are never pooled across users or categories. Each (user, category)
//! cell gets its own ROC curve; cell AUCs are averaged per user and user
//! means are averaged into the global figure. A cell where only one class
//! occurs has no AUC and is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{AppCategory, Dataset, SensorKind, UserId, UserTrace, SECONDS_PER_DAY};
use crate::features::FeatureMatrix;
use crate::stats::{mean_std, quantile_sorted, sort_floats};
use crate::weighting::GroupFrequencyTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores at or above this value are predicted positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    /// True-positive rate at a given false-positive rate, interpolating
    /// linearly between curve points.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let pts = &self.points;
        let i = pts.partition_point(|p| p.fpr < fpr);
        if i == 0 {
            return pts[0].tpr;
        }
        if i == pts.len() {
            return pts[pts.len() - 1].tpr;
        }
        let (a, b) = (pts[i - 1], pts[i]);
        if b.fpr == a.fpr {
            return b.tpr;
        }
        a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
    }
}

/// ROC curve over every distinct score and its trapezoidal area.
///
/// Tied scores form a single step, so the area equals the Mann-Whitney
/// statistic with half credit for tied positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("ROC input score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive/negative pair.
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (mut group_tp, mut group_fp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            i += 1;
        }
        area2 += group_fp as u128 * (2 * tp + group_tp) as u128;
        tp += group_tp;
        fp += group_fp;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

/// One scored ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub user: UserId,
    pub category: AppCategory,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub user: UserId,
    pub category: AppCategory,
    pub curve: RocCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<CellResult>,
    /// Category-mean AUC per user with at least one valid cell.
    pub user_means: Vec<(UserId, f64)>,
    /// Mean of the user means.
    pub global: f64,
    pub skipped_cells: usize,
}

/// Per-cell AUCs averaged over categories, then over users.
pub fn aggregate(predictions: &[Prediction]) -> Result<EvalReport> {
    let mut grouped: BTreeMap<(UserId, AppCategory), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for p in predictions {
        let cell = grouped.entry((p.user.clone(), p.category)).or_default();
        cell.0.push(p.score);
        cell.1.push(p.label);
    }
    let mut cells = Vec::new();
    let mut skipped_cells = 0;
    for ((user, category), (scores, labels)) in grouped {
        match roc_auc(&scores, &labels) {
            Ok(curve) => cells.push(CellResult { user, category, curve }),
            Err(Error::Undefined(_)) => skipped_cells += 1,
            Err(e) => return Err(e),
        }
    }
    if cells.is_empty() {
        return Err(Error::Empty("no (user, category) cell has both classes".into()));
    }
    let mut per_user: BTreeMap<&UserId, Vec<f64>> = BTreeMap::new();
    for c in &cells {
        per_user.entry(&c.user).or_default().push(c.curve.auc);
    }
    let user_means: Vec<(UserId, f64)> = per_user
        .into_iter()
        .map(|(u, aucs)| (u.clone(), aucs.iter().sum::<f64>() / aucs.len() as f64))
        .collect();
    let global = user_means.iter().map(|(_, m)| m).sum::<f64>() / user_means.len() as f64;
    Ok(EvalReport {
        cells,
        user_means,
        global,
        skipped_cells,
    })
}

impl EvalReport {
    /// Per category, the AUC of every user with a valid cell.
    pub fn category_aucs(&self) -> BTreeMap<AppCategory, Vec<f64>> {
        let mut out: BTreeMap<AppCategory, Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            out.entry(c.category).or_default().push(c.curve.auc);
        }
        out
    }

    /// User-averaged ROC curve of one category (or all cells when `None`),
    /// sampled at `steps + 1` evenly spaced false-positive rates.
    pub fn averaged_roc(&self, category: Option<AppCategory>, steps: usize) -> Vec<(f64, f64)> {
        let mut per_user: BTreeMap<&UserId, Vec<&RocCurve>> = BTreeMap::new();
        for c in &self.cells {
            if category.is_none_or(|cat| cat == c.category) {
                per_user.entry(&c.user).or_default().push(&c.curve);
            }
        }
        if per_user.is_empty() {
            return Vec::new();
        }
        (0..=steps)
            .map(|k| {
                let fpr = k as f64 / steps as f64;
                let tpr = per_user
                    .values()
                    .map(|curves| curves.iter().map(|c| c.tpr_at(fpr)).sum::<f64>() / curves.len() as f64)
                    .sum::<f64>()
                    / per_user.len() as f64;
                (fpr, tpr)
            })
            .collect()
    }

    pub fn cells_tsv(&self) -> String {
        let mut out = String::from("user\tcategory\tpositives\tnegatives\tauc\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}",
                c.user, c.category, c.curve.positives, c.curve.negatives, c.curve.auc
            );
        }
        out
    }

    pub fn roc_tsv(&self, steps: usize) -> String {
        let mut out = String::from("category\tfpr\ttpr\n");
        let mut emit = |name: &str, curve: Vec<(f64, f64)>| {
            for (fpr, tpr) in curve {
                let _ = writeln!(out, "{name}\t{fpr:.4}\t{tpr:.6}");
            }
        };
        for cat in AppCategory::NOTIFICATION {
            let curve = self.averaged_roc(Some(cat), steps);
            emit(cat.code(), curve);
        }
        emit("all", self.averaged_roc(None, steps));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
    UnknownTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::UnknownTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::UnknownTest => "unknown_test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    /// Users held out entirely; `None` scales 25 of 279 to the population.
    pub holdout_users: Option<usize>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.6,
            validation_fraction: 0.2,
            test_fraction: 0.2,
            holdout_users: None,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn holdout_for(&self, num_users: usize) -> usize {
        self.holdout_users
            .unwrap_or_else(|| ((num_users as f64) * 25.0 / 279.0).round() as usize)
    }
}

/// Resolved split: which users are held out and where the time boundaries
/// fall. Boundaries are whole days from the first midnight of the study.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub holdout: BTreeSet<UserId>,
    pub study_start: i64,
    pub train_end: i64,
    pub validation_end: i64,
    pub study_end: i64,
}

impl SplitPlan {
    /// Split of an instance of `user` at time `t`; `None` for held-out users
    /// before the test period.
    pub fn assign(&self, user: &UserId, t: i64) -> Option<Split> {
        if self.holdout.contains(user) {
            return (t >= self.validation_end).then_some(Split::UnknownTest);
        }
        Some(if t < self.train_end {
            Split::Train
        } else if t < self.validation_end {
            Split::Validation
        } else {
            Split::Test
        })
    }

    pub fn is_holdout(&self, user: &UserId) -> bool {
        self.holdout.contains(user)
    }

    /// Time-sliced copies of the dataset, one per split.
    pub fn partition(&self, dataset: &Dataset) -> BTreeMap<Split, Dataset> {
        let mut out: BTreeMap<Split, Dataset> = Split::ALL.into_iter().map(|s| (s, Dataset::default())).collect();
        for trace in &dataset.traces {
            let mut parts: BTreeMap<Split, Vec<_>> = BTreeMap::new();
            for e in &trace.events {
                if let Some(split) = self.assign(&trace.user_id, e.timestamp) {
                    parts.entry(split).or_default().push(e.clone());
                }
            }
            for (split, events) in parts {
                out.get_mut(&split).expect("all splits present").traces.push(UserTrace {
                    user_id: trace.user_id.clone(),
                    age: trace.age,
                    gender: trace.gender,
                    events,
                });
            }
        }
        out
    }
}

/// Holds out users first, then cuts the remaining users' data by time.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<SplitPlan> {
    let fractions = [spec.train_fraction, spec.validation_fraction, spec.test_fraction];
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let (first, last) = dataset
        .time_range()
        .ok_or_else(|| Error::Empty("dataset has no events".into()))?;
    let study_start = first.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY;
    let days = (last - study_start) / SECONDS_PER_DAY + 1;
    let train_days = (spec.train_fraction * days as f64).round() as i64;
    let validation_days = ((spec.train_fraction + spec.validation_fraction) * days as f64).round() as i64;
    if train_days < 1 || validation_days <= train_days || validation_days >= days {
        return Err(Error::Config(format!(
            "a {days}-day span is too short for the requested split"
        )));
    }
    let users = dataset.user_ids();
    let holdout_count = spec.holdout_for(users.len());
    if holdout_count >= users.len() {
        return Err(Error::Config(format!(
            "cannot hold out {holdout_count} of {} users",
            users.len()
        )));
    }
    let mut shuffled = users;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let holdout = shuffled.into_iter().take(holdout_count).collect();
    Ok(SplitPlan {
        holdout,
        study_start,
        train_end: study_start + train_days * SECONDS_PER_DAY,
        validation_end: study_start + validation_days * SECONDS_PER_DAY,
        study_end: study_start + days * SECONDS_PER_DAY,
    })
}

/// Random classifier that answers "attended" with the training positive rate
/// of the instance's (user, category) cell, falling back to the category
/// rate and then the global rate. Scores are the 0/1 decisions.
pub fn baseline_predict(table: &GroupFrequencyTable, instances: &[(UserId, AppCategory)], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global = table.global_positive_rate().unwrap_or(0.5);
    instances
        .iter()
        .map(|(user, category)| {
            let p = table
                .positive_rate(user, *category)
                .or_else(|| table.category_positive_rate(*category))
                .unwrap_or(global);
            let u: f64 = rng.gen();
            if u < p {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean per-user/category AUC per split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAucs {
    pub validation: Option<f64>,
    pub test: Option<f64>,
    pub unknown_test: Option<f64>,
}

impl SplitAucs {
    pub fn get(&self, split: Split) -> Option<f64> {
        match split {
            Split::Train => None,
            Split::Validation => self.validation,
            Split::Test => self.test,
            Split::UnknownTest => self.unknown_test,
        }
    }

    pub fn set(&mut self, split: Split, value: Option<f64>) {
        match split {
            Split::Train => {}
            Split::Validation => self.validation = value,
            Split::Test => self.test = value,
            Split::UnknownTest => self.unknown_test = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub seeds: Vec<u64>,
    pub trials: Vec<SplitAucs>,
    pub mean: SplitAucs,
    /// Sample standard deviation across trials; absent for a single trial.
    pub std: SplitAucs,
}

impl TrialSummary {
    pub fn to_tsv(&self, label: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{label}\t{}\t{}\t{}\t{}\t{}\t{}",
            fmt(self.mean.validation),
            fmt(self.std.validation),
            fmt(self.mean.test),
            fmt(self.std.test),
            fmt(self.mean.unknown_test),
            fmt(self.std.unknown_test),
        );
        out
    }
}

pub const TRIALS_HEADER: &str =
    "approach\tvalidation_mean\tvalidation_std\ttest_mean\ttest_std\tunknown_test_mean\tunknown_test_std\n";

/// Runs one experiment per seed and reports per-split mean and spread.
pub fn run_trials<F>(seeds: &[u64], mut run: F) -> Result<TrialSummary>
where
    F: FnMut(u64) -> Result<SplitAucs>,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let trials = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    let mut mean = SplitAucs::default();
    let mut std = SplitAucs::default();
    for split in [Split::Validation, Split::Test, Split::UnknownTest] {
        let values: Vec<f64> = trials.iter().filter_map(|t| t.get(split)).collect();
        let (m, s) = mean_std(&values);
        mean.set(split, m);
        std.set(split, s);
    }
    Ok(TrialSummary {
        seeds: seeds.to_vec(),
        trials,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorImportance {
    pub sensor: SensorKind,
    pub full: f64,
    pub ablated: f64,
    /// Mean over seeds of (full - ablated).
    pub delta: f64,
}

/// Retrains without each unit in turn and reports the mean AUC loss.
///
/// `run(None, seed)` must return the full-sensor score and
/// `run(Some(kind), seed)` the score without `kind`.
pub fn sensor_importance<F>(units: &[SensorKind], seeds: &[u64], mut run: F) -> Result<Vec<SensorImportance>>
where
    F: FnMut(Option<SensorKind>, u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(Error::Config("sensor importance needs at least one seed".into()));
    }
    let full: Vec<f64> = seeds.iter().map(|&s| run(None, s)).collect::<Result<_>>()?;
    let full_mean = full.iter().sum::<f64>() / full.len() as f64;
    units
        .iter()
        .map(|&sensor| {
            let ablated: Vec<f64> = seeds.iter().map(|&s| run(Some(sensor), s)).collect::<Result<_>>()?;
            let ablated_mean = ablated.iter().sum::<f64>() / ablated.len() as f64;
            let delta = full.iter().zip(&ablated).map(|(f, a)| f - a).sum::<f64>() / full.len() as f64;
            Ok(SensorImportance {
                sensor,
                full: full_mean,
                ablated: ablated_mean,
                delta,
            })
        })
        .collect()
}

pub fn importance_tsv(rows: &[SensorImportance]) -> String {
    let mut out = String::from("sensor\tfull_auc\tablated_auc\tdelta_auc\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", r.sensor, r.full, r.ablated, r.delta);
    }
    out
}

/// Summary of one feature within one label class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub count: usize,
    pub missing: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Fraction of present values per equal-width bin over the pooled range.
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistribution {
    pub feature: String,
    pub unattended: Option<ClassSummary>,
    pub attended: Option<ClassSummary>,
}

pub const DENSITY_BINS: usize = 10;

fn summarize_class(values: &mut [f64], missing: usize, lo: f64, hi: f64) -> Option<ClassSummary> {
    sort_floats(values);
    let density = {
        let mut bins = vec![0.0; DENSITY_BINS];
        for &v in values.iter() {
            let b = if hi > lo {
                ((v - lo) / (hi - lo) * DENSITY_BINS as f64) as usize
            } else {
                0
            };
            bins[b.min(DENSITY_BINS - 1)] += 1.0;
        }
        bins.iter_mut().for_each(|b| *b /= values.len().max(1) as f64);
        bins
    };
    Some(ClassSummary {
        count: values.len(),
        missing,
        min: *values.first()?,
        q1: quantile_sorted(values, 0.25)?,
        median: quantile_sorted(values, 0.5)?,
        q3: quantile_sorted(values, 0.75)?,
        max: *values.last()?,
        density,
    })
}

/// Per feature, quartiles and a binned density of its values among attended
/// and unattended notifications. Missing (NaN) values are counted apart.
pub fn feature_distribution_report(m: &FeatureMatrix) -> Vec<FeatureDistribution> {
    (0..m.width())
        .map(|c| {
            let mut classes: [(Vec<f64>, usize); 2] = Default::default();
            for (v, &label) in m.column(c).zip(&m.labels) {
                let class = &mut classes[label as usize];
                if v.is_nan() {
                    class.1 += 1;
                } else {
                    class.0.push(v as f64);
                }
            }
            let present = classes.iter().flat_map(|c| &c.0);
            let lo = present.clone().copied().fold(f64::INFINITY, f64::min);
            let hi = present.copied().fold(f64::NEG_INFINITY, f64::max);
            let [(mut neg, neg_missing), (mut pos, pos_missing)] = classes;
            FeatureDistribution {
                feature: m.names[c].clone(),
                unattended: summarize_class(&mut neg, neg_missing, lo, hi),
                attended: summarize_class(&mut pos, pos_missing, lo, hi),
            }
        })
        .collect()
}

pub fn distribution_tsv(rows: &[FeatureDistribution]) -> String {
    let mut out = String::from("feature\tclass\tcount\tmissing\tmin\tq1\tmedian\tq3\tmax\tdensity\n");
    for r in rows {
        for (class, s) in [("unattended", &r.unattended), ("attended", &r.attended)] {
            match s {
                Some(s) => {
                    let density: Vec<String> = s.density.iter().map(|d| format!("{d:.4}")).collect();
                    let _ = writeln!(
                        out,
                        "{}\t{class}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        r.feature,
                        s.count,
                        s.missing,
                        s.min,
                        s.q1,
                        s.median,
                        s.q3,
                        s.max,
                        density.join(",")
                    );
                }
                None => {
                    let _ = writeln!(out, "{}\t{class}\t0\t-\t-\t-\t-\t-\t-\t-", r.feature);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Gender, SensorEvent};
    use crate::weighting::GroupKey;
    use proptest::prelude::*;

    /// Fraction of positive/negative pairs ranked correctly, ties count half.
    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn perfect_and_partial_rankings() {
        let s = [0.9, 0.8, 0.4, 0.3];
        assert_eq!(roc_auc(&s, &[true, true, false, false]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&s, &[true, false, true, false]).unwrap().auc, 0.75);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap().auc, 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn curve_endpoints() {
        let c = roc_auc(&[0.9, 0.1, 0.5], &[true, false, false]).unwrap();
        assert_eq!(c.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(c.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert_eq!(c.tpr_at(0.25), 1.0);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_count(data in proptest::collection::vec((0u8..5, any::<bool>()), 2..12)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            match roc_auc(&scores, &labels) {
                Ok(c) => prop_assert!((c.auc - mann_whitney(&scores, &labels)).abs() <= 1e-12),
                Err(Error::Undefined(_)) => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
                Err(e) => panic!("{e}"),
            }
        }

        #[test]
        fn aggregate_is_rank_based(data in proptest::collection::vec((0u8..3, 0u8..2, 0.0f64..1.0, any::<bool>()), 4..60)) {
            let preds: Vec<Prediction> = data.iter().map(|(u, c, s, l)| Prediction {
                user: UserId::new(format!("u{u}")),
                category: AppCategory::NOTIFICATION[*c as usize],
                score: *s,
                label: *l,
            }).collect();
            let Ok(base) = aggregate(&preds) else { return Ok(()); };
            let mut transformed: Vec<Prediction> = preds.iter().map(|p| Prediction { score: p.score.powi(3) * 5.0 + 1.0, ..p.clone() }).collect();
            transformed.reverse();
            let other = aggregate(&transformed).unwrap();
            prop_assert!((base.global - other.global).abs() < 1e-12);
        }
    }

    fn pred(user: &str, category: AppCategory, score: f64, label: bool) -> Prediction {
        Prediction {
            user: UserId::new(user),
            category,
            score,
            label,
        }
    }

    #[test]
    fn aggregation_averages_categories_then_users() {
        use AppCategory::*;
        // Cell AUCs: a/Messaging 2/3, a/Email 1.0 (mean 5/6); b/Messaging 0.5.
        let mut preds = vec![
            pred("a", Messaging, 0.9, true),
            pred("a", Messaging, 0.5, false),
            pred("a", Messaging, 0.7, true),
            pred("a", Messaging, 0.8, false),
            pred("a", Email, 0.9, true),
            pred("a", Email, 0.1, false),
            pred("b", Messaging, 0.3, true),
            pred("b", Messaging, 0.3, false),
        ];
        // Single-class cell is skipped.
        preds.push(pred("b", Social, 0.3, true));
        let r = aggregate(&preds).unwrap();
        assert_eq!(r.skipped_cells, 1);
        assert_eq!(r.cells.len(), 3);
        let a = r.user_means.iter().find(|(u, _)| u.as_str() == "a").unwrap().1;
        assert!((a - (0.75 + 1.0) / 2.0).abs() < 1e-12);
        assert!((r.global - ((0.75 + 1.0) / 2.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_valid_cells_is_empty() {
        let preds = vec![pred("a", AppCategory::Email, 0.2, false)];
        assert!(matches!(aggregate(&preds), Err(Error::Empty(_))));
    }

    fn day_dataset(users: usize, days: i64) -> Dataset {
        let start = crate::synthgen::DEFAULT_START;
        Dataset {
            traces: (0..users)
                .map(|u| {
                    let id = UserId::new(format!("u{u}"));
                    UserTrace {
                        user_id: id.clone(),
                        age: 30,
                        gender: Gender::Male,
                        events: (0..days)
                            .map(|d| {
                                SensorEvent::new(id.clone(), start + d * SECONDS_PER_DAY + 3600, SensorKind::Light)
                                    .with_num("lux", 1.0)
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn weekly_boundaries() {
        let ds = day_dataset(10, 35);
        let plan = split(
            &ds,
            &SplitSpec {
                holdout_users: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let start = crate::synthgen::DEFAULT_START;
        assert_eq!(plan.train_end, start + 21 * SECONDS_PER_DAY);
        assert_eq!(plan.validation_end, start + 28 * SECONDS_PER_DAY);
        assert_eq!(plan.holdout.len(), 2);

        let parts = plan.partition(&ds);
        let known: BTreeSet<&UserId> = parts[&Split::Train].traces.iter().map(|t| &t.user_id).collect();
        for t in &parts[&Split::UnknownTest].traces {
            assert!(!known.contains(&t.user_id));
            assert!(plan.holdout.contains(&t.user_id));
        }
        let total: usize = parts.values().map(|d| d.num_events()).sum();
        // Held-out users' first four weeks belong to no split.
        assert_eq!(total, ds.num_events() - 2 * 28);
    }

    #[test]
    fn no_holdout_means_empty_unknown_test() {
        let ds = day_dataset(4, 35);
        let plan = split(
            &ds,
            &SplitSpec {
                holdout_users: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(plan.partition(&ds)[&Split::UnknownTest].traces.is_empty());
        assert_eq!(SplitSpec::default().holdout_for(279), 25);
        assert_eq!(SplitSpec::default().holdout_for(60), 5);
    }

    #[test]
    fn short_span_is_rejected() {
        let ds = day_dataset(4, 2);
        assert!(matches!(split(&ds, &SplitSpec::default()), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_follows_training_rate() {
        let u = UserId::new("a");
        let table =
            GroupFrequencyTable::build((0..10).map(|i| GroupKey::new(i < 8, u.clone(), AppCategory::Messaging)));
        let instances = vec![(u.clone(), AppCategory::Messaging); 20_000];
        let scores = baseline_predict(&table, &instances, 3);
        let frac = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((frac - 0.8).abs() < 0.01, "{frac}");
        assert_eq!(scores, baseline_predict(&table, &instances, 3));

        let never = GroupFrequencyTable::build((0..5).map(|_| GroupKey::new(false, u.clone(), AppCategory::Email)));
        let scores = baseline_predict(&never, &vec![(u.clone(), AppCategory::Email); 100], 1);
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn trials_report_spread() {
        let one = run_trials(&[1], |_| {
            Ok(SplitAucs {
                validation: Some(0.6),
                test: Some(0.7),
                unknown_test: None,
            })
        })
        .unwrap();
        assert_eq!(one.std.test, None);
        let same = run_trials(&[4, 4, 4], |s| {
            Ok(SplitAucs {
                test: Some(s as f64 / 10.0),
                ..Default::default()
            })
        })
        .unwrap();
        assert!(same.std.test.unwrap() < 1e-12);
        assert!((same.mean.test.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn importance_deltas() {
        let rows = sensor_importance(&[SensorKind::Screen, SensorKind::Noise], &[1, 2], |s, seed| {
            Ok(match s {
                None => 0.7 + seed as f64 * 0.01,
                Some(SensorKind::Screen) => 0.6,
                _ => 0.7 + seed as f64 * 0.01,
            })
        })
        .unwrap();
        assert!((rows[0].delta - 0.115).abs() < 1e-12);
        assert_eq!(rows[1].delta, 0.0);
    }

    #[test]
    fn distribution_of_constant_and_shifted_features() {
        let labels = vec![false, false, true, true, true];
        let m = FeatureMatrix {
            names: vec!["constant".into(), "shifted".into()],
            values: vec![2.0, 1.0, 2.0, 2.0, 2.0, 5.0, 2.0, f32::NAN, 2.0, 6.0],
            labels: labels.clone(),
            users: vec![UserId::new("u"); 5],
            categories: vec![AppCategory::Email; 5],
            post_times: vec![0; 5],
        };
        let report = feature_distribution_report(&m);
        let c = &report[0];
        let (neg, pos) = (c.unattended.as_ref().unwrap(), c.attended.as_ref().unwrap());
        assert_eq!((neg.median, neg.q1, neg.q3), (pos.median, pos.q1, pos.q3));
        assert_eq!(neg.density, pos.density);
        let s = &report[1];
        assert!(s.attended.as_ref().unwrap().median > s.unattended.as_ref().unwrap().median);
        assert_eq!(s.attended.as_ref().unwrap().missing, 1);
        assert!(distribution_tsv(&report).lines().count() == 5);
    }
}
