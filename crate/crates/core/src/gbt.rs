//! Gradient-boosted regression trees with a weighted logistic loss.
//!
//! Each stage fits one tree to the first and second derivatives of the loss
//! using an exact greedy search over presorted feature columns, growing the
//! tree level by level. Missing values (NaN) follow a per-node default
//! direction learned from the data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{aggregate, Prediction};
use crate::features::FeatureMatrix;

pub const MODEL_HEADER: &str = "#attend-gbt v1";

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_estimators: usize,
    pub depth_grid: Vec<usize>,
    pub subsample_grid: Vec<f64>,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_hessian: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_estimators: 101,
            depth_grid: vec![3, 4, 5, 6, 8],
            subsample_grid: vec![0.5, 0.7, 0.8, 1.0],
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_hessian: 1e-3,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_grid.is_empty() || self.subsample_grid.is_empty() {
            return Err(Error::Config("GBT grids must be non-empty".into()));
        }
        if self.subsample_grid.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config("subsample ratios must lie in (0, 1]".into()));
        }
        if self.depth_grid.iter().any(|&d| d == 0 || d > 16) {
            return Err(Error::Config("tree depths must lie in 1..=16".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || !(self.min_child_hessian >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive, lambda and min child hessian non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Settings of one grid point.
    pub fn point(&self, max_depth: usize, subsample: f64) -> BoostParams {
        BoostParams {
            n_estimators: self.n_estimators,
            max_depth,
            subsample,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            min_child_hessian: self.min_child_hessian,
            seed: self.seed,
        }
    }
}

/// Settings of a single boosting run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub subsample: f64,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_hessian: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        missing_left: bool,
        left: u32,
        right: u32,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf_index(&self, row: &[f32]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(_) => return i,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = row[feature as usize];
                    let go_left = if v.is_nan() {
                        missing_left
                    } else {
                        (v as f64) < threshold
                    };
                    i = if go_left { left } else { right } as usize;
                }
            }
        }
    }

    pub fn predict(&self, row: &[f32]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf(v) => v,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    pub params: BoostParams,
    /// Hash of the feature names the model was trained on.
    pub manifest_hash: String,
    pub feature_count: usize,
}

pub fn manifest_hash(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

impl GbtEnsemble {
    pub fn margin(&self, row: &[f32]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict_row(&self, row: &[f32]) -> Result<f64> {
        if row.len() != self.feature_count {
            return Err(Error::Shape {
                expected: self.feature_count,
                found: row.len(),
            });
        }
        Ok(sigmoid(self.margin(row)))
    }

    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        if manifest_hash(&m.names) != self.manifest_hash {
            return Err(Error::SchemaMismatch {
                expected: self.manifest_hash.clone(),
                found: manifest_hash(&m.names),
            });
        }
        (0..m.len()).map(|i| self.predict_row(m.row(i))).collect()
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_HEADER}");
        let _ = writeln!(out, "manifest\t{}", self.manifest_hash);
        let _ = writeln!(out, "features\t{}", self.feature_count);
        let _ = writeln!(out, "base_score\t{}", self.base_score);
        let _ = writeln!(out, "learning_rate\t{}", self.learning_rate);
        let _ = writeln!(out, "n_estimators\t{}", p.n_estimators);
        let _ = writeln!(out, "max_depth\t{}", p.max_depth);
        let _ = writeln!(out, "subsample\t{}", p.subsample);
        let _ = writeln!(out, "lambda\t{}", p.lambda);
        let _ = writeln!(out, "min_child_hessian\t{}", p.min_child_hessian);
        let _ = writeln!(out, "seed\t{}", p.seed);
        let _ = writeln!(out, "trees\t{}", self.trees.len());
        for t in &self.trees {
            let _ = writeln!(out, "tree\t{}", t.nodes.len());
            for n in &t.nodes {
                match n {
                    Node::Leaf(v) => {
                        let _ = writeln!(out, "leaf\t{v}");
                    }
                    Node::Split {
                        feature,
                        threshold,
                        missing_left,
                        left,
                        right,
                    } => {
                        let _ = writeln!(
                            out,
                            "split\t{feature}\t{threshold}\t{}\t{left}\t{right}",
                            u8::from(*missing_left)
                        );
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<GbtEnsemble> {
        let records: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
        let mut cursor = 0usize;
        let mut next = |want: Option<&str>| -> Result<(usize, &Vec<&str>)> {
            let rec = records
                .get(cursor)
                .ok_or_else(|| Error::parse(path, cursor + 1, "unexpected end of model file"))?;
            cursor += 1;
            if want.is_some_and(|w| rec[0] != w) {
                return Err(Error::parse(path, cursor, format!("expected `{}`", want.unwrap_or(""))));
            }
            Ok((cursor, rec))
        };
        fn field<T: std::str::FromStr>(path: &Path, (n, rec): (usize, &Vec<&str>), i: usize) -> Result<T> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(path, n, format!("bad field {i}")))
        }
        next(Some(MODEL_HEADER))?;
        let manifest_hash: String = field(path, next(Some("manifest"))?, 1)?;
        let feature_count: usize = field(path, next(Some("features"))?, 1)?;
        let base_score = field(path, next(Some("base_score"))?, 1)?;
        let learning_rate = field(path, next(Some("learning_rate"))?, 1)?;
        let params = BoostParams {
            n_estimators: field(path, next(Some("n_estimators"))?, 1)?,
            max_depth: field(path, next(Some("max_depth"))?, 1)?,
            subsample: field(path, next(Some("subsample"))?, 1)?,
            learning_rate,
            lambda: field(path, next(Some("lambda"))?, 1)?,
            min_child_hessian: field(path, next(Some("min_child_hessian"))?, 1)?,
            seed: field(path, next(Some("seed"))?, 1)?,
        };
        let n_trees: usize = field(path, next(Some("trees"))?, 1)?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes: usize = field(path, next(Some("tree"))?, 1)?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let rec = next(None)?;
                nodes.push(match rec.1[0] {
                    "leaf" => Node::Leaf(field(path, rec, 1)?),
                    "split" => Node::Split {
                        feature: field(path, rec, 1)?,
                        threshold: field(path, rec, 2)?,
                        missing_left: field::<u8>(path, rec, 3)? == 1,
                        left: field(path, rec, 4)?,
                        right: field(path, rec, 5)?,
                    },
                    _ => return Err(Error::parse(path, rec.0, "expected leaf or split")),
                });
            }
            let in_range = |i: u32| (i as usize) < nodes.len();
            for node in &nodes {
                if let Node::Split {
                    left, right, feature, ..
                } = *node
                {
                    if !in_range(left) || !in_range(right) || feature as usize >= feature_count {
                        return Err(Error::parse(path, 0, "node reference out of range"));
                    }
                }
            }
            trees.push(RegressionTree { nodes });
        }
        Ok(GbtEnsemble {
            base_score,
            learning_rate,
            trees,
            params,
            manifest_hash,
            feature_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GbtEnsemble> {
        GbtEnsemble::from_text(&fs::read_to_string(path)?, path)
    }
}

/// Column-sorted view of the training rows, shared by all stages.
pub struct Presorted {
    /// Per feature, non-missing (row, value) pairs in ascending value order.
    columns: Vec<Vec<(u32, f32)>>,
    /// Per feature, rows whose value is missing.
    missing: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(m: &FeatureMatrix) -> Presorted {
        let d = m.width();
        let mut columns = vec![Vec::with_capacity(m.len()); d];
        let mut missing = vec![Vec::new(); d];
        for i in 0..m.len() {
            for (f, &v) in m.row(i).iter().enumerate() {
                if v.is_nan() {
                    missing[f].push(i as u32);
                } else {
                    columns[f].push((i as u32, v));
                }
            }
        }
        for c in &mut columns {
            c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        }
        Presorted { columns, missing }
    }
}

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Acc {
    gl: f64,
    hl: f64,
    miss_g: f64,
    miss_h: f64,
    last: f32,
}

impl Default for Acc {
    fn default() -> Self {
        Acc {
            gl: 0.0,
            hl: 0.0,
            miss_g: 0.0,
            miss_h: 0.0,
            last: f32::NAN,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: u32,
    threshold: f64,
    missing_left: bool,
}

struct Grower<'a> {
    data: &'a FeatureMatrix,
    sorted: &'a Presorted,
    /// Gradient and hessian per row.
    gh: &'a [[f64; 2]],
    params: &'a BoostParams,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda)
    }

    /// Grows one tree over the rows whose `node_of` entry is 0.
    fn grow(&self, node_of: &mut [u32]) -> RegressionTree {
        let mc = self.params.min_child_hessian;
        let mut tree = vec![Node::Leaf(0.0)];
        // Open nodes of the current level: (tree index, G, H).
        let mut open: Vec<(usize, f64, f64)> = {
            let (mut g, mut h) = (0.0, 0.0);
            for (r, &n) in node_of.iter().enumerate() {
                if n == 0 {
                    g += self.gh[r][0];
                    h += self.gh[r][1];
                }
            }
            vec![(0, g, h)]
        };

        for _depth in 0..self.params.max_depth {
            let k = open.len();
            let lambda = self.params.lambda;
            let score = |g: f64, h: f64| g * g / (h + lambda);
            let parent: Vec<f64> = open.iter().map(|&(_, g, h)| score(g, h)).collect();
            // Best child score per node; a split must beat the parent.
            let mut best_score: Vec<f64> = parent.iter().map(|p| p + 2e-12).collect();
            let mut best: Vec<Option<Candidate>> = vec![None; k];
            let mut acc = vec![Acc::default(); k];
            for f in 0..self.data.width() {
                acc.iter_mut().for_each(|a| *a = Acc::default());
                let has_missing = !self.sorted.missing[f].is_empty();
                for &r in &self.sorted.missing[f] {
                    let n = node_of[r as usize];
                    if n != NO_NODE {
                        let [g, h] = self.gh[r as usize];
                        acc[n as usize].miss_g += g;
                        acc[n as usize].miss_h += h;
                    }
                }
                for &(r, v) in &self.sorted.columns[f] {
                    let n = node_of[r as usize];
                    if n == NO_NODE {
                        continue;
                    }
                    let n = n as usize;
                    let a = &mut acc[n];
                    if a.hl > 0.0 && a.hl >= mc && v != a.last {
                        let (_, g, h) = open[n];
                        let mut consider = |lg: f64, lh: f64, missing_left: bool| {
                            if h - lh < mc {
                                return;
                            }
                            let s = score(lg, lh) + score(g - lg, h - lh);
                            if s > best_score[n] {
                                best_score[n] = s;
                                best[n] = Some(Candidate {
                                    feature: f as u32,
                                    threshold: (a.last as f64 + v as f64) * 0.5,
                                    missing_left,
                                });
                            }
                        };
                        consider(a.gl, a.hl, false);
                        if has_missing && a.miss_h > 0.0 {
                            consider(a.gl + a.miss_g, a.hl + a.miss_h, true);
                        }
                    }
                    let [g, h] = self.gh[r as usize];
                    a.gl += g;
                    a.hl += h;
                    a.last = v;
                }
            }

            // Materialize splits and route rows to the next level.
            let mut next_open = Vec::new();
            let mut remap: Vec<[u32; 2]> = vec![[NO_NODE; 2]; k];
            for (n, cand) in best.iter().enumerate() {
                let Some(c) = cand else {
                    let (idx, g, h) = open[n];
                    tree[idx] = Node::Leaf(self.leaf_value(g, h));
                    continue;
                };
                let left = tree.len();
                tree.push(Node::Leaf(0.0));
                tree.push(Node::Leaf(0.0));
                tree[open[n].0] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    missing_left: c.missing_left,
                    left: left as u32,
                    right: left as u32 + 1,
                };
                remap[n] = [next_open.len() as u32, next_open.len() as u32 + 1];
                next_open.push((left, 0.0, 0.0));
                next_open.push((left + 1, 0.0, 0.0));
            }
            if next_open.is_empty() {
                return RegressionTree { nodes: tree };
            }
            for (r, slot) in node_of.iter_mut().enumerate() {
                if *slot == NO_NODE {
                    continue;
                }
                let n = *slot as usize;
                let Some(c) = best[n] else {
                    *slot = NO_NODE;
                    continue;
                };
                let v = self.data.values[r * self.data.width() + c.feature as usize];
                let go_left = if v.is_nan() {
                    c.missing_left
                } else {
                    (v as f64) < c.threshold
                };
                let child = remap[n][usize::from(!go_left)];
                *slot = child;
                next_open[child as usize].1 += self.gh[r][0];
                next_open[child as usize].2 += self.gh[r][1];
            }
            open = next_open;
        }
        for &(idx, g, h) in &open {
            tree[idx] = Node::Leaf(self.leaf_value(g, h));
        }
        RegressionTree { nodes: tree }
    }
}

/// Weighted log-loss of margins against labels.
pub fn weighted_log_loss(margins: &[f64], labels: &[bool], weights: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&z, &y), &w) in margins.iter().zip(labels).zip(weights) {
        // log(1 + e^z) - y z, computed stably.
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        num += w * (softplus - if y { z } else { 0.0 });
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn check_training(m: &FeatureMatrix, weights: &[f64]) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Empty("no training rows".into()));
    }
    if weights.len() != m.len() {
        return Err(Error::Shape {
            expected: m.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Numeric("training weights".into()));
    }
    let (mut pos, mut neg) = (0.0, 0.0);
    for (&y, &w) in m.labels.iter().zip(weights) {
        if y {
            pos += w;
        } else {
            neg += w;
        }
    }
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Training(format!(
            "training data holds a single class (weighted positives {pos}, negatives {neg}); \
             the base log-odds is undefined"
        )));
    }
    Ok((pos / neg).ln())
}

/// Trains one ensemble with fixed hyper-parameters. `on_stage` sees the
/// training margins after every stage.
pub fn boost(
    m: &FeatureMatrix,
    sorted: &Presorted,
    weights: &[f64],
    params: &BoostParams,
    mut on_stage: impl FnMut(usize, &[f64]),
) -> Result<GbtEnsemble> {
    let base_score = check_training(m, weights)?;
    let n = m.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut margins = vec![base_score; n];
    let mut gh = vec![[0.0; 2]; n];
    let mut node_of = vec![0u32; n];
    let mut trees = Vec::with_capacity(params.n_estimators);
    for stage in 0..params.n_estimators {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let y = if m.labels[i] { 1.0 } else { 0.0 };
            gh[i] = [weights[i] * (p - y), weights[i] * p * (1.0 - p)];
            let sampled = params.subsample >= 1.0 || rng.gen::<f64>() < params.subsample;
            node_of[i] = if sampled && weights[i] > 0.0 { 0 } else { NO_NODE };
        }
        let tree = Grower {
            data: m,
            sorted,
            gh: &gh,
            params,
        }
        .grow(&mut node_of);
        for (i, z) in margins.iter_mut().enumerate() {
            *z += params.learning_rate * tree.predict(m.row(i));
        }
        trees.push(tree);
        on_stage(stage, &margins);
    }
    Ok(GbtEnsemble {
        base_score,
        learning_rate: params.learning_rate,
        trees,
        params: *params,
        manifest_hash: manifest_hash(&m.names),
        feature_count: m.width(),
    })
}

/// Validation score of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub max_depth: usize,
    pub subsample: f64,
    pub validation_auc: f64,
}

/// Mean per-user/category AUC of probability scores on a feature matrix.
pub fn mean_auc(m: &FeatureMatrix, scores: &[f64]) -> Result<f64> {
    let preds: Vec<Prediction> = (0..m.len())
        .map(|i| Prediction {
            user: m.users[i].clone(),
            category: m.categories[i],
            score: scores[i],
            label: m.labels[i],
        })
        .collect();
    Ok(aggregate(&preds)?.global)
}

/// Grid search over tree depth and row subsampling, selecting the point with
/// the best validation mean AUC (earliest point wins ties).
pub fn train(
    train: &FeatureMatrix,
    weights: &[f64],
    validation: &FeatureMatrix,
    config: &GbtConfig,
) -> Result<(GbtEnsemble, Vec<GridResult>)> {
    config.validate()?;
    if validation.names != train.names {
        return Err(Error::SchemaMismatch {
            expected: manifest_hash(&train.names),
            found: manifest_hash(&validation.names),
        });
    }
    check_training(train, weights)?;
    let sorted = Presorted::new(train);
    let mut best: Option<(f64, GbtEnsemble)> = None;
    let mut results = Vec::new();
    for &depth in &config.depth_grid {
        for &subsample in &config.subsample_grid {
            let model = boost(train, &sorted, weights, &config.point(depth, subsample), |_, _| {})?;
            let auc = mean_auc(validation, &model.predict(validation)?)?;
            results.push(GridResult {
                max_depth: depth,
                subsample,
                validation_auc: auc,
            });
            if best.as_ref().is_none_or(|(b, _)| auc > *b) {
                best = Some((auc, model));
            }
        }
    }
    let (_, model) = best.expect("grid is non-empty");
    Ok((model, results))
}
