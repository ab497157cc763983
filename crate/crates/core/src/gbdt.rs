//! Gradient-boosted regression trees with least-squares loss.
//!
//! Split candidates come from per-feature histograms whose bin edges are
//! computed once on the training matrix. Every stage fits a depth-limited tree
//! to the current residuals; validation RMSE is tracked after each stage and
//! the model keeps the prefix of trees that minimises it.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DesignMatrix;

pub const MODEL_FORMAT: &str = "nbm-gbdt/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub max_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub n_bins: usize,
    pub early_stopping_rounds: usize,
    /// Recorded for reproducibility; training draws no random numbers.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_trees: 500,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 20,
            n_bins: 64,
            early_stopping_rounds: 25,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train params: {m}")));
        if self.max_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 || self.early_stopping_rounds == 0 {
            return bad("max_trees, max_depth, min_samples_leaf and early_stopping_rounds must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(2..=256).contains(&self.n_bins) {
            return bad("n_bins must lie in [2, 256]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    max_depth: usize,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { value }],
            max_depth: 0,
        }
    }

    /// Builds a tree from explicit nodes (root at index 0), checking structure.
    pub fn from_nodes(nodes: Vec<Node>, max_depth: usize) -> Result<Self> {
        let t = RegressionTree { nodes, max_depth };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::ModelFormat("tree has no nodes".into()));
        }
        // every node reachable exactly once, depth bounded
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            if id >= self.nodes.len() || seen[id] {
                return Err(Error::ModelFormat(format!("bad child reference {id}")));
            }
            seen[id] = true;
            match self.nodes[id] {
                Node::Split { left, right, threshold, .. } => {
                    if depth >= self.max_depth || !threshold.is_finite() {
                        return Err(Error::ModelFormat("tree deeper than its bound or bad threshold".into()));
                    }
                    stack.push((left, depth + 1));
                    stack.push((right, depth + 1));
                }
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::ModelFormat("non-finite leaf value".into()))
                }
                Node::Leaf { .. } => {}
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::ModelFormat("unreachable tree node".into()));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn is_leaf(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], id: usize) -> usize {
            match nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct GbdtModel {
    pub base_score: f64,
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub best_iteration: usize,
    pub params: TrainParams,
    /// Train MSE after stage `t` (index 0 is the base score alone).
    pub train_mse_history: Vec<f64>,
    /// Validation RMSE after stage `t`.
    pub valid_rmse_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_metrics(predicted: &[f64], observed: &[f64]) -> Result<RegressionMetrics> {
    if predicted.len() != observed.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            found: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("metrics need at least one prediction".into()));
    }
    let n = predicted.len() as f64;
    let (abs, sq) = predicted
        .iter()
        .zip(observed)
        .fold((0.0, 0.0), |(a, s), (p, o)| {
            let e = p - o;
            (a + e.abs(), s + e * e)
        });
    Ok(RegressionMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// Per-feature bin edges. A value `x` falls in bin `j` where `j` is the number
/// of edges strictly below `x`, so `x <= edges[j]` iff `bin(x) <= j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    pub edges: Vec<Vec<f64>>,
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

impl BinEdges {
    /// Quantile edges placed halfway between neighbouring distinct values.
    /// With at most `n_bins` distinct values every gap gets an edge.
    pub fn fit(m: &DesignMatrix, n_bins: usize) -> BinEdges {
        let p = m.n_features();
        let edges = (0..p)
            .into_par_iter()
            .map(|f| {
                let mut col: Vec<f64> = m.rows().map(|r| r[f]).collect();
                col.sort_by(f64::total_cmp);
                let mut distinct = col.clone();
                distinct.dedup();
                if distinct.len() <= n_bins {
                    return distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect();
                }
                let n = col.len();
                let mut edges = Vec::with_capacity(n_bins - 1);
                for j in 1..n_bins {
                    let v = col[j * n / n_bins - 1];
                    let k = col.partition_point(|x| *x <= v);
                    if k < n {
                        edges.push(midpoint(v, col[k]));
                    }
                }
                edges.dedup();
                edges
            })
            .collect();
        BinEdges { edges }
    }

    pub fn bin(&self, feature: usize, x: f64) -> u8 {
        self.edges[feature].partition_point(|e| *e < x) as u8
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.edges[feature].len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// index of `threshold` among the feature's bin edges
    pub edge_index: usize,
    pub gain: f64,
    pub n_left: usize,
    pub n_right: usize,
}

#[derive(Clone, Copy, Default)]
struct Bin {
    sum: f64,
    count: u32,
}

/// Row-major bin indices: row `r` occupies `codes[r * p..(r + 1) * p]`.
struct Binned {
    codes: Vec<u8>,
    p: usize,
}

impl Binned {
    fn new(m: &DesignMatrix, edges: &BinEdges) -> Binned {
        let p = m.n_features();
        let mut codes = Vec::with_capacity(m.n_rows() * p);
        for r in m.rows() {
            codes.extend(r.iter().enumerate().map(|(f, x)| edges.bin(f, *x)));
        }
        Binned { codes, p }
    }

    fn code(&self, row: u32, feature: usize) -> u8 {
        self.codes[row as usize * self.p + feature]
    }
}

/// One full-width bin array per feature; a `u8` code always indexes in range.
struct Histogram {
    bins: Vec<[Bin; 256]>,
}

impl Histogram {
    fn build(binned: &Binned, grad: &[f64], rows: &[u32]) -> Histogram {
        let p = binned.p;
        let mut bins = vec![[Bin::default(); 256]; p];
        for &r in rows {
            let g = grad[r as usize];
            let codes = &binned.codes[r as usize * p..(r as usize + 1) * p];
            for (h, code) in bins.iter_mut().zip(codes) {
                let b = &mut h[*code as usize];
                b.sum += g;
                b.count += 1;
            }
        }
        Histogram { bins }
    }

    fn subtract(mut self, child: &Histogram) -> Histogram {
        for (p, c) in self.bins.iter_mut().zip(&child.bins) {
            for (a, b) in p.iter_mut().zip(c) {
                a.sum -= b.sum;
                a.count -= b.count;
            }
        }
        self
    }

    /// Best split by SSE reduction; ties go to the lowest feature, then the
    /// lowest threshold.
    fn best_split(&self, edges: &BinEdges, total_sum: f64, n: usize, min_leaf: usize) -> Option<SplitCandidate> {
        let parent = total_sum * total_sum / n as f64;
        let mut best: Option<SplitCandidate> = None;
        for (f, h) in self.bins.iter().enumerate() {
            let mut sl = 0.0;
            let mut nl = 0usize;
            for (j, edge) in edges.edges[f].iter().enumerate() {
                sl += h[j].sum;
                nl += h[j].count as usize;
                let nr = n - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                let sr = total_sum - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(SplitCandidate {
                        feature: f,
                        threshold: *edge,
                        edge_index: j,
                        gain,
                        n_left: nl,
                        n_right: nr,
                    });
                }
            }
        }
        best
    }
}

struct Grower<'a> {
    binned: &'a Binned,
    edges: &'a BinEdges,
    grad: &'a [f64],
    params: &'a TrainParams,
    nodes: Vec<Node>,
    /// (rows, leaf value) for every leaf, used to update train predictions
    leaves: Vec<(std::ops::Range<usize>, f64)>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [u32], scratch: &mut [u32], offset: usize, hist: Histogram, depth: usize) -> usize {
        let n = rows.len();
        let (sum, sum_sq) = rows.iter().fold((0.0, 0.0), |(s, q), &r| {
            let g = self.grad[r as usize];
            (s + g, q + g * g)
        });
        let mean = sum / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean });

        let min_leaf = self.params.min_samples_leaf;
        if depth >= self.params.max_depth || n < 2 * min_leaf {
            self.leaves.push((offset..offset + n, mean));
            return id;
        }
        let sse = (sum_sq - sum * mean).max(0.0);
        let split = match hist.best_split(self.edges, sum, n, min_leaf) {
            // guard against splits that only shuffle rounding error
            Some(s) if s.gain > 1e-12 * sse.max(f64::MIN_POSITIVE) && s.gain > 0.0 => s,
            _ => {
                self.leaves.push((offset..offset + n, mean));
                return id;
            }
        };

        // stable partition: bin <= edge index goes left
        let binned = self.binned;
        let feature = split.feature;
        let edge_idx = split.edge_index as u8;
        let (mut l, mut r) = (0, n);
        for &row in rows.iter() {
            if binned.code(row, feature) <= edge_idx {
                scratch[l] = row;
                l += 1;
            }
        }
        for &row in rows.iter().rev() {
            if binned.code(row, feature) > edge_idx {
                r -= 1;
                scratch[r] = row;
            }
        }
        debug_assert_eq!(l, r);
        debug_assert_eq!(l, split.n_left);
        rows.copy_from_slice(scratch);

        let (left_rows, right_rows) = rows.split_at_mut(l);
        let (left_scratch, right_scratch) = scratch.split_at_mut(l);
        let (left_hist, right_hist) = if left_rows.len() <= right_rows.len() {
            let small = Histogram::build(self.binned, self.grad, left_rows);
            let large = hist.subtract(&small);
            (small, large)
        } else {
            let small = Histogram::build(self.binned, self.grad, right_rows);
            let large = hist.subtract(&small);
            (large, small)
        };
        let left = self.grow(left_rows, left_scratch, offset, left_hist, depth + 1);
        let right = self.grow(right_rows, right_scratch, offset + l, right_hist, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

fn check_features(expected: &[String], found: &[String]) -> Result<()> {
    if expected != found {
        return Err(Error::FeatureMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Fits one tree to `grad` over all rows; returns the tree and the per-row
/// leaf value.
fn fit_tree(binned: &Binned, edges: &BinEdges, grad: &[f64], params: &TrainParams) -> (RegressionTree, Vec<f64>) {
    let n = grad.len();
    let mut rows: Vec<u32> = (0..n as u32).collect();
    let mut scratch = vec![0u32; n];
    let hist = Histogram::build(binned, grad, &rows);
    let mut grower = Grower {
        binned,
        edges,
        grad,
        params,
        nodes: Vec::new(),
        leaves: Vec::new(),
    };
    grower.grow(&mut rows, &mut scratch, 0, hist, 0);
    let mut out = vec![0.0; n];
    for (range, value) in &grower.leaves {
        for &r in &rows[range.clone()] {
            out[r as usize] = *value;
        }
    }
    (
        RegressionTree {
            nodes: grower.nodes,
            max_depth: params.max_depth,
        },
        out,
    )
}

/// Best root split of `target` under the histogram split finder. Exposed so
/// the split search can be checked against exhaustive enumeration.
pub fn best_root_split(m: &DesignMatrix, params: &TrainParams) -> Option<SplitCandidate> {
    let edges = BinEdges::fit(m, params.n_bins);
    let binned = Binned::new(m, &edges);
    let rows: Vec<u32> = (0..m.n_rows() as u32).collect();
    let hist = Histogram::build(&binned, m.target(), &rows);
    let sum: f64 = m.target().iter().sum();
    hist.best_split(&edges, sum, m.n_rows(), params.min_samples_leaf)
}

fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum();
    (sq / obs.len() as f64).sqrt()
}

fn mean_exact(y: &[f64]) -> f64 {
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if lo == hi {
        return lo;
    }
    y.iter().sum::<f64>() / y.len() as f64
}

/// Trains a boosted ensemble with validation-based early stopping.
pub fn fit(train: &DesignMatrix, validation: &DesignMatrix, params: &TrainParams) -> Result<GbdtModel> {
    params.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training matrix has no rows".into()));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation matrix has no rows".into()));
    }
    check_features(train.feature_names(), validation.feature_names())?;

    let edges = BinEdges::fit(train, params.n_bins);
    let binned = Binned::new(train, &edges);
    let y = train.target();
    let yv = validation.target();
    let base_score = mean_exact(y);
    let lr = params.learning_rate;

    let mut pred = vec![base_score; y.len()];
    let mut pred_valid = vec![base_score; yv.len()];
    let mut grad = vec![0.0; y.len()];
    let mut trees = Vec::new();
    let mse = |p: &[f64]| {
        let r = rmse(p, y);
        r * r
    };
    let mut train_mse_history = vec![mse(&pred)];
    let mut valid_rmse_history = vec![rmse(&pred_valid, yv)];
    let mut best_iteration = 0;
    let mut best_rmse = valid_rmse_history[0];

    for stage in 1..=params.max_trees {
        for ((g, t), p) in grad.iter_mut().zip(y).zip(&pred) {
            *g = t - p;
        }
        let (tree, leaf_values) = fit_tree(&binned, &edges, &grad, params);
        if tree.is_leaf() {
            log::debug!("stage {stage}: no split improves the fit, stopping");
            break;
        }
        for (p, v) in pred.iter_mut().zip(&leaf_values) {
            *p += lr * v;
        }
        pred_valid
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += lr * tree.predict(validation.row(i)));
        trees.push(tree);
        train_mse_history.push(mse(&pred));
        let v = rmse(&pred_valid, yv);
        valid_rmse_history.push(v);
        if v < best_rmse {
            best_rmse = v;
            best_iteration = stage;
        } else if stage - best_iteration >= params.early_stopping_rounds {
            log::debug!("early stopping at stage {stage}, best {best_iteration}");
            break;
        }
    }
    trees.truncate(best_iteration);
    Ok(GbdtModel {
        base_score,
        trees,
        learning_rate: lr,
        feature_names: train.feature_names().to_vec(),
        best_iteration,
        params: *params,
        train_mse_history,
        valid_rmse_history,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatTree {
    /// -1 marks a leaf
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<usize>,
    right: Vec<usize>,
    value: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    feature_names: Vec<String>,
    base_score: f64,
    learning_rate: f64,
    best_iteration: usize,
    max_depth: usize,
    params: TrainParams,
    train_mse_history: Vec<f64>,
    valid_rmse_history: Vec<f64>,
    trees: Vec<FlatTree>,
}

impl From<GbdtModel> for ModelFile {
    fn from(m: GbdtModel) -> Self {
        let trees = m
            .trees
            .iter()
            .map(|t| {
                let mut flat = FlatTree {
                    feature: Vec::new(),
                    threshold: Vec::new(),
                    left: Vec::new(),
                    right: Vec::new(),
                    value: Vec::new(),
                };
                for node in &t.nodes {
                    let (f, th, l, r, v) = match *node {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => (feature as i64, threshold, left, right, 0.0),
                        Node::Leaf { value } => (-1, 0.0, 0, 0, value),
                    };
                    flat.feature.push(f);
                    flat.threshold.push(th);
                    flat.left.push(l);
                    flat.right.push(r);
                    flat.value.push(v);
                }
                flat
            })
            .collect();
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            feature_names: m.feature_names,
            base_score: m.base_score,
            learning_rate: m.learning_rate,
            best_iteration: m.best_iteration,
            max_depth: m.params.max_depth,
            params: m.params,
            train_mse_history: m.train_mse_history,
            valid_rmse_history: m.valid_rmse_history,
            trees,
        }
    }
}

impl TryFrom<ModelFile> for GbdtModel {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unsupported format `{}`", file.format)));
        }
        let p = file.feature_names.len();
        let mut trees = Vec::with_capacity(file.trees.len());
        for flat in file.trees {
            let n = flat.feature.len();
            if [flat.threshold.len(), flat.left.len(), flat.right.len(), flat.value.len()]
                .iter()
                .any(|l| *l != n)
            {
                return Err(Error::ModelFormat("tree arrays differ in length".into()));
            }
            let nodes = (0..n)
                .map(|i| {
                    if flat.feature[i] < 0 {
                        Ok(Node::Leaf { value: flat.value[i] })
                    } else if (flat.feature[i] as usize) < p {
                        Ok(Node::Split {
                            feature: flat.feature[i] as usize,
                            threshold: flat.threshold[i],
                            left: flat.left[i],
                            right: flat.right[i],
                        })
                    } else {
                        Err(Error::ModelFormat(format!("feature index {} out of range", flat.feature[i])))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            trees.push(RegressionTree::from_nodes(nodes, file.max_depth)?);
        }
        if file.best_iteration > trees.len() {
            return Err(Error::ModelFormat(format!(
                "best_iteration {} exceeds {} stored trees",
                file.best_iteration,
                trees.len()
            )));
        }
        Ok(GbdtModel {
            base_score: file.base_score,
            trees,
            learning_rate: file.learning_rate,
            feature_names: file.feature_names,
            best_iteration: file.best_iteration,
            params: file.params,
            train_mse_history: file.train_mse_history,
            valid_rmse_history: file.valid_rmse_history,
        })
    }
}

impl GbdtModel {
    /// A model with no trees; every prediction is `base_score`.
    pub fn constant(base_score: f64, feature_names: Vec<String>) -> Self {
        GbdtModel {
            base_score,
            trees: Vec::new(),
            learning_rate: TrainParams::default().learning_rate,
            feature_names,
            best_iteration: 0,
            params: TrainParams::default(),
            train_mse_history: Vec::new(),
            valid_rmse_history: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                found: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees[..self.best_iteration].iter().map(|t| t.predict(x)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict(&self, m: &DesignMatrix) -> Result<Vec<f64>> {
        check_features(&self.feature_names, m.feature_names())?;
        Ok((0..m.n_rows())
            .into_par_iter()
            .map(|i| self.predict_unchecked(m.row(i)))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
