//! Second-order gradient-boosted regression trees with a logistic objective.
//!
//! Trees are grown level-wise by exact greedy search over presorted feature
//! columns. Each node owns a contiguous segment of every sorted column, and
//! a split stably partitions that segment, so a level costs one pass over
//! the active rows per feature.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub lambda_l2: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    /// Reserved for row/column subsampling, which is off.
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_trees: 200,
            learning_rate: 0.1,
            max_depth: 6,
            lambda_l2: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig("learning_rate must be in (0, 1]".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::InvalidConfig("max_depth must be >= 1".into()));
        }
        if !(self.lambda_l2 >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "lambda_l2, gamma and min_child_weight must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// A tree node. Rows with `x[feat] < thr` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feat: usize,
        thr: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        leaf: f64,
    },
}

impl Node {
    pub fn eval(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { leaf } => return *leaf,
                Node::Split {
                    feat,
                    thr,
                    left,
                    right,
                } => node = if row[*feat] < *thr { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            Node::Leaf { .. } => None,
            Node::Split {
                feat, left, right, ..
            } => [Some(*feat), left.max_feature(), right.max_feature()]
                .into_iter()
                .flatten()
                .max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    /// Raw log-odds added to every prediction.
    pub base_score: f64,
    pub config: GbtConfig,
    pub schema_hash: String,
    /// Hash of the run configuration that produced the model.
    #[serde(default)]
    pub config_hash: String,
    pub n_features: usize,
    /// Leaf weights are stored unscaled; `config.learning_rate` is applied
    /// when summing.
    pub trees: Vec<Node>,
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss `-[y ln σ(f) + (1-y) ln(1-σ(f))]`, computed as softplus(f) - y f.
pub fn logistic_loss(f: f64, y: f64) -> f64 {
    let softplus = if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    };
    softplus - y * f
}

/// First and second derivative of [`logistic_loss`] in `f`.
pub fn grad_hess(f: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(f);
    (p - y, p * (1.0 - p))
}

/// Split gain for left/right gradient and hessian sums.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: GbtModel,
    /// Mean training loss before the first tree and after each round.
    pub loss_history: Vec<f64>,
}

/// Scores within this relative distance count as tied; summation order
/// differs between scan directions.
const TIE_RTOL: f64 = 1e-12;

struct Columns {
    idx: Vec<Vec<u32>>,
    members: Vec<u32>,
}

enum Arena {
    Leaf(f64),
    Split {
        feat: usize,
        thr: f64,
        left: usize,
        right: usize,
    },
}

fn to_node(arena: &[Arena], i: usize) -> Node {
    match arena[i] {
        Arena::Leaf(w) => Node::Leaf { leaf: w },
        Arena::Split {
            feat,
            thr,
            left,
            right,
        } => Node::Split {
            feat,
            thr,
            left: Box::new(to_node(arena, left)),
            right: Box::new(to_node(arena, right)),
        },
    }
}

struct Open {
    arena: usize,
    start: usize,
    end: usize,
    g: f64,
    h: f64,
}

#[derive(Clone, Copy)]
struct Best {
    feat: usize,
    thr: f64,
}

fn validate_xy(x: ArrayView2<'_, f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::InvalidInput("row and label counts differ".into()));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("need at least 2 training rows".into()));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite feature value at row {}, column {}",
            pos / x.ncols().max(1),
            pos % x.ncols().max(1)
        )));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::InvalidInput("training labels hold a single class".into()));
    }
    Ok(())
}

pub fn train(x: ArrayView2<'_, f64>, y: &[u8], cfg: &GbtConfig) -> Result<GbtModel> {
    train_logged(x, y, cfg).map(|t| t.model)
}

pub fn train_logged(x: ArrayView2<'_, f64>, y: &[u8], cfg: &GbtConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    validate_xy(x, y)?;
    let (n, p) = x.dim();
    let yf: Vec<f64> = y.iter().map(|&l| f64::from(l)).collect();
    let mean = (yf.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (mean / (1.0 - mean)).ln();

    let xt: Vec<Vec<f64>> = (0..p).map(|j| x.column(j).to_vec()).collect();
    let mut cols = Columns {
        idx: Vec::with_capacity(p),
        members: (0..n as u32).collect(),
    };
    for col in &xt {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
        cols.idx.push(order);
    }

    let sorted = Columns {
        idx: cols.idx.clone(),
        members: cols.members.clone(),
    };

    let mut f = vec![base_score; n];
    let mut gh = vec![[0.0f64; 2]; n];
    let mean_loss = |f: &[f64]| f.iter().zip(&yf).map(|(&fi, &yi)| logistic_loss(fi, yi)).sum::<f64>() / n as f64;
    let mut loss_history = vec![mean_loss(&f)];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut go_left = vec![false; n];
    let mut scratch_idx: Vec<u32> = Vec::with_capacity(n);

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let (gi, hi) = grad_hess(f[i], yf[i]);
            gh[i] = [gi, hi];
        }
        // Splits permute the columns within node segments; start each tree
        // from the global sort.
        for (w, m) in cols.idx.iter_mut().zip(&sorted.idx) {
            w.copy_from_slice(m);
        }
        cols.members.copy_from_slice(&sorted.members);
        let tree = grow_tree(
            &mut cols,
            &xt,
            &gh,
            cfg,
            &mut go_left,
            &mut scratch_idx,
            &mut f,
        );
        trees.push(tree);
        loss_history.push(mean_loss(&f));
    }

    Ok(TrainOutput {
        model: GbtModel {
            base_score,
            config: cfg.clone(),
            schema_hash: String::new(),
            config_hash: String::new(),
            n_features: p,
            trees,
        },
        loss_history,
    })
}

#[allow(clippy::too_many_arguments)]
fn grow_tree(
    cols: &mut Columns,
    xt: &[Vec<f64>],
    gh: &[[f64; 2]],
    cfg: &GbtConfig,
    go_left: &mut [bool],
    scratch_idx: &mut Vec<u32>,
    f: &mut [f64],
) -> Node {
    let n = gh.len();
    let lambda = cfg.lambda_l2;
    let mcw = cfg.min_child_weight;
    let mut arena = vec![Arena::Leaf(0.0)];
    let mut level = vec![Open {
        arena: 0,
        start: 0,
        end: n,
        g: gh.iter().map(|v| v[0]).sum(),
        h: gh.iter().map(|v| v[1]).sum(),
    }];
    let mut finished: Vec<Open> = Vec::new();

    for depth in 0..=cfg.max_depth {
        if level.is_empty() {
            break;
        }
        let mut best: Vec<Option<Best>> = vec![None; level.len()];
        if depth < cfg.max_depth {
            // Candidates are ranked by S = GL²/(HL+λ) + GR²/(HR+λ), held as the
            // fraction num/den so the scan needs no division. gain > 0 is
            // S > G²/(H+λ) + 2γ.
            let mut frac: Vec<(f64, f64)> = level
                .iter()
                .map(|nd| (nd.g * nd.g / (nd.h + lambda) + 2.0 * cfg.gamma, 1.0))
                .collect();
            for (feat, (idx, xf)) in cols.idx.iter().zip(xt).enumerate() {
                for ((node, b), bf) in level.iter().zip(best.iter_mut()).zip(frac.iter_mut()) {
                    if node.end - node.start < 2 || node.h < 2.0 * mcw {
                        continue;
                    }
                    let seg = &idx[node.start..node.end];
                    let len = seg.len();
                    let v_first = xf[seg[0] as usize];
                    let v_last = xf[seg[len - 1] as usize];
                    if v_first == v_last {
                        continue;
                    }
                    // The runs of the smallest and largest value hold no
                    // interior candidates; scan from the side that skips the
                    // longer run.
                    let first_end = seg.partition_point(|&r| xf[r as usize] <= v_first);
                    let last_start = seg.partition_point(|&r| xf[r as usize] < v_last);
                    let mut offer = |gl: f64, hl: f64, a: f64, c: f64, leftward: bool| {
                        let tie_wins = leftward && matches!(*b, Some(bb) if bb.feat == feat);
                        let (gr, hr) = (node.g - gl, node.h - hl);
                        let (dl, dr) = (hl + lambda, hr + lambda);
                        let num = gl * gl * dr + gr * gr * dl;
                        let den = dl * dr;
                        let lhs = num * bf.1;
                        let rhs = bf.0 * den;
                        let better = if tie_wins { lhs >= rhs * (1.0 - TIE_RTOL) } else { lhs > rhs * (1.0 + TIE_RTOL) };
                        if den > 0.0 && better {
                            *bf = (num, den);
                            let mut thr = 0.5 * (a + c);
                            if thr <= a {
                                thr = c;
                            }
                            *b = Some(Best { feat, thr });
                        }
                    };
                    if first_end <= len - last_start {
                        let (mut gl, mut hl) = (0.0, 0.0);
                        let mut c = v_first;
                        for (&r, &rn) in seg[..last_start].iter().zip(&seg[1..=last_start]) {
                            let a = c;
                            c = xf[rn as usize];
                            let [gi, hi_] = gh[r as usize];
                            gl += gi;
                            hl += hi_;
                            if node.h - hl < mcw {
                                break;
                            }
                            if a == c || hl < mcw {
                                continue;
                            }
                            offer(gl, hl, a, c, false);
                        }
                    } else {
                        // Right to left: later candidates have lower
                        // thresholds and win ties within this feature.
                        let (mut gr, mut hr) = (0.0, 0.0);
                        let mut a = v_last;
                        for (&r, &rp) in seg[first_end..].iter().zip(&seg[first_end - 1..]).rev() {
                            let c = a;
                            a = xf[rp as usize];
                            let [gi, hi_] = gh[r as usize];
                            gr += gi;
                            hr += hi_;
                            let hl = node.h - hr;
                            if hl < mcw {
                                break;
                            }
                            if a == c || hr < mcw {
                                continue;
                            }
                            offer(node.g - gr, hl, a, c, true);
                        }
                    }
                }
            }
        }

        let mut next = Vec::new();
        for (node, b) in level.into_iter().zip(best) {
            let Some(b) = b else {
                finished.push(node);
                continue;
            };
            let xf = &xt[b.feat];
            for &r in &cols.members[node.start..node.end] {
                go_left[r as usize] = xf[r as usize] < b.thr;
            }
            let n_left = partition(&mut cols.members, node.start, node.end, go_left, scratch_idx);
            if depth + 1 < cfg.max_depth {
                let seg = node.start..node.end;
                for (idx, xf) in cols.idx.iter_mut().zip(xt) {
                    // Equal values sit in row order, as do the members, so a
                    // column constant on the node is a copy of them.
                    if xf[idx[node.start] as usize] == xf[idx[node.end - 1] as usize] {
                        idx[seg.clone()].copy_from_slice(&cols.members[seg.clone()]);
                    } else {
                        partition(idx, node.start, node.end, go_left, scratch_idx);
                    }
                }
            }
            let mid = node.start + n_left;
            let (gl, hl) = cols.members[node.start..mid]
                .iter()
                .fold((0.0, 0.0), |(ga, ha), &r| (ga + gh[r as usize][0], ha + gh[r as usize][1]));
            let (gr, hr) = cols.members[mid..node.end]
                .iter()
                .fold((0.0, 0.0), |(ga, ha), &r| (ga + gh[r as usize][0], ha + gh[r as usize][1]));
            let left = arena.len();
            arena.push(Arena::Leaf(0.0));
            arena.push(Arena::Leaf(0.0));
            arena[node.arena] = Arena::Split {
                feat: b.feat,
                thr: b.thr,
                left,
                right: left + 1,
            };
            next.push(Open {
                arena: left,
                start: node.start,
                end: mid,
                g: gl,
                h: hl,
            });
            next.push(Open {
                arena: left + 1,
                start: mid,
                end: node.end,
                g: gr,
                h: hr,
            });
        }
        level = next;
    }
    finished.extend(level);

    for node in finished {
        let w = -node.g / (node.h + lambda);
        arena[node.arena] = Arena::Leaf(w);
        let step = cfg.learning_rate * w;
        for &r in &cols.members[node.start..node.end] {
            f[r as usize] += step;
        }
    }
    to_node(&arena, 0)
}

/// Stable partition of `idx[start..end]` by `go_left`. Returns the left
/// count.
fn partition(idx: &mut [u32], start: usize, end: usize, go_left: &[bool], scratch: &mut Vec<u32>) -> usize {
    scratch.resize(end - start, 0);
    let (mut wl, mut wr) = (0usize, 0usize);
    // Left entries fill the segment front in place; right entries go to scratch.
    for i in start..end {
        let r = idx[i];
        let l = go_left[r as usize] as usize;
        idx[start + wl] = r;
        scratch[wr] = r;
        wl += l;
        wr += 1 - l;
    }
    idx[start + wl..end].copy_from_slice(&scratch[..wr]);
    wl
}

impl GbtModel {
    fn check_width(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::SchemaMismatch(format!(
                "model expects {} feature columns, input has {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn raw_score_row(&self, row: &[f64]) -> f64 {
        let lr = self.config.learning_rate;
        self.trees
            .iter()
            .fold(self.base_score, |acc, t| acc + lr * t.eval(row))
    }

    /// Raw log-odds per row.
    pub fn predict_raw(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                match row.as_slice() {
                    Some(s) => self.raw_score_row(s),
                    None => self.raw_score_row(&row.to_vec()),
                }
            })
            .collect())
    }

    /// P(y = 1) per row.
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.predict_raw(x)?.into_iter().map(sigmoid).collect())
    }

    /// Class labels at threshold 0.5.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| u8::from(p >= 0.5))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GbtModel = serde_json::from_str(s)?;
        for t in &m.trees {
            if t.max_feature().is_some_and(|f| f >= m.n_features) {
                return Err(Error::SchemaMismatch(
                    "tree references a feature beyond the model width".into(),
                ));
            }
        }
        Ok(m)
    }
}
