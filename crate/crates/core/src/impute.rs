//! SoftImpute: fill missing cells by iterating a soft-thresholded SVD of
//! the observed entries merged with the current low-rank estimate.
//!
//! Imputation is label-free. The pipeline runs it once over the whole matrix
//! before fold construction.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ColumnKind, FeatureMatrix};
use crate::linalg::svd_right;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            lambda: 1.0,
            max_iters: 200,
            tol: 1e-5,
            standardize: true,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig("impute lambda must be > 0".into()));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("impute tol must be > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Convergence record, one objective value per iterate (index 0 is the
/// all-zero starting point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    pub objective: Vec<f64>,
    pub rank: usize,
}

/// Core iteration on a dense matrix with an observation mask. Returns the
/// completed matrix (observed cells copied back) and the report.
pub fn soft_impute_dense(
    x: &Array2<f64>,
    observed: &Array2<bool>,
    cfg: &ImputeConfig,
) -> Result<(Array2<f64>, ImputeReport)> {
    cfg.validate()?;
    let (n, p) = x.dim();
    let obs_x = Array2::from_shape_fn((n, p), |(i, j)| if observed[[i, j]] { x[[i, j]] } else { 0.0 });
    let mut z = Array2::<f64>::zeros((n, p));
    let half_sq_residual = |z: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        Zip::from(observed).and(&obs_x).and(z).for_each(|&o, &a, &b| {
            if o {
                acc += (a - b) * (a - b);
            }
        });
        0.5 * acc
    };
    let mut objective = vec![half_sq_residual(&z)];
    let mut delta = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut rank = 0;

    if observed.iter().all(|&o| o) {
        return Ok((
            x.clone(),
            ImputeReport {
                iterations: 0,
                final_delta: 0.0,
                converged: true,
                objective,
                rank: p.min(n),
            },
        ));
    }

    let mut filled = obs_x.clone();
    while iterations < cfg.max_iters {
        Zip::from(&mut filled)
            .and(observed)
            .and(&obs_x)
            .and(&z)
            .for_each(|f, &o, &a, &b| *f = if o { a } else { b });
        // Z = U S_λ Vᵀ = filled · V diag(s_λ / s) Vᵀ, so U is never formed.
        let (s, vt) = svd_right(filled.view());
        let shrunk: Vec<f64> = s.iter().map(|s| (s - cfg.lambda).max(0.0)).collect();
        rank = shrunk.iter().filter(|&&s| s > 0.0).count();
        let z_new = if rank > 0 {
            let v = vt.slice(ndarray::s![..rank, ..]);
            let ratio = ndarray::Array1::from_iter((0..rank).map(|k| shrunk[k] / s[k]));
            let proj = v.t().dot(&(&v * &ratio.view().insert_axis(Axis(1))));
            filled.dot(&proj)
        } else {
            Array2::<f64>::zeros((n, p))
        };
        let diff: f64 = z_new.iter().zip(z.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let base: f64 = z.iter().map(|v| v * v).sum();
        delta = if base > 0.0 { (diff / base).sqrt() } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        z = z_new;
        iterations += 1;
        objective.push(half_sq_residual(&z) + cfg.lambda * shrunk.iter().sum::<f64>());
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    for ((i, j), &o) in observed.indexed_iter() {
        if o {
            z[[i, j]] = x[[i, j]];
        }
    }
    Ok((
        z,
        ImputeReport {
            iterations,
            final_delta: delta,
            converged,
            objective,
            rank,
        },
    ))
}

/// Fills every missing cell of `m`. Observed cells are returned bit-for-bit;
/// binary and one-hot columns are thresholded at 0.5 and integer columns
/// rounded.
pub fn soft_impute(m: &FeatureMatrix, cfg: &ImputeConfig) -> Result<(FeatureMatrix, ImputeReport)> {
    let (n, p) = (m.n_rows(), m.n_cols());
    if n < 2 {
        return Err(Error::InvalidInput("imputation needs at least two rows".into()));
    }
    let columns = m.columns();
    let mut mean = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 0..p {
        let vals: Vec<f64> = m.rows().iter().filter_map(|r| r[j]).collect();
        if vals.is_empty() {
            return Err(Error::AllMissingColumn(columns[j].name.clone()));
        }
        if cfg.standardize {
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[j] = mu;
            scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    let observed = Array2::from_shape_fn((n, p), |(i, j)| m.get(i, j).is_some());
    let x = Array2::from_shape_fn((n, p), |(i, j)| {
        m.get(i, j).map(|v| (v - mean[j]) / scale[j]).unwrap_or(0.0)
    });
    let (z, report) = soft_impute_dense(&x, &observed, cfg)?;
    if !report.converged {
        log::warn!(
            "soft-impute stopped at max_iters={} with relative change {:.3e}",
            report.iterations,
            report.final_delta
        );
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<Option<f64>> = (0..p)
            .map(|j| match m.get(i, j) {
                Some(v) => Some(v),
                None => {
                    let v = z[[i, j]] * scale[j] + mean[j];
                    Some(match columns[j].kind {
                        ColumnKind::Binary => {
                            if v >= 0.5 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        ColumnKind::Integer => v.round(),
                        _ => v,
                    })
                }
            })
            .collect();
        resolve_one_hot(m, i, columns, &mut row);
        rows.push(row);
    }
    let out = FeatureMatrix::new(m.schema().clone(), m.ids().to_vec(), rows)?;
    Ok((out, report))
}

/// Missing members of a one-hot group become 0 except at most one, the
/// largest imputed value, which becomes 1 if it reaches 0.5 and no observed
/// member is already 1.
fn resolve_one_hot(
    m: &FeatureMatrix,
    row: usize,
    columns: &[crate::features::Column],
    out: &mut [Option<f64>],
) {
    let mut j = 0;
    while j < columns.len() {
        let ColumnKind::OneHot { feature } = columns[j].kind else {
            j += 1;
            continue;
        };
        let start = j;
        while j < columns.len() && columns[j].kind == (ColumnKind::OneHot { feature }) {
            j += 1;
        }
        let group = start..j;
        let has_one = group.clone().any(|c| m.get(row, c) == Some(1.0));
        let best = group
            .clone()
            .filter(|&c| m.get(row, c).is_none())
            .max_by(|&a, &b| {
                out[a]
                    .unwrap_or(f64::MIN)
                    .total_cmp(&out[b].unwrap_or(f64::MIN))
                    .then(b.cmp(&a))
            });
        for c in group {
            if m.get(row, c).is_none() {
                let on = !has_one && Some(c) == best && out[c].unwrap_or(0.0) >= 0.5;
                out[c] = Some(if on { 1.0 } else { 0.0 });
            }
        }
    }
}
