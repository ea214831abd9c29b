//! Thin singular value decomposition: Householder QR followed by one-sided
//! Jacobi rotations on the triangular factor.

use ndarray::{Array1, Array2, ArrayView2};

#[derive(Debug, Clone)]
pub struct Svd {
    /// m × k, k = min(m, n)
    pub u: Array2<f64>,
    /// Descending, length k.
    pub s: Array1<f64>,
    /// k × n
    pub vt: Array2<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> Array2<f64> {
        let us = &self.u * &self.s.view().insert_axis(ndarray::Axis(0));
        us.dot(&self.vt)
    }
}

const JACOBI_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Thin SVD with a fixed sign convention: the first non-negligible entry of
/// every left singular vector is non-negative.
pub fn svd(a: ArrayView2<'_, f64>) -> Svd {
    let (m, n) = a.dim();
    if m < n {
        let t = svd(a.t());
        return Svd {
            u: t.vt.t().to_owned(),
            s: t.s,
            vt: t.u.t().to_owned(),
        }
        .normalized();
    }
    if n == 0 {
        return Svd {
            u: Array2::zeros((m, 0)),
            s: Array1::zeros(0),
            vt: Array2::zeros((0, 0)),
        };
    }

    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let reflectors = householder_qr(&mut cols, m);

    // R is the upper n × n block, held column-wise.
    let mut w: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (0..n).map(|i| if i <= j { c[i] } else { 0.0 }).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    one_sided_jacobi(&mut w, &mut v);

    let mut order: Vec<(usize, f64)> = w
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let smax = order.first().map(|o| o.1).unwrap_or(0.0);
    let mut u = Array2::zeros((m, n));
    let mut s = Array1::zeros(n);
    let mut vt = Array2::zeros((n, n));
    for (k, &(j, sigma)) in order.iter().enumerate() {
        s[k] = sigma;
        // Left vector of R, padded with zeros to length m, then mapped by Q.
        let mut col = vec![0.0; m];
        if sigma > smax * 1e-300 && sigma > 0.0 {
            for i in 0..n {
                col[i] = w[j][i] / sigma;
            }
            apply_q(&reflectors, &mut col);
        }
        for i in 0..m {
            u[[i, k]] = col[i];
        }
        for i in 0..n {
            vt[[k, i]] = v[j][i];
        }
    }
    Svd { u, s, vt }.normalized()
}

/// Singular values (descending) and right singular vectors (rows of the
/// returned k × n matrix) of a tall matrix, without forming U. Signs of the
/// vectors are unspecified.
pub fn svd_right(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    if m < n {
        let d = svd(a);
        return (d.s, d.vt);
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    householder_qr(&mut cols, m);
    let mut w: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (0..n).map(|i| if i <= j { c[i] } else { 0.0 }).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    one_sided_jacobi(&mut w, &mut v);
    let mut order: Vec<(usize, f64)> = w
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let s = Array1::from_iter(order.iter().map(|o| o.1));
    let vt = Array2::from_shape_fn((n, n), |(k, i)| v[order[k].0][i]);
    (s, vt)
}

impl Svd {
    fn normalized(mut self) -> Self {
        let k = self.s.len();
        for c in 0..k {
            let col = self.u.column(c);
            let scale = col.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            let first = col.iter().copied().find(|x| x.abs() > scale * 1e-12);
            if matches!(first, Some(x) if x < 0.0) {
                self.u.column_mut(c).mapv_inplace(|x| -x);
                self.vt.row_mut(c).mapv_inplace(|x| -x);
            }
        }
        self
    }
}

/// In-place Householder QR on column-major `cols` (each of length m).
/// Leaves R in the upper triangle and returns the reflectors (v, start row).
fn householder_qr(cols: &mut [Vec<f64>], m: usize) -> Vec<(Vec<f64>, usize)> {
    let n = cols.len();
    let mut refl = Vec::with_capacity(n);
    for j in 0..n.min(m) {
        let norm = cols[j][j..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            refl.push((Vec::new(), j));
            continue;
        }
        let alpha = if cols[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            refl.push((Vec::new(), j));
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for col in cols.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let d: f64 = 2.0 * v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= d * vi;
            }
        }
        // Exact zeros below the diagonal.
        cols[j][j] = alpha;
        for x in &mut cols[j][j + 1..] {
            *x = 0.0;
        }
        refl.push((v, j));
    }
    refl
}

/// x ← Q x, with Q = H_0 H_1 … H_{n-1}.
fn apply_q(refl: &[(Vec<f64>, usize)], x: &mut [f64]) {
    for (v, j) in refl.iter().rev() {
        if v.is_empty() {
            continue;
        }
        let tail = &mut x[*j..];
        let d: f64 = 2.0 * v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum::<f64>();
        for (t, vi) in tail.iter_mut().zip(v) {
            *t -= d * vi;
        }
    }
}

/// Rotates column pairs of `w` until mutually orthogonal, accumulating the
/// rotations into `v`.
fn one_sided_jacobi(w: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    let n = w.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s);
                rotate(v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(m: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = m.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
