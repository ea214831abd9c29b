//! Synthetic minority oversampling by interpolation between a minority row
//! and one of its nearest minority neighbours.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    /// Minority/majority count ratio to reach, in (0, 1].
    pub target_ratio: f64,
    pub seed: u64,
    /// Measure neighbour distances on z-scored columns. Interpolation is
    /// done on the raw values either way.
    pub standardize: bool,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        SmoteConfig {
            k_neighbors: 5,
            target_ratio: 1.0,
            seed: 0,
            standardize: true,
        }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::InvalidConfig("smote k_neighbors must be >= 1".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::InvalidConfig("smote target_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Where a synthetic row came from: `row = x[base] + gap * (x[neighbor] - x[base])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOrigin {
    pub base: usize,
    pub neighbor: usize,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct Resampled {
    /// Original rows first, synthetic rows appended.
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub minority: u8,
    pub k_used: usize,
    pub origins: Vec<SyntheticOrigin>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-column multipliers giving unit standard deviation (1 for constant columns).
fn column_scales(x: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 { 1.0 / sd } else { 1.0 }
        })
        .collect()
}

/// Oversamples the minority class of `(x, y)` (labels 0/1) until the
/// minority count reaches `ceil(majority * target_ratio)`.
pub fn smote_oversample(x: ArrayView2<'_, f64>, y: &[u8], cfg: &SmoteConfig) -> Result<Resampled> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::InvalidInput("row and label counts differ".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("smote input must be dense and finite".into()));
    }
    let ones = y.iter().filter(|&&l| l == 1).count();
    let zeros = y.len() - ones;
    if ones == 0 || zeros == 0 {
        return Err(Error::NothingToOversample("input holds a single class".into()));
    }
    let (minority, n_min, n_maj) = if ones <= zeros { (1u8, ones, zeros) } else { (0u8, zeros, ones) };
    if n_min == 1 {
        return Err(Error::NothingToOversample(
            "minority class has one row, no neighbour exists".into(),
        ));
    }
    let mut k = cfg.k_neighbors;
    if n_min <= k {
        log::warn!("minority count {n_min} <= k={k}; using k={}", n_min - 1);
        k = n_min - 1;
    }
    let target = (n_maj as f64 * cfg.target_ratio).ceil() as usize;
    let n_new = target.saturating_sub(n_min);

    let mut out = Resampled {
        x: x.to_owned(),
        y: y.to_vec(),
        minority,
        k_used: k,
        origins: Vec::with_capacity(n_new),
    };
    if n_new == 0 {
        return Ok(out);
    }

    let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority).collect();
    let scales = if cfg.standardize {
        column_scales(x)
    } else {
        vec![1.0; x.ncols()]
    };
    let scaled = Array2::from_shape_fn((members.len(), x.ncols()), |(r, c)| x[[members[r], c]] * scales[c]);
    let neighbours: Vec<Vec<usize>> = members
        .iter()
        .enumerate()
        .map(|(a, _)| {
            let mut d: Vec<(f64, usize)> = members
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(b, &j)| (sq_dist(scaled.row(a), scaled.row(b)), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(&mut rng);

    let mut synth = Array2::<f64>::zeros((n_new, x.ncols()));
    for s in 0..n_new {
        let slot = order[s % order.len()];
        let base = members[slot];
        let nn = neighbours[slot][rng.random_range(0..k)];
        let gap: f64 = rng.random();
        let row = &x.row(base) + &((&x.row(nn) - &x.row(base)) * gap);
        synth.row_mut(s).assign(&row);
        out.origins.push(SyntheticOrigin {
            base,
            neighbor: nn,
            gap,
        });
    }
    out.x.append(Axis(0), synth.view()).expect("column counts agree");
    out.y.extend(std::iter::repeat_n(minority, n_new));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn balanced_input_unchanged() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]];
        let y = [0, 1, 0, 1];
        let r = smote_oversample(x.view(), &y, &SmoteConfig::default()).unwrap();
        assert_eq!(r.x, x);
        assert_eq!(r.y, y);
    }

    #[test]
    fn two_point_minority_stays_on_segment() {
        let mut rows = vec![[0.0, 0.0], [1.0, 1.0]];
        rows.extend((0..8).map(|i| [5.0 + i as f64, -3.0]));
        let x = Array2::from_shape_fn((10, 2), |(i, j)| rows[i][j]);
        let mut y = vec![1u8, 1];
        y.extend([0u8; 8]);
        let cfg = SmoteConfig {
            k_neighbors: 1,
            ..Default::default()
        };
        let r = smote_oversample(x.view(), &y, &cfg).unwrap();
        assert_eq!(r.x.nrows(), 16);
        for row in r.x.rows().into_iter().skip(10) {
            assert!((row[0] - row[1]).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&row[0]));
        }
        assert!(r.y[10..].iter().all(|&l| l == 1));
    }

    #[test]
    fn count_arithmetic() {
        // 10% minority of 1000 rows, full balance: 900 minority after.
        let x = Array2::from_shape_fn((1000, 3), |(i, j)| ((i * 7 + j * 13) % 101) as f64);
        let y: Vec<u8> = (0..1000).map(|i| u8::from(i % 10 == 0)).collect();
        let r = smote_oversample(x.view(), &y, &SmoteConfig::default()).unwrap();
        let maj = 900usize;
        let expected_new = (maj as f64 * 1.0).ceil() as usize - 100;
        assert_eq!(r.origins.len(), expected_new);
        assert_eq!(r.y.iter().filter(|&&l| l == 1).count(), 900);
        assert_eq!(r.x.slice(ndarray::s![..1000, ..]), x);
    }

    #[test]
    fn partial_ratio() {
        let x = Array2::from_shape_fn((300, 2), |(i, j)| (i * (j + 1)) as f64);
        let y: Vec<u8> = (0..300).map(|i| u8::from(i % 6 == 0)).collect();
        let cfg = SmoteConfig {
            target_ratio: 0.5,
            ..Default::default()
        };
        let r = smote_oversample(x.view(), &y, &cfg).unwrap();
        let min = r.y.iter().filter(|&&l| l == 1).count() as f64;
        let maj = 250.0;
        assert!((min / maj - 0.5).abs() <= 1.0 / maj);
    }

    #[test]
    fn errors() {
        let x = array![[0.0], [1.0], [2.0]];
        assert!(matches!(
            smote_oversample(x.view(), &[0, 0, 0], &SmoteConfig::default()),
            Err(Error::NothingToOversample(_))
        ));
        assert!(matches!(
            smote_oversample(x.view(), &[0, 0, 1], &SmoteConfig::default()),
            Err(Error::NothingToOversample(_))
        ));
    }

    #[test]
    fn k_reduced_for_tiny_minority() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0], [9.0]];
        let r = smote_oversample(x.view(), &[1, 1, 1, 0, 0, 0, 0], &SmoteConfig::default()).unwrap();
        assert_eq!(r.k_used, 2);
        assert_eq!(r.y.iter().filter(|&&l| l == 1).count(), 4);
    }

    #[test]
    fn neighbours_use_standardized_distance() {
        // Majority rows spread column 1 widely and column 0 narrowly, so
        // z-scoring reverses which minority row is closest to row 0.
        let mut rows = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 5.0]];
        for i in 0..10 {
            rows.push([0.1 * (i % 3) as f64, if i % 2 == 0 { 100.0 } else { -100.0 }]);
        }
        let x = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
        let mut y = vec![1u8; 3];
        y.extend([0u8; 10]);
        let base = SmoteConfig { k_neighbors: 1, ..Default::default() };
        let z = smote_oversample(x.view(), &y, &base).unwrap();
        let raw = smote_oversample(x.view(), &y, &SmoteConfig { standardize: false, ..base }).unwrap();
        let nn_of = |r: &Resampled, b: usize| r.origins.iter().find(|o| o.base == b).map(|o| o.neighbor);
        assert_eq!(nn_of(&raw, 0), Some(1));
        assert_eq!(nn_of(&z, 0), Some(2));
    }

    #[test]
    fn seeded() {
        let x = Array2::from_shape_fn((200, 4), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 7.0);
        let y: Vec<u8> = (0..200).map(|i| u8::from(i % 5 == 0)).collect();
        let a = smote_oversample(x.view(), &y, &SmoteConfig { seed: 1, ..Default::default() }).unwrap();
        let b = smote_oversample(x.view(), &y, &SmoteConfig { seed: 1, ..Default::default() }).unwrap();
        let c = smote_oversample(x.view(), &y, &SmoteConfig { seed: 2, ..Default::default() }).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.x, c.x);
    }

    fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
        sq_dist(a, b).sqrt()
    }

    proptest::proptest! {
        #[test]
        fn synthetic_rows_are_convex_combinations(
            seed in proptest::prelude::any::<u64>(),
            n_min in 2usize..20,
            n_maj in 20usize..60,
            ratio in 0.1f64..=1.0,
            k in 1usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = n_min + n_maj;
            let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 10.0 - 5.0);
            let y: Vec<u8> = (0..n).map(|i| u8::from(i < n_min)).collect();
            let cfg = SmoteConfig { k_neighbors: k, target_ratio: ratio, seed, standardize: seed % 2 == 0 };
            let r = smote_oversample(x.view(), &y, &cfg).unwrap();
            proptest::prop_assert_eq!(r.x.slice(ndarray::s![..n, ..]), x.view());
            for (o, row) in r.origins.iter().zip(r.x.rows().into_iter().skip(n)) {
                proptest::prop_assert_eq!(y[o.base], 1);
                proptest::prop_assert_eq!(y[o.neighbor], 1);
                proptest::prop_assert!(o.base != o.neighbor);
                let lhs = dist(row, x.row(o.base)) + dist(row, x.row(o.neighbor));
                let rhs = dist(x.row(o.base), x.row(o.neighbor));
                proptest::prop_assert!((lhs - rhs).abs() <= 1e-9);
            }
            proptest::prop_assert!(r.y[n..].iter().all(|&l| l == 1));
            let min = r.y.iter().filter(|&&l| l == 1).count() as f64;
            let maj = n_maj as f64;
            if min > n_min as f64 {
                proptest::prop_assert!((min / maj - ratio).abs() <= 1.0 / maj);
            }
        }
    }
}
