//! Small dense least squares with cluster-robust covariance.
//!
//! Designs here have at most a few dozen columns, so the normal equations are
//! formed explicitly and solved with a fully pivoted LU factorisation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold of the column-scaled Gram matrix below
/// which a direction counts as collinear.
const RANK_TOLERANCE: f64 = 1e-12;

/// Variance estimator for least-squares coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    /// Clustered at the group level (CR1).
    #[default]
    Clustered,
    /// Heteroskedasticity-robust, independent units (HC1).
    Robust,
}

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub nobs: usize,
    pub clusters: usize,
}

/// Numerical rank of `x` from the eigenvalues of its column-scaled Gram matrix.
pub fn rank(x: &DMatrix<f64>) -> usize {
    let (_, rank) = scaled_gram_rank(x);
    rank
}

fn scaled_gram_rank(x: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let xtx = x.transpose() * x;
    let k = xtx.ncols();
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let d = xtx[(j, j)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(k, k, |i, j| xtx[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().copied().fold(0.0f64, f64::max);
    let rank = eig.iter().filter(|&&e| e > RANK_TOLERANCE * max.max(f64::MIN_POSITIVE)).count();
    (xtx, rank)
}

/// Ordinary least squares of `y` on `x`.
///
/// `clusters` assigns each row to a cluster; with [`SeKind::Clustered`] the
/// sandwich sums scores within clusters, with [`SeKind::Robust`] every row is
/// its own cluster.
pub fn ols(x: &DMatrix<f64>, y: &[f64], clusters: &[usize], kind: SeKind) -> Result<OlsFit> {
    let (nobs, k) = x.shape();
    if y.len() != nobs || clusters.len() != nobs {
        return Err(Error::InvalidParameter(format!(
            "design has {nobs} rows but {} outcomes and {} cluster ids",
            y.len(),
            clusters.len()
        )));
    }
    let (xtx, rank) = scaled_gram_rank(x);
    if rank < k || nobs <= k {
        return Err(Error::SingularDesign { rank, columns: k });
    }
    let yv = DVector::from_column_slice(y);
    let xty = x.transpose() * &yv;
    let lu = xtx.clone().full_piv_lu();
    let coef = lu.solve(&xty).ok_or(Error::SingularDesign { rank, columns: k })?;
    let bread = lu.try_inverse().ok_or(Error::SingularDesign { rank, columns: k })?;
    let resid = &yv - x * &coef;

    let (ids, count) = match kind {
        SeKind::Clustered => compact_ids(clusters),
        SeKind::Robust => ((0..nobs).collect(), nobs),
    };
    let mut scores = DMatrix::<f64>::zeros(count, k);
    for r in 0..nobs {
        let u = resid[r];
        for c in 0..k {
            scores[(ids[r], c)] += x[(r, c)] * u;
        }
    }
    let meat = scores.transpose() * &scores;
    let n = nobs as f64;
    let factor = match kind {
        SeKind::Clustered if count > 1 => {
            let g = count as f64;
            g / (g - 1.0) * (n - 1.0) / (n - k as f64)
        }
        _ => n / (n - k as f64),
    };
    let vcov = (&bread * meat * &bread) * factor;
    let se = (0..k).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect();
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        se,
        vcov,
        nobs,
        clusters: count,
    })
}

fn compact_ids(clusters: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let ids = clusters
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect();
    (ids, map.len())
}
