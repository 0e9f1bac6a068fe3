use crate::error::{Error, Result};
use crate::qr::FeatureMatrix;
use serde::{Deserialize, Serialize};

/// Smooth functions of the level appended as extra columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelTerm {
    /// `α`.
    Linear,
    /// `(α − c)²`.
    SquaredOffset { center: f64 },
}

impl LevelTerm {
    fn apply(&self, a: f64) -> f64 {
        match *self {
            LevelTerm::Linear => a,
            LevelTerm::SquaredOffset { center } => (a - center).powi(2),
        }
    }
}

fn bin_of(a: f64, edges: &[f64]) -> Option<usize> {
    let last = edges.len() - 1;
    if a < edges[0] || a > edges[last] {
        return None;
    }
    if a == edges[last] {
        return Some(last - 1);
    }
    Some(edges.partition_point(|&e| e <= a) - 1)
}

/// Append level-bin indicators `1{α_i ∈ [e_k, e_{k+1})}` (last bin closed)
/// and, with group columns, their products with each group indicator.
/// Columns that are identically zero are dropped.
pub fn augment_features(
    base: &FeatureMatrix,
    alpha_values: &[f64],
    bin_edges: &[f64],
    group_cols: Option<&[Vec<f64>]>,
) -> Result<FeatureMatrix> {
    let n = base.rows();
    if alpha_values.len() != n {
        return Err(Error::Validation(format!(
            "{n} feature rows but {} level values",
            alpha_values.len()
        )));
    }
    if bin_edges.len() < 2 {
        return Err(Error::Validation("need at least two bin edges".into()));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1])
        || bin_edges[0] < 0.0
        || bin_edges[bin_edges.len() - 1] > 1.0
    {
        return Err(Error::Validation(
            "bin edges must be strictly ascending within [0, 1]".into(),
        ));
    }
    let nbins = bin_edges.len() - 1;
    let mut bins = vec![vec![0.0; n]; nbins];
    for (i, &a) in alpha_values.iter().enumerate() {
        if let Some(k) = bin_of(a, bin_edges) {
            bins[k][i] = 1.0;
        }
    }
    let mut extra = Vec::new();
    for (k, col) in bins.iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            tracing::warn!(
                lo = bin_edges[k],
                hi = bin_edges[k + 1],
                "empty level bin dropped"
            );
            continue;
        }
        extra.push(col.clone());
        if let Some(groups) = group_cols {
            for (g, gcol) in groups.iter().enumerate() {
                if gcol.len() != n {
                    return Err(Error::Validation(format!(
                        "group column {g} has {} rows, expected {n}",
                        gcol.len()
                    )));
                }
                let prod: Vec<f64> = col.iter().zip(gcol).map(|(a, b)| a * b).collect();
                if prod.iter().any(|&v| v != 0.0) {
                    extra.push(prod);
                } else {
                    tracing::warn!(bin = k, group = g, "empty bin-group cell dropped");
                }
            }
        }
    }
    base.with_columns(&extra)
}

/// Append smooth level terms such as `α` or `(α − 0.1)²`.
pub fn append_level_terms(
    base: &FeatureMatrix,
    alpha_values: &[f64],
    terms: &[LevelTerm],
) -> Result<FeatureMatrix> {
    if alpha_values.len() != base.rows() {
        return Err(Error::Validation("level values length mismatch".into()));
    }
    let cols: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| alpha_values.iter().map(|&a| t.apply(a)).collect())
        .collect();
    base.with_columns(&cols)
}

/// Keep a maximal set of linearly independent columns, scanning left to
/// right. Returns the reduced matrix and the kept column indices.
pub fn drop_dependent_columns(m: &FeatureMatrix) -> (FeatureMatrix, Vec<usize>) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..m.cols() {
        let col = m.column(j);
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = col.clone();
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &basis {
                let p: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= p * qi);
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0 {
            w.iter_mut().for_each(|v| *v /= norm);
            basis.push(w);
            kept.push(j);
        }
    }
    let rows: Vec<Vec<f64>> = (0..m.rows())
        .map(|i| kept.iter().map(|&j| m.row(i)[j]).collect())
        .collect();
    let out = FeatureMatrix::new(
        m.rows(),
        kept.len(),
        rows.concat(),
    )
    .expect("subset of a valid matrix");
    (out, kept)
}
