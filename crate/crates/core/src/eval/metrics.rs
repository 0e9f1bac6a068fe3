use crate::conformal::ScoredClaimSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One bin or group of a coverage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Bin bounds; for group reports both hold the group index.
    pub bin_lo: f64,
    pub bin_hi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub nominal_mean: f64,
    pub realized: f64,
    pub count: usize,
    /// Binomial standard error at the nominal rate.
    pub stderr: f64,
}

impl ReportRow {
    pub fn within(&self, n_se: f64) -> bool {
        (self.realized - self.nominal_mean).abs() <= n_se * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<ReportRow>,
}

impl CoverageReport {
    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Count-weighted mean absolute gap between realized and nominal.
    pub fn mean_abs_error(&self) -> f64 {
        let n = self.total_count();
        if n == 0 {
            return 0.0;
        }
        self.rows
            .iter()
            .map(|r| r.count as f64 * (r.realized - r.nominal_mean).abs())
            .sum::<f64>()
            / n as f64
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p.clamp(0.0, 1.0) * (1.0 - p.clamp(0.0, 1.0)) / n as f64).sqrt()
}

fn summarize(nominal: &[f64], outcomes: &[f64]) -> (f64, f64, usize, f64) {
    let n = outcomes.len();
    let nom = nominal.iter().sum::<f64>() / n as f64;
    let real = outcomes.iter().sum::<f64>() / n as f64;
    (nom, real, n, binomial_se(nom, n))
}

/// Realized vs nominal coverage within bins of the nominal level
/// (`[e_k, e_{k+1})`, last bin closed). Outcomes may be 0/1 indicators or
/// exact conditional coverage probabilities. Empty bins are omitted.
pub fn calibration_curve(nominal: &[f64], outcomes: &[f64], bin_edges: &[f64]) -> Result<CoverageReport> {
    if nominal.len() != outcomes.len() {
        return Err(Error::Validation(format!(
            "{} nominal levels but {} outcomes",
            nominal.len(),
            outcomes.len()
        )));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("bin edges must be strictly ascending".into()));
    }
    let last = bin_edges.len() - 1;
    let mut rows = Vec::new();
    for k in 0..last {
        let (lo, hi) = (bin_edges[k], bin_edges[k + 1]);
        let members: Vec<usize> = (0..nominal.len())
            .filter(|&i| {
                let v = nominal[i];
                v >= lo && (v < hi || (k + 1 == last && v == hi))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let nom: Vec<f64> = members.iter().map(|&i| nominal[i]).collect();
        let out: Vec<f64> = members.iter().map(|&i| outcomes[i]).collect();
        let (nominal_mean, realized, count, stderr) = summarize(&nom, &out);
        rows.push(ReportRow {
            bin_lo: lo,
            bin_hi: hi,
            group: None,
            nominal_mean,
            realized,
            count,
            stderr,
        });
    }
    Ok(CoverageReport { rows })
}

/// Per-group coverage. `labels[i]` indexes into `group_names`; groups with
/// no members are omitted. Without nominal levels the standard error uses
/// the realized rate.
pub fn coverage_by_group(
    outcomes: &[f64],
    labels: &[usize],
    group_names: &[String],
    nominal: Option<&[f64]>,
) -> Result<CoverageReport> {
    if labels.len() != outcomes.len() || nominal.is_some_and(|n| n.len() != outcomes.len()) {
        return Err(Error::Validation("coverage inputs differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= group_names.len()) {
        return Err(Error::Validation(format!("unknown group label {bad}")));
    }
    let mut rows = Vec::new();
    for (g, name) in group_names.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        let out: Vec<f64> = members.iter().map(|&i| outcomes[i]).collect();
        let realized = out.iter().sum::<f64>() / out.len() as f64;
        let nominal_mean = match nominal {
            Some(nv) => members.iter().map(|&i| nv[i]).sum::<f64>() / members.len() as f64,
            None => realized,
        };
        rows.push(ReportRow {
            bin_lo: g as f64,
            bin_hi: g as f64,
            group: Some(name.clone()),
            nominal_mean,
            realized,
            count: members.len(),
            stderr: binomial_se(nominal_mean, members.len()),
        });
    }
    Ok(CoverageReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionStats {
    /// `|retained| / k_i`, `None` for outputs without claims.
    pub fractions: Vec<Option<f64>>,
    /// Mean over outputs that have claims.
    pub mean: f64,
    /// Mean counting outputs without claims as retention 0.
    pub mean_with_empty_as_zero: f64,
    pub empty_outputs: usize,
}

pub fn retention_stats(claims: &[ScoredClaimSet], retained: &[Vec<usize>]) -> Result<RetentionStats> {
    if claims.len() != retained.len() {
        return Err(Error::Validation("one retained set per output is required".into()));
    }
    let fractions: Vec<Option<f64>> = claims
        .iter()
        .zip(retained)
        .map(|(c, r)| (!c.is_empty()).then(|| r.len() as f64 / c.len() as f64))
        .collect();
    let nonempty: Vec<f64> = fractions.iter().flatten().copied().collect();
    let empty_outputs = fractions.len() - nonempty.len();
    let sum: f64 = nonempty.iter().sum();
    Ok(RetentionStats {
        mean: if nonempty.is_empty() { 0.0 } else { sum / nonempty.len() as f64 },
        mean_with_empty_as_zero: if fractions.is_empty() { 0.0 } else { sum / fractions.len() as f64 },
        empty_outputs,
        fractions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedCoverage {
    pub realized: f64,
    pub nominal: f64,
    /// Standard error of `realized − nominal` from the weighted residuals.
    pub stderr: f64,
}

/// `(Σf·1{control}/Σf, Σf·(1−α)/Σf)`.
pub fn shift_weighted_coverage(outcomes: &[f64], nominal: &[f64], weights: &[f64]) -> Result<WeightedCoverage> {
    if outcomes.len() != nominal.len() || outcomes.len() != weights.len() {
        return Err(Error::Validation("weighted coverage inputs differ in length".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Validation("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation("weights are all zero".into()));
    }
    let realized = outcomes.iter().zip(weights).map(|(o, w)| o * w).sum::<f64>() / total;
    let nom = nominal.iter().zip(weights).map(|(o, w)| o * w).sum::<f64>() / total;
    let var: f64 = outcomes
        .iter()
        .zip(nominal)
        .zip(weights)
        .map(|((o, a), w)| (w * (o - a - (realized - nom))).powi(2))
        .sum();
    Ok(WeightedCoverage {
        realized,
        nominal: nom,
        stderr: var.sqrt() / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_covered() {
        let nominal = [0.52, 0.57, 0.61, 0.62, 0.84];
        let edges: Vec<f64> = (0..=7).map(|k| 0.5 + 0.05 * f64::from(k)).collect();
        let r = calibration_curve(&nominal, &[1.0; 5], &edges).unwrap();
        assert!(r.rows.iter().all(|row| row.realized == 1.0));
        assert_eq!(r.total_count(), 5);
        // [0.5,0.55), [0.55,0.6), [0.6,0.65), [0.8,0.85]
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[2].count, 2);
    }

    #[test]
    fn last_bin_is_closed() {
        let r = calibration_curve(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].count, 1);
    }

    #[test]
    fn single_group_is_marginal() {
        let out = [1.0, 0.0, 1.0, 1.0];
        let r = coverage_by_group(&out, &[0; 4], &["all".to_string()], None).unwrap();
        assert_eq!(r.rows[0].realized, 0.75);
        assert_eq!(r.rows[0].count, 4);
    }

    #[test]
    fn partition_counts_sum() {
        let out = [1.0, 0.0, 1.0, 1.0, 0.0];
        let names = vec!["a".to_string(), "b".to_string()];
        let r = coverage_by_group(&out, &[0, 1, 1, 0, 1], &names, Some(&[0.9; 5])).unwrap();
        assert_eq!(r.total_count(), 5);
        assert_eq!(r.rows[1].realized, 1.0 / 3.0);
        assert!(coverage_by_group(&out, &[0, 1, 2, 0, 1], &names, None).is_err());
    }

    #[test]
    fn retention() {
        let c = vec![
            ScoredClaimSet::new(vec![0.1, 0.2, 0.3], vec![1, 1, 1]).unwrap(),
            ScoredClaimSet::new(vec![0.5, 0.6], vec![1, 0]).unwrap(),
            ScoredClaimSet::default(),
        ];
        let r = retention_stats(&c, &[vec![0, 1, 2], vec![], vec![]]).unwrap();
        assert_eq!(r.fractions, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.mean_with_empty_as_zero, 1.0 / 3.0);
        assert_eq!(r.empty_outputs, 1);
    }

    #[test]
    fn weighted_coverage_reductions() {
        let out = [1.0, 0.0, 1.0, 1.0];
        let nom = [0.9; 4];
        let w = shift_weighted_coverage(&out, &nom, &[1.0; 4]).unwrap();
        assert_eq!(w.realized, 0.75);
        assert!((w.nominal - 0.9).abs() < 1e-15);
        let g = shift_weighted_coverage(&out, &nom, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.realized, 0.5);
        assert!(shift_weighted_coverage(&out, &nom, &[0.0; 4]).is_err());
        assert!(shift_weighted_coverage(&out, &nom, &[-1.0, 1.0, 1.0, 1.0]).is_err());
    }
}
