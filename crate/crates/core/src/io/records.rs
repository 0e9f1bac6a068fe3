use crate::boost::EnsembleClaims;
use crate::conformal::ScoredClaimSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One claim with confidence scores from several methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimEntry {
    pub scores: BTreeMap<String, f64>,
    pub annotation: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One prompt/output pair with its annotated claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRecordLine {
    pub id: String,
    pub group: String,
    pub features: BTreeMap<String, f64>,
    pub claims: Vec<ClaimEntry>,
}

impl ClaimRecordLine {
    /// Claim scores of one method.
    pub fn scored(&self, method: &str) -> Result<ScoredClaimSet> {
        let scores = self
            .claims
            .iter()
            .map(|c| {
                c.scores.get(method).copied().ok_or_else(|| {
                    Error::Validation(format!("record {} has no score '{method}'", self.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScoredClaimSet::new(scores, self.claims.iter().map(|c| c.annotation).collect())
    }

    /// Base scores for an ensemble over `methods`, in that order.
    pub fn ensemble(&self, methods: &[String]) -> Result<EnsembleClaims> {
        let base_scores = self
            .claims
            .iter()
            .map(|c| {
                methods
                    .iter()
                    .map(|m| {
                        c.scores.get(m).copied().ok_or_else(|| {
                            Error::Validation(format!("record {} has no score '{m}'", self.id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleClaims {
            base_scores,
            annotations: self.claims.iter().map(|c| c.annotation).collect(),
        })
    }
}

/// Records in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClaimDataset {
    pub records: Vec<ClaimRecordLine>,
}

impl ClaimDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.records
            .first()
            .map(|r| r.features.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Score methods present on every claim, sorted by name.
    pub fn shared_methods(&self) -> Vec<String> {
        let mut claims = self.records.iter().flat_map(|r| &r.claims);
        let Some(first) = claims.next() else { return Vec::new() };
        let mut shared: Vec<String> = first.scores.keys().cloned().collect();
        for c in claims {
            shared.retain(|m| c.scores.contains_key(m));
        }
        shared
    }

    /// Distinct group labels, sorted.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.records.iter().map(|r| r.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

fn check_record(r: &ClaimRecordLine, names: Option<&Vec<String>>, line: usize) -> Result<()> {
    if let Some(names) = names {
        if !r.features.keys().eq(names.iter()) {
            return Err(Error::Schema {
                line,
                msg: format!("feature names {:?} differ from {names:?}", r.features.keys().collect::<Vec<_>>()),
            });
        }
    }
    for (k, v) in &r.features {
        if !v.is_finite() {
            return Err(Error::Schema { line, msg: format!("feature '{k}' is not finite") });
        }
    }
    for (j, c) in r.claims.iter().enumerate() {
        if c.annotation > 1 {
            return Err(Error::Schema { line, msg: format!("claim {j} annotation must be 0 or 1") });
        }
        if c.scores.is_empty() {
            return Err(Error::Schema { line, msg: format!("claim {j} has no scores") });
        }
        if let Some((m, _)) = c.scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Schema { line, msg: format!("claim {j} score '{m}' is not finite") });
        }
    }
    Ok(())
}

/// Read newline-delimited claim records. Blank lines are skipped; every
/// error names its 1-based line.
pub fn load_claims(path: impl AsRef<Path>) -> Result<ClaimDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut names: Option<Vec<String>> = None;
    let mut last_line = 0;
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        last_line = line_no;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let rec: ClaimRecordLine = serde_json::from_value(value)
            .map_err(|e| Error::Schema { line: line_no, msg: e.to_string() })?;
        check_record(&rec, names.as_ref(), line_no)?;
        names.get_or_insert_with(|| rec.features.keys().cloned().collect());
        records.push(rec);
    }
    let ds = ClaimDataset { records };
    if ds.is_empty() {
        tracing::warn!(path = %path.display(), "claim file has no records");
    } else if ds.records.iter().any(|r| !r.claims.is_empty()) && ds.shared_methods().is_empty() {
        return Err(Error::Schema { line: last_line, msg: "no score method is shared by all claims".into() });
    }
    Ok(ds)
}

/// Serialize records, one JSON object per line.
pub fn claims_to_jsonl(ds: &ClaimDataset) -> Result<String> {
    let mut out = String::new();
    for r in &ds.records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_claims(path: impl AsRef<Path>, ds: &ClaimDataset) -> Result<()> {
    super::write_atomic(path, claims_to_jsonl(ds)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, feats: &[(&str, f64)], ann: &[u8]) -> ClaimRecordLine {
        ClaimRecordLine {
            id: id.into(),
            group: "g".into(),
            features: feats.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            claims: ann
                .iter()
                .enumerate()
                .map(|(j, &a)| ClaimEntry {
                    scores: [("m".to_string(), j as f64 / 10.0)].into_iter().collect(),
                    annotation: a,
                    text: (j == 0).then(|| "first".to_string()),
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let ds = ClaimDataset {
            records: vec![record("a", &[("len", 1.5)], &[1, 0]), record("b", &[("len", 0.25)], &[])],
        };
        write_claims(&p, &ds).unwrap();
        assert_eq!(load_claims(&p).unwrap(), ds);
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_claims(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_annotation_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record("a", &[], &[1])).unwrap();
        let bad = r#"{"id":"b","group":"g","features":{},"claims":[{"scores":{"m":0.1}}]}"#;
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match load_claims(&p).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        std::fs::write(&p, "\n{not json\n").unwrap();
        assert!(matches!(load_claims(&p).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn inconsistent_features() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        let ds = ClaimDataset {
            records: vec![record("a", &[("len", 1.0)], &[1]), record("b", &[("views", 1.0)], &[1])],
        };
        write_claims(&p, &ds).unwrap();
        assert!(matches!(load_claims(&p).unwrap_err(), Error::Schema { line: 2, .. }));
    }

    #[test]
    fn bad_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let mut r = record("a", &[], &[1]);
        r.claims[0].annotation = 2;
        write_claims(&p, &ClaimDataset { records: vec![r] }).unwrap();
        assert!(matches!(load_claims(&p).unwrap_err(), Error::Schema { line: 1, .. }));
    }

    #[test]
    fn accessors() {
        let r = record("a", &[], &[1, 0, 1]);
        assert_eq!(r.scored("m").unwrap().scores, vec![0.0, 0.1, 0.2]);
        assert!(r.scored("other").is_err());
        let e = r.ensemble(&["m".to_string()]).unwrap();
        assert_eq!(e.base_scores[2], vec![0.2]);
        let ds = ClaimDataset { records: vec![r] };
        assert_eq!(ds.shared_methods(), vec!["m".to_string()]);
    }
}
