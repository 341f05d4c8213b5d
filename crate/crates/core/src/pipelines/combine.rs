use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{DetectionReport, PipelineError};
use crate::stats::fisher_combine_ln;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub p_value: f64,
    pub log10_p: f64,
    /// `(p, log10 p)` of each input, in input order.
    pub sources: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Fisher combination of independent tests over disjoint corpora. Inputs
/// sharing documents or using different keys produce a warning.
pub fn combine_distributions(reports: &[DetectionReport]) -> Result<CombinedReport, PipelineError> {
    if reports.is_empty() {
        return Err(PipelineError::InvalidInput("nothing to combine".into()));
    }
    let mut warnings = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    for (i, r) in reports.iter().enumerate() {
        let fps: HashSet<u64> = r.doc_fingerprints.iter().copied().collect();
        if fps.iter().any(|f| seen.contains(f)) {
            warnings.push(format!(
                "input {i} shares documents with an earlier input; Fisher's method assumes independence"
            ));
        }
        seen.extend(fps);
    }
    if reports.iter().any(|r| r.key_fingerprint != reports[0].key_fingerprint) {
        warnings.push("inputs were scored with different keys".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let ln_ps: Vec<f64> = reports.iter().map(DetectionReport::ln_p).collect();
    let ln_p = fisher_combine_ln(&ln_ps)?;
    Ok(CombinedReport {
        p_value: ln_p.exp(),
        log10_p: ln_p / std::f64::consts::LN_10,
        sources: reports.iter().map(|r| (r.p_value, r.log10_p)).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dedup::{AccessMode, DedupStats};
    use crate::pipelines::Supervision;
    use crate::schemes::Scheme;

    fn report(p: f64, docs: &[u64]) -> DetectionReport {
        DetectionReport {
            scheme: Scheme::Kgw,
            mode: AccessMode::Open,
            supervision: Supervision::Unsupervised,
            key_fingerprint: "abc".into(),
            k: 2,
            null_gamma: Some(0.25),
            n_documents: docs.len(),
            n_scored: 10,
            score: 3.0,
            p_value: p,
            log10_p: p.log10(),
            inconclusive: false,
            dedup_enabled: true,
            per_chunk: Vec::new(),
            filter_stats: None,
            dedup_stats: DedupStats::default(),
            budget_dropped: 0,
            warnings: Vec::new(),
            doc_fingerprints: docs.to_vec(),
        }
    }

    #[test]
    fn single_report_is_unchanged() {
        let c = combine_distributions(&[report(0.3, &[1])]).unwrap();
        assert!((c.p_value - 0.3).abs() < 1e-12);
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn two_tenths() {
        let c = combine_distributions(&[report(0.1, &[1]), report(0.1, &[2])]).unwrap();
        assert!((c.p_value - 0.0560517).abs() < 1e-6);
    }

    #[test]
    fn overlap_warns() {
        let c = combine_distributions(&[report(0.1, &[1, 2]), report(0.1, &[2, 3])]).unwrap();
        assert_eq!(c.warnings.len(), 1);
        assert!(combine_distributions(&[]).is_err());
    }
}
