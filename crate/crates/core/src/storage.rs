//! Byte accounting for what the learner retains between tasks.

use serde::{Deserialize, Serialize};

use crate::data::AugFamily;
use crate::error::{Error, Result};

/// Megabytes as `10⁶` bytes.
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Covariance storage mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovMode {
    #[default]
    Full,
    Svd { k: usize },
}

impl CovMode {
    pub fn scalars(self, d: usize) -> Result<usize> {
        match self {
            CovMode::Full => Ok(d * d),
            CovMode::Svd { k } if k >= 1 && k <= d => Ok(2 * k * d + k * k),
            CovMode::Svd { k } => Err(Error::config(format!("svd rank {k} outside 1..={d}"))),
        }
    }

    pub fn label(self) -> String {
        match self {
            CovMode::Full => "full".into(),
            CovMode::Svd { k } => format!("svd-{k}"),
        }
    }
}

/// What is being accounted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageInputs {
    pub old_classes: usize,
    pub feature_dim: usize,
    pub cov_mode: CovMode,
    pub precision: Precision,
    /// Candidates per old class; 0 when replay is off.
    pub candidates_per_class: usize,
    pub family: AugFamily,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageRow {
    pub item: String,
    pub bytes: usize,
}

impl StorageRow {
    pub fn megabytes(&self) -> f64 {
        self.bytes as f64 / BYTES_PER_MB
    }
}

/// One row per retained item. Candidate rows follow the binary candidate
/// format: an 8-byte class header plus a `u32` per index, then one encoded
/// policy per candidate.
pub fn storage_report(inputs: &StorageInputs) -> Result<Vec<StorageRow>> {
    let c = inputs.old_classes;
    let d = inputs.feature_dim;
    let elem = inputs.precision.bytes();
    let k = inputs.candidates_per_class;
    let cov_item = format!("covariances ({})", inputs.cov_mode.label());
    let has_candidates = c > 0 && k > 0;
    Ok(vec![
        StorageRow {
            item: "prototypes".into(),
            bytes: c * d * elem,
        },
        StorageRow {
            item: cov_item,
            bytes: c * inputs.cov_mode.scalars(d)? * elem,
        },
        StorageRow {
            item: "candidate indices".into(),
            bytes: if has_candidates { c * (8 + 4 * k) } else { 0 },
        },
        StorageRow {
            item: "augmentation params".into(),
            bytes: if has_candidates { c * k * inputs.family.bytes_per_policy() } else { 0 },
        },
    ])
}

pub fn total_bytes(rows: &[StorageRow]) -> usize {
    rows.iter().map(|r| r.bytes).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::CandidateSet;

    fn inputs(classes: usize, mode: CovMode, precision: Precision) -> StorageInputs {
        StorageInputs {
            old_classes: classes,
            feature_dim: 512,
            cov_mode: mode,
            precision,
            candidates_per_class: 200,
            family: AugFamily::default(),
        }
    }

    #[test]
    fn covariance_rows_at_reference_scale() {
        let full64 = storage_report(&inputs(90, CovMode::Full, Precision::F64)).unwrap();
        assert_eq!(full64[1].bytes, 90 * 512 * 512 * 8);
        assert!((full64[1].megabytes() - 188.74).abs() < 0.01);
        let svd32 = storage_report(&inputs(90, CovMode::Svd { k: 8 }, Precision::F32)).unwrap();
        assert_eq!(svd32[1].bytes, 2_972_160);
        assert_eq!(format!("{:.2}", svd32[1].megabytes()), "2.97");
        assert_eq!(svd32[0].bytes, 90 * 512 * 4);
    }

    #[test]
    fn zero_old_classes_is_all_zero() {
        let rows = storage_report(&inputs(0, CovMode::Full, Precision::F64)).unwrap();
        assert!(rows.iter().all(|r| r.bytes == 0));
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn candidate_rows_match_encoded_size() {
        let i = inputs(7, CovMode::Full, Precision::F64);
        let rows = storage_report(&i).unwrap();
        assert_eq!(rows[2].bytes + rows[3].bytes, CandidateSet::accounted_len(7, 200, &i.family));
    }

    #[test]
    fn bad_rank_is_rejected() {
        assert!(storage_report(&inputs(3, CovMode::Svd { k: 513 }, Precision::F32)).is_err());
    }
}
