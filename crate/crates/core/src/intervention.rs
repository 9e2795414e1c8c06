//! Building ablation masks from rankings and composing them.
//!
//! Masks are value objects; evaluation never edits weights in place, so
//! concurrent evaluations with different masks can share one weight set.

use std::path::Path;

use crate::attribution::NeuronRanking;
use crate::error::{Error, Result};
use crate::model::AblationMask;

/// Mask of the first `k` entries of a ranking.
pub fn mask_from_ranking(ranking: &NeuronRanking, k: usize) -> Result<AblationMask> {
    if k > ranking.len() {
        return Err(Error::InvalidArgument(format!(
            "top-{k} requested but the ranking has {} entries",
            ranking.len()
        )));
    }
    Ok(AblationMask::from_pairs(
        ranking.entries()[..k].iter().map(|s| (s.layer, s.index)),
    ))
}

/// Set union of any number of masks; duplicates collapse.
pub fn union(masks: &[AblationMask]) -> AblationMask {
    masks
        .iter()
        .fold(AblationMask::empty(), |acc, m| acc.union(m))
}

pub fn write_mask(path: &Path, mask: &AblationMask) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<AblationMask> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
