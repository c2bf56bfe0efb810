//! Masked-language-model target selection.
//!
//! Each maskable position is selected independently with probability
//! `p_mask`, capped at `max_predictions` by random down-sampling. Selected
//! positions are 80% replaced by the mask id, 10% by a random non-special
//! vocabulary id, and 10% left unchanged.

use crate::rng::RngStream;
use crate::tokenizer::special;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmSettings {
    pub p_mask: f64,
    pub max_predictions: usize,
}

impl Default for MlmSettings {
    fn default() -> Self {
        Self {
            p_mask: 0.15,
            max_predictions: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmMasking {
    /// Input sequence with replacements applied.
    pub masked_ids: Vec<u32>,
    /// Positions carrying a prediction target, ascending.
    pub target_positions: Vec<usize>,
    /// Original ids at the target positions.
    pub target_ids: Vec<u32>,
    /// Number of positions selected before the cap was applied.
    pub pre_cap_selected: usize,
}

/// Apply MLM masking to one sequence. `vocab_size` bounds the random
/// replacement draw (special ids are never drawn). Fails when the sequence
/// has no maskable (non-special) token.
pub fn mask_for_mlm(
    ids: &[u32],
    settings: MlmSettings,
    vocab_size: u32,
    rng: &mut RngStream,
) -> Result<MlmMasking, TrainError> {
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id >= special::COUNT as u32)
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(TrainError::NoMaskableToken);
    }

    let mut selected: Vec<usize> = maskable
        .into_iter()
        .filter(|_| rng.bernoulli(settings.p_mask))
        .collect();
    let pre_cap_selected = selected.len();
    if selected.len() > settings.max_predictions {
        let keep = rng.sample_indices(selected.len(), settings.max_predictions);
        let mut kept: Vec<usize> = keep.into_iter().map(|k| selected[k]).collect();
        kept.sort_unstable();
        selected = kept;
    }

    let mut masked_ids = ids.to_vec();
    let mut target_ids = Vec::with_capacity(selected.len());
    for &pos in &selected {
        target_ids.push(ids[pos]);
        let roll = rng.next_f64();
        if roll < 0.8 {
            masked_ids[pos] = special::MASK;
        } else if roll < 0.9 {
            let non_special = vocab_size - special::COUNT as u32;
            masked_ids[pos] = special::COUNT as u32 + rng.below(non_special as usize) as u32;
        }
        // Remaining 10%: keep the original token.
    }

    Ok(MlmMasking {
        masked_ids,
        target_positions: selected,
        target_ids,
        pre_cap_selected,
    })
}
