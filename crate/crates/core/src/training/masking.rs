use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MASK, N_SPECIAL};
use crate::rng::{domain, shuffle, stream};
use crate::tensor::IGNORE_INDEX;

pub const MASK_RATE: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    MaskToken,
    RandomToken,
    Keep,
}

/// Positions chosen for the two reconstruction objectives of one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    /// Sorted, with one replacement per position.
    pub mlm_positions: Vec<(usize, Replacement)>,
    /// Sorted.
    pub lop_positions: Vec<usize>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.mlm_positions.is_empty() && self.lop_positions.is_empty()
    }
}

/// Number of positions masked among `n_real` eligible tokens.
pub fn mask_count(n_real: usize) -> usize {
    libm::round(MASK_RATE * n_real as f64) as usize
}

fn choose<R: Rng>(eligible: &[usize], rng: &mut R) -> Vec<usize> {
    let mut pool = eligible.to_vec();
    shuffle(&mut pool, rng);
    pool.truncate(mask_count(eligible.len()));
    pool.sort_unstable();
    pool
}

/// Draws `round(0.3·n_real)` MLM positions and, independently, as many LOP
/// positions among tokens where `special` is false. Each MLM position is
/// replaced by `[MASK]` (80%), a random token (10%) or kept (10%).
/// Deterministic in `(seed, index)`.
pub fn make_masking_plan(special: &[bool], seed: u64, index: u64) -> MaskingPlan {
    let eligible: Vec<usize> = (0..special.len()).filter(|&i| !special[i]).collect();
    let mut rng = stream(seed, domain::MASK_PLAN, index);
    let mlm = choose(&eligible, &mut rng);
    let lop = choose(&eligible, &mut rng);
    let mlm_positions = mlm
        .into_iter()
        .map(|p| {
            let u: f64 = rng.gen();
            let r = if u < 0.8 {
                Replacement::MaskToken
            } else if u < 0.9 {
                Replacement::RandomToken
            } else {
                Replacement::Keep
            };
            (p, r)
        })
        .collect();
    MaskingPlan {
        mlm_positions,
        lop_positions: lop,
    }
}

/// Returns corrupted ids and MLM targets (original ids at plan positions,
/// `IGNORE_INDEX` elsewhere). Random replacements are uniform over the
/// non-special ids; with no such ids the token is kept.
pub fn apply_mlm_corruption(
    token_ids: &[usize],
    plan: &MaskingPlan,
    vocab_size: usize,
    seed: u64,
    index: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut ids = token_ids.to_vec();
    let mut targets = alloc::vec![IGNORE_INDEX; token_ids.len()];
    let mut rng = stream(seed, domain::MLM_CORRUPT, index);
    for &(p, r) in &plan.mlm_positions {
        targets[p] = token_ids[p];
        match r {
            Replacement::MaskToken => ids[p] = MASK,
            Replacement::RandomToken if vocab_size > N_SPECIAL => ids[p] = rng.gen_range(N_SPECIAL..vocab_size),
            _ => {}
        }
    }
    (ids, targets)
}

/// Replaces the 1D position lookup at LOP positions by `masked_pos`;
/// targets are the true indices there.
pub fn apply_lop_masking(positions: &[usize], plan: &MaskingPlan, masked_pos: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids = positions.to_vec();
    let mut targets = alloc::vec![IGNORE_INDEX; positions.len()];
    for &p in &plan.lop_positions {
        targets[p] = positions[p];
        ids[p] = masked_pos;
    }
    (ids, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ten_tokens_give_three_each() {
        let plan = make_masking_plan(&[false; 10], 1, 0);
        assert_eq!(plan.mlm_positions.len(), 3);
        assert_eq!(plan.lop_positions.len(), 3);
        assert_eq!(plan, make_masking_plan(&[false; 10], 1, 0));
    }

    #[test]
    fn specials_are_never_chosen() {
        assert!(make_masking_plan(&[true; 6], 1, 0).is_empty());
        let special = [true, false, false, false, false, false, false, true];
        for seed in 0..50 {
            let plan = make_masking_plan(&special, seed, 0);
            assert_eq!(plan.mlm_positions.len(), 2);
            assert!(plan.mlm_positions.iter().all(|(p, _)| !special[*p]));
            assert!(plan.lop_positions.iter().all(|p| !special[*p]));
        }
    }

    #[test]
    fn corruption_examples() {
        let ids = [2, 10, 11, 12, 3];
        let (out, t) = apply_mlm_corruption(&ids, &MaskingPlan::default(), 20, 0, 0);
        assert_eq!(out, ids);
        assert!(t.iter().all(|&x| x == IGNORE_INDEX));

        let plan = MaskingPlan {
            mlm_positions: vec![(2, Replacement::MaskToken)],
            lop_positions: vec![],
        };
        let (out, t) = apply_mlm_corruption(&ids, &plan, 20, 0, 0);
        assert_eq!(out.iter().filter(|&&x| x == MASK).count(), 1);
        assert_eq!(t[2], 11);
    }

    #[test]
    fn lop_examples() {
        let pos = [0, 1, 2, 3];
        let (ids, t) = apply_lop_masking(&pos, &MaskingPlan::default(), 9);
        assert_eq!(ids, pos);
        assert!(t.iter().all(|&x| x == IGNORE_INDEX));
        let all = MaskingPlan {
            mlm_positions: vec![],
            lop_positions: vec![0, 1, 2, 3],
        };
        let (ids, t) = apply_lop_masking(&pos, &all, 9);
        assert_eq!(ids, [9; 4]);
        assert_eq!(t, pos);
    }
}
