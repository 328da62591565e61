//! Balanced pair and triplet generation with the periodic regeneration
//! schedule used during retrieval training.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::numerics::RngState;

/// One dataset item as the samplers see it: an id, its class, and an index
/// into the caller's feature storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledItem {
    pub item_id: String,
    pub class_id: u32,
    /// Index of this item's feature map in the owning dataset.
    pub feature: usize,
}

/// A labeled batch of item-index pairs. Per class, positives and negatives
/// are exactly balanced; ordering is globally shuffled so consecutive
/// virtual batches mix classes.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// (index of first item, index of second item, label); indices refer
    /// to the `items` slice the batch was generated from.
    pub pairs: Vec<(usize, usize, PairLabel)>,
    /// Epoch the batch was generated for; stamped by the trainer.
    pub epoch: u64,
    /// Seed of the stream that produced the batch.
    pub seed: u64,
}

fn group_by_class(items: &[LabeledItem]) -> Result<BTreeMap<u32, Vec<usize>>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(item.class_id).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    for (&class, members) in &by_class {
        if members.len() < 2 {
            return Err(Error::SingletonClass { class });
        }
    }
    Ok(by_class)
}

/// Uniform draw of a distinct unordered index pair from `members`.
fn distinct_pair(members: &[usize], rng: &mut RngState) -> (usize, usize) {
    let a = rng.index(members.len());
    let mut b = rng.index(members.len() - 1);
    if b >= a {
        b += 1;
    }
    (members[a], members[b])
}

/// Generate `per_class` positive and `per_class` negative pairs for every
/// class. Positives are uniform over distinct same-class pairs (with
/// replacement across draws, so small classes still fill their quota);
/// a negative pair takes its first member from the class and its second
/// uniformly from all other-class items, and counts toward the first
/// member's class only.
pub fn generate_pairs(
    items: &[LabeledItem],
    per_class: usize,
    rng: &mut RngState,
) -> Result<PairBatch> {
    let by_class = group_by_class(items)?;
    let seed = rng.seed();
    let mut pairs = Vec::with_capacity(2 * per_class * by_class.len());

    for (&class, members) in &by_class {
        let others: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.class_id != class)
            .map(|(i, _)| i)
            .collect();
        for _ in 0..per_class {
            let (a, b) = distinct_pair(members, rng);
            pairs.push((a, b, PairLabel::Similar));
        }
        for _ in 0..per_class {
            let a = members[rng.index(members.len())];
            let b = others[rng.index(others.len())];
            pairs.push((a, b, PairLabel::Dissimilar));
        }
    }

    rng.shuffle(&mut pairs);
    Ok(PairBatch { pairs, epoch: 0, seed })
}

/// True when training pairs should be regenerated at `epoch` (every
/// `period` epochs, starting at epoch 0). `period` must be >= 1.
pub fn regeneration_due(epoch: u64, period: u64) -> bool {
    debug_assert!(period >= 1);
    epoch % period == 0
}

/// Generate `per_class` (anchor, positive, negative) index triplets per
/// class: anchor and positive share the class, the negative does not.
pub fn generate_triplets(
    items: &[LabeledItem],
    per_class: usize,
    rng: &mut RngState,
) -> Result<Vec<(usize, usize, usize)>> {
    let by_class = group_by_class(items)?;
    let mut triplets = Vec::with_capacity(per_class * by_class.len());
    for (&class, members) in &by_class {
        let others: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.class_id != class)
            .map(|(i, _)| i)
            .collect();
        for _ in 0..per_class {
            let (anchor, positive) = distinct_pair(members, rng);
            let negative = others[rng.index(others.len())];
            triplets.push((anchor, positive, negative));
        }
    }
    rng.shuffle(&mut triplets);
    Ok(triplets)
}
