use rand::seq::SliceRandom;

use super::{EpochPair, StayId};
use crate::encoders::{MeasurementWindow, TokenSequence};
use crate::seed::Rng;

/// Entry `i` of `windows` and `notes` come from the same stay.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub windows: Vec<MeasurementWindow>,
    pub notes: Vec<TokenSequence>,
    pub stay_ids: Vec<StayId>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.stay_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stay_ids.is_empty()
    }
}

/// Shuffles the epoch's pairs and cuts them into batches of `batch_size`.
/// A trailing batch of one pair has no negatives, so it is merged into the
/// previous batch. `make` turns a pair into its (window, note) inputs.
pub fn build_pair_batches<F>(pairs: &[EpochPair], batch_size: usize, rng: &mut Rng, mut make: F) -> Vec<PairBatch>
where
    F: FnMut(&EpochPair) -> (MeasurementWindow, TokenSequence),
{
    let mut order: Vec<&EpochPair> = pairs.iter().collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<&EpochPair>> = order.chunks(batch_size.max(2)).map(<[_]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().map_or(false, |c| c.len() == 1) {
        let last = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(last);
    }
    chunks
        .into_iter()
        .map(|chunk| {
            let mut b = PairBatch { windows: vec![], notes: vec![], stay_ids: vec![] };
            for p in chunk {
                let (w, n) = make(p);
                b.windows.push(w);
                b.notes.push(n);
                b.stay_ids.push(p.stay_id);
            }
            b
        })
        .collect()
}
