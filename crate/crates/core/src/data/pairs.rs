//! Per-epoch (target, reference) pairing within identities.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IdentityRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// One random ordered pair per identity per epoch.
    #[default]
    Single,
    /// Every ordered pair of distinct images of every identity.
    Cartesian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairIndex {
    pub identity: usize,
    pub target: usize,
    pub reference: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEpoch {
    pub pairs: Vec<PairIndex>,
    /// Identities without two distinct images.
    pub skipped: Vec<String>,
}

/// Builds one epoch of pairs in a seeded, shuffled order. A target is never
/// paired with itself.
pub fn make_pair_epoch(records: &[IdentityRecord], seed: u64, mode: PairMode) -> PairEpoch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let n = record.images.len();
        if n < 2 {
            warn!("identity {} has {n} image(s); skipped for pairing", record.identity_id);
            skipped.push(record.identity_id.clone());
            continue;
        }
        match mode {
            PairMode::Single => {
                let target = rng.gen_range(0..n);
                let mut reference = rng.gen_range(0..n - 1);
                if reference >= target {
                    reference += 1;
                }
                pairs.push(PairIndex {
                    identity: i,
                    target,
                    reference,
                });
            }
            PairMode::Cartesian => {
                for target in 0..n {
                    for reference in (0..n).filter(|&r| r != target) {
                        pairs.push(PairIndex {
                            identity: i,
                            target,
                            reference,
                        });
                    }
                }
            }
        }
    }
    pairs.shuffle(&mut rng);
    PairEpoch { pairs, skipped }
}
