//! Counter-based seed derivation so each pipeline stage can be re-run on
//! its own and still see the same random stream.

use serde::{Deserialize, Serialize};

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthetic,
    Pretrain,
    Regenerate,
    /// Shared by every target-model variant so they start from the same
    /// initialisation.
    Target,
    Personalizer,
}

impl Stage {
    fn counter(self) -> u64 {
        match self {
            Stage::Synthetic => 1,
            Stage::Pretrain => 2,
            Stage::Regenerate => 3,
            Stage::Target => 4,
            Stage::Personalizer => 5,
        }
    }
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    mix64(mix64(master) ^ stage.counter())
}
