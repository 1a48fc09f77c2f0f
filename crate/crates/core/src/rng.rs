//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! counter-based generator whose output is fixed by its 256-bit key and
//! 64-bit stream id on every platform. The key is expanded from the user's
//! `u64` seed by `SeedableRng::seed_from_u64` (PCG32 expansion); the stream
//! id separates independent consumers so adding draws to one never shifts
//! another:
//!
//! | consumer | stream id |
//! |---|---|
//! | identity template `i` | `IDENTITY + i` |
//! | impressions of identity `i` | `IMPRESSION + i` |
//! | parameter initialization | `PARAM_INIT` |
//! | batch assembly, epoch `e` | `BATCHES + e` |
//! | augmentation, epoch `e` | `AUGMENT + e` |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const IDENTITY: u64 = 0x1000_0000;
pub const IMPRESSION: u64 = 0x2000_0000;
pub const PARAM_INIT: u64 = 0x3000_0000;
pub const BATCHES: u64 = 0x4000_0000;
pub const AUGMENT: u64 = 0x5000_0000;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
