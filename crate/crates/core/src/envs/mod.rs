//! Benchmark environments and decoder-class factories.

mod comblock;
mod decoders;
mod random;

pub use comblock::{hadamard, make_comblock, observation_dim, CombLock, CombLockSpec, LinearDecoder, NoiseMode};
pub use decoders::{make_decoder_class, DecoderClass};
pub use random::{make_random_bmdp, PlantReport, RandomBmdpSpec};
