//! Arithmetic coding, the tensor drivers and the bitstream container.

pub mod cdf;
pub mod container;
pub mod driver;
pub mod flat;
pub mod range_coder;

pub use cdf::{CdfTable, PROB_BITS, PROB_TOTAL};
pub use container::Bitstream;
pub use driver::{coding_sequence, decode_tensor, encode_tensor, symbol_checksum, table_bits, EncodedTensor};
pub use flat::{decode_flat, encode_flat, FlatBackend, FlatDecoder, STATUS_OK};
pub use range_coder::{ac_decode, ac_encode, BatchDecoder, CoderBackend, RangeDecoder, RangeEncoder, ReferenceCoder};
