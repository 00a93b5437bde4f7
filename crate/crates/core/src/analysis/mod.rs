//! Representation-analysis instruments: linear CKA, averaged attention
//! distance, gate statistics, and activation dumps.

mod cka;
mod distance;
mod dump;
mod gates;

pub use cka::{cka_layer_matrix, linear_cka, pool_examples, write_grid};
pub use distance::{avg_attention_distance, image_positions, text_positions, Position};
pub use dump::{dump_activations, ActivationDump, ExampleDump, Stream};
pub use gates::{gate_statistics, GateAccumulator, GateSummary, HISTOGRAM_BINS};
