//! Weight-only post-training quantization with channel-wise mixed precision.
//!
//! Each input channel (row) of a `d_in x d_out` weight matrix gets its own
//! 2-, 3- or 4-bit K-means codebook, chosen from accumulated activation
//! norms so the average width meets a (possibly fractional) budget in
//! `[2, 4]`. The most salient channels and the worst-quantized individual
//! weights are kept in half precision in a CSR side matrix.
//!
//! ```no_run
//! use cmpq_core::{quantize_layer, BitBudget, QuantizeConfig, ActivationNorms, Matrix};
//!
//! # fn main() -> cmpq_core::Result<()> {
//! let w = Matrix::zeros(64, 128);
//! let a = ActivationNorms::new(vec![1.0; 64])?;
//! let layer = quantize_layer("fc1", &w, &a, &QuantizeConfig::new(BitBudget::new(2.5)?))?;
//! println!("{} effective bits", layer.stats.effective_bits);
//! # Ok(())
//! # }
//! ```

pub mod allocation;
pub mod bench;
pub mod calibration;
pub mod error;
pub mod inference;
pub mod matrix;
pub mod metrics;
pub mod outlier_guard;
pub mod pack;
pub mod pipeline;
pub mod quantizer;
pub mod tensor_store;

pub use allocation::{allocate, nominal_avg_bits, BitBudget, ChannelPrecision, PrecisionMap, Thresholds};
pub use calibration::{accumulate_norms, ActivationNorms, NormAccumulator};
pub use error::{Error, Result};
pub use inference::{dequantize_layer, forward, forward_vec, forward_with, Accumulation, ForwardOptions};
pub use matrix::{Matrix, WeightMatrix};
pub use metrics::{output_error, recon_error, ReconError};
pub use outlier_guard::SparseMatrixCSR;
pub use pipeline::{
    effective_bits, quantize_layer, quantize_model, AllocationPolicy, QuantizeConfig, QuantizedLayer,
};
pub use quantizer::{Clusterer, DeltaVariant, KMeansOptions};
pub use tensor_store::{
    load_tensors, read_container, save_tensors, write_container, CmpqContainer, ContainerMetadata,
    DType, NamedTensorSet, TensorEntry,
};
