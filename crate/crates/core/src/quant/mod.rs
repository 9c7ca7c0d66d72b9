//! Uniform min-max quantization, channel balancing and budgeted bit allocation.

mod allocate;
mod balance;
mod engine;
mod params;
mod sensitivity;

pub use allocate::{allocate_weight_bits, bit_penalty, WeightBitPlan, WEIGHT_BIT_LEVELS};
pub use balance::{balance_channels, channel_scales, BalanceTransform, HadamardRotation};
pub use engine::{
    ActivationRecorder, ActivationStats, LinearPrecision, QuantEngine, QuantHooks, QuantOptions,
};
pub use params::{
    compute_minmax_params, compute_minmax_params_with_zero, dequantize, fake_quantize, quantize,
    Granularity, QuantParams, QuantizedTensor, SCALE_MANTISSA_BITS,
};
pub use sensitivity::{measure_sensitivities, measure_sensitivity, CalibrationSample};
