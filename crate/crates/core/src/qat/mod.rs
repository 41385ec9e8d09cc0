//! Quantization-aware training for the CIM datapath.

mod export;
mod psum;
mod quant;
pub mod stages;

pub use psum::{adc_code, psum_codes, to_integers, PsumCodes, PsumParams};
pub use quant::{grad_scale, quantize_value, quantize_weights, round_half_away, weight_quant_backward};
pub use export::{
    export_integer_model, load_integer_model, read_integer_model, save_integer_model, write_integer_model, IntConv,
    IntLayer, IntOp, IntegerModel, INTEGER_MODEL_VERSION,
};
pub use stages::{
    attach_act_quant, attach_weight_quant, calibrate_adc_step, clipping_rate, layer_codes, phase1_train,
    phase2_train, quantized,
};
