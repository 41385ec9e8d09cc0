//! CIM macro geometry and converter precisions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest ADC width accepted. Weight and DAC widths stay within 8 bits.
pub const MAX_ADC_BITS: u32 = 16;
pub const MAX_CELL_BITS: u32 = 8;

/// Geometry and precision of one multi-bit CIM macro.
///
/// The mux ratio (bitlines sharing one ADC) is derived from
/// `bitlines_per_macro / adc_count`. A serialized config may carry a
/// `mux_ratio` field; it is checked against the derived value and rejected
/// when inconsistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMacroConfig")]
pub struct MacroConfig {
    wordlines: usize,
    #[serde(rename = "bitlines")]
    bitlines_per_macro: usize,
    adc_count: usize,
    adc_bits: u32,
    dac_bits: u32,
    weight_bits: u32,
}

#[derive(Deserialize)]
struct RawMacroConfig {
    #[serde(default = "defaults::wordlines")]
    wordlines: usize,
    #[serde(default = "defaults::bitlines", alias = "bitlines_per_macro")]
    bitlines: usize,
    #[serde(default = "defaults::adc_count")]
    adc_count: usize,
    #[serde(default = "defaults::adc_bits")]
    adc_bits: u32,
    #[serde(default = "defaults::dac_bits")]
    dac_bits: u32,
    #[serde(default = "defaults::weight_bits")]
    weight_bits: u32,
    #[serde(default)]
    mux_ratio: Option<usize>,
}

mod defaults {
    pub fn wordlines() -> usize {
        256
    }
    pub fn bitlines() -> usize {
        256
    }
    pub fn adc_count() -> usize {
        64
    }
    pub fn adc_bits() -> u32 {
        5
    }
    pub fn dac_bits() -> u32 {
        4
    }
    pub fn weight_bits() -> u32 {
        4
    }
}

impl TryFrom<RawMacroConfig> for MacroConfig {
    type Error = Error;

    fn try_from(raw: RawMacroConfig) -> Result<Self> {
        let cfg = MacroConfig::new(
            raw.wordlines,
            raw.bitlines,
            raw.adc_count,
            raw.adc_bits,
            raw.dac_bits,
            raw.weight_bits,
        )?;
        if let Some(mux) = raw.mux_ratio {
            if mux != cfg.mux_ratio() {
                return Err(Error::InvalidMacro(format!(
                    "mux_ratio {mux} inconsistent with bitlines/adc_count = {}",
                    cfg.mux_ratio()
                )));
            }
        }
        Ok(cfg)
    }
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            wordlines: 256,
            bitlines_per_macro: 256,
            adc_count: 64,
            adc_bits: 5,
            dac_bits: 4,
            weight_bits: 4,
        }
    }
}

impl MacroConfig {
    pub fn new(
        wordlines: usize,
        bitlines_per_macro: usize,
        adc_count: usize,
        adc_bits: u32,
        dac_bits: u32,
        weight_bits: u32,
    ) -> Result<Self> {
        for (name, v) in [
            ("wordlines", wordlines),
            ("bitlines", bitlines_per_macro),
            ("adc_count", adc_count),
        ] {
            if v == 0 {
                return Err(Error::InvalidMacro(format!("{name} must be >= 1")));
            }
        }
        if bitlines_per_macro % adc_count != 0 {
            return Err(Error::InvalidMacro(format!(
                "adc_count {adc_count} must divide bitlines {bitlines_per_macro}"
            )));
        }
        if !(2..=MAX_ADC_BITS).contains(&adc_bits) {
            return Err(Error::InvalidMacro(format!(
                "adc_bits {adc_bits} outside [2, {MAX_ADC_BITS}]"
            )));
        }
        for (name, v) in [("dac_bits", dac_bits), ("weight_bits", weight_bits)] {
            if !(2..=MAX_CELL_BITS).contains(&v) {
                return Err(Error::InvalidMacro(format!(
                    "{name} {v} outside [2, {MAX_CELL_BITS}]"
                )));
            }
        }
        Ok(Self {
            wordlines,
            bitlines_per_macro,
            adc_count,
            adc_bits,
            dac_bits,
            weight_bits,
        })
    }

    pub fn wordlines(&self) -> usize {
        self.wordlines
    }

    pub fn bitlines_per_macro(&self) -> usize {
        self.bitlines_per_macro
    }

    pub fn adc_count(&self) -> usize {
        self.adc_count
    }

    pub fn adc_bits(&self) -> u32 {
        self.adc_bits
    }

    pub fn dac_bits(&self) -> u32 {
        self.dac_bits
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn mux_ratio(&self) -> usize {
        self.bitlines_per_macro / self.adc_count
    }

    pub fn with_adc_bits(self, adc_bits: u32) -> Result<Self> {
        Self::new(
            self.wordlines,
            self.bitlines_per_macro,
            self.adc_count,
            adc_bits,
            self.dac_bits,
            self.weight_bits,
        )
    }

    pub fn with_weight_bits(self, weight_bits: u32) -> Result<Self> {
        Self::new(
            self.wordlines,
            self.bitlines_per_macro,
            self.adc_count,
            self.adc_bits,
            self.dac_bits,
            weight_bits,
        )
    }

    pub fn with_wordlines(self, wordlines: usize) -> Result<Self> {
        Self::new(
            wordlines,
            self.bitlines_per_macro,
            self.adc_count,
            self.adc_bits,
            self.dac_bits,
            self.weight_bits,
        )
    }

    /// Largest unsigned DAC code.
    pub fn dac_max(&self) -> u32 {
        (1 << self.dac_bits) - 1
    }

    pub fn weight_bounds(&self) -> ClipBounds {
        ClipBounds::symmetric(self.weight_bits)
    }

    pub fn adc_bounds(&self) -> ClipBounds {
        ClipBounds::symmetric(self.adc_bits)
    }

    /// Unsigned activation range `[0, 2^dac_bits - 1]`.
    pub fn act_bounds(&self) -> ClipBounds {
        ClipBounds {
            q_n: 0,
            q_p: self.dac_max(),
        }
    }
}

/// Clip range `[-q_n, q_p]` of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub q_n: u32,
    pub q_p: u32,
}

impl ClipBounds {
    fn symmetric(bits: u32) -> Self {
        let q = (1u32 << (bits - 1)) - 1;
        Self { q_n: q, q_p: q }
    }

    pub fn lo(&self) -> f64 {
        -(self.q_n as f64)
    }

    pub fn hi(&self) -> f64 {
        self.q_p as f64
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo() && v <= self.hi()
    }
}

/// Symmetric signed bounds `q_n = q_p = 2^(bits-1) - 1`.
pub fn clip_bounds(bits: u32) -> Result<ClipBounds> {
    if !(2..=31).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    Ok(ClipBounds::symmetric(bits))
}

/// Number of input channels one bitline holds for a square kernel.
pub fn channels_per_bitline(macro_cfg: &MacroConfig, kernel_size: usize) -> Result<usize> {
    let needed = kernel_size * kernel_size;
    if kernel_size == 0 || needed > macro_cfg.wordlines {
        return Err(Error::KernelExceedsDepth {
            kernel: kernel_size,
            needed,
            wordlines: macro_cfg.wordlines,
        });
    }
    Ok(macro_cfg.wordlines / needed)
}
