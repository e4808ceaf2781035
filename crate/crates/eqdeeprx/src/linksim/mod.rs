//! Link-level slot generation: payload bits, QAM symbols, DMRS pilots,
//! frequency/time-selective MIMO channel, one interfering transmission and
//! noise. Everything is deterministic given (config, seed).

pub mod channel;
pub mod dump;
pub mod pattern;
pub mod qam;
pub mod slot;

pub use channel::{generate_channel, ChannelRealization};
pub use pattern::PilotPattern;
pub use qam::Constellation;
pub use slot::{generate_slot, synthesize_received, ResourceGrid, Slot, TxSlot};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Interference-to-noise ratio specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InrSpec {
    /// No interfering transmission.
    None,
    /// Fixed INR in dB.
    FixedDb(f64),
    /// INR in dB drawn from a normal distribution per slot
    /// (log-normal in linear power).
    LogNormalDb { mean_db: f64, std_db: f64 },
}

/// Per-slot simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub n_rx: usize,
    pub n_layers: usize,
    /// Bits per symbol (2 = QPSK, 4 = 16-QAM, 6 = 64-QAM, 8 = 256-QAM).
    pub modulation_order: usize,
    pub n_dmrs_symbols: usize,
    pub snr_db: f64,
    pub inr: InrSpec,
    /// Normalized maximum Doppler per OFDM symbol.
    pub doppler_norm: f64,
    /// RMS delay spread in subcarrier-spacing units.
    pub delay_spread_norm: f64,
    pub seed: u64,
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > 4 {
            return Err(Error::InvalidArg(format!(
                "n_layers must be 1..=4 (pilot orthogonality), got {}",
                self.n_layers
            )));
        }
        if self.n_layers > self.n_rx {
            return Err(Error::InvalidArg(format!(
                "n_layers ({}) must not exceed n_rx ({})",
                self.n_layers, self.n_rx
            )));
        }
        if self.n_subcarriers == 0 || self.n_subcarriers % 12 != 0 {
            return Err(Error::InvalidArg(format!(
                "n_subcarriers must be a positive multiple of 12, got {}",
                self.n_subcarriers
            )));
        }
        if !matches!(self.modulation_order, 2 | 4 | 6 | 8) {
            return Err(Error::InvalidArg(format!(
                "modulation_order must be one of 2/4/6/8, got {}",
                self.modulation_order
            )));
        }
        if !matches!(self.n_dmrs_symbols, 1 | 2) {
            return Err(Error::InvalidArg(format!(
                "n_dmrs_symbols must be 1 or 2, got {}",
                self.n_dmrs_symbols
            )));
        }
        let max_dmrs = pattern::dmrs_symbol_indices(self.n_dmrs_symbols)
            .last()
            .copied()
            .unwrap_or(0);
        if self.n_symbols <= max_dmrs {
            return Err(Error::InvalidArg(format!(
                "n_symbols ({}) too small for the DMRS positions",
                self.n_symbols
            )));
        }
        if self.doppler_norm < 0.0 || self.delay_spread_norm < 0.0 {
            return Err(Error::InvalidArg(
                "doppler_norm and delay_spread_norm must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Linear noise variance per RX antenna (unit signal power per layer).
    pub fn noise_var(&self) -> f64 {
        if self.snr_db.is_infinite() && self.snr_db > 0.0 {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            n_subcarriers: 48,
            n_symbols: 14,
            n_rx: 4,
            n_layers: 2,
            modulation_order: 4,
            n_dmrs_symbols: 1,
            snr_db: 10.0,
            inr: InrSpec::LogNormalDb {
                mean_db: 10.0,
                std_db: 5.0,
            },
            doppler_norm: 0.005,
            delay_spread_norm: 0.01,
            seed: 0,
        }
    }
}

/// SplitMix64 step, used to derive independent sub-stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for stream `tag` of a base seed.
pub fn sub_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Circularly symmetric complex Gaussian sample with total variance `var`.
pub fn complex_gaussian(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    if var <= 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt() * (var / 2.0).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    Complex64::new(r * th.cos(), r * th.sin())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = SlotConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_layers = 5;
        assert!(cfg.validate().is_err());
        cfg.n_layers = 2;
        cfg.n_subcarriers = 40;
        assert!(cfg.validate().is_err());
        cfg.n_subcarriers = 48;
        cfg.modulation_order = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noise_var_from_snr() {
        let mut cfg = SlotConfig::default();
        cfg.snr_db = 10.0;
        assert!((cfg.noise_var() - 0.1).abs() < 1e-15);
        cfg.snr_db = f64::INFINITY;
        assert_eq!(cfg.noise_var(), 0.0);
    }
}
