//! Gray-coded square QAM constellations with unit average symbol energy.
//!
//! Even-position bits select the in-phase level, odd-position bits the
//! quadrature level; each axis uses the recursive Gray PAM labelling
//! (the standard NR mapping for QPSK/16/64/256-QAM).

use num_complex::Complex64;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Constellation {
    bits: usize,
    points: Vec<Complex64>,
}

/// Un-normalized Gray PAM level: bits map to {±1, ±3, ...}.
fn pam_level(bits: &[u8]) -> f64 {
    let sign = 1.0 - 2.0 * bits[0] as f64;
    if bits.len() == 1 {
        sign
    } else {
        let half = (1usize << (bits.len() - 1)) as f64;
        sign * (half - pam_level(&bits[1..]))
    }
}

impl Constellation {
    pub fn new(bits_per_symbol: usize) -> Result<Self> {
        if !matches!(bits_per_symbol, 2 | 4 | 6 | 8) {
            return Err(Error::InvalidArg(format!(
                "unsupported modulation order: {bits_per_symbol} bits/symbol"
            )));
        }
        let b = bits_per_symbol;
        let m = 1usize << b;
        let mut raw = Vec::with_capacity(m);
        let mut power = 0.0;
        for word in 0..m {
            let bits: Vec<u8> = (0..b).map(|l| ((word >> (b - 1 - l)) & 1) as u8).collect();
            let i_bits: Vec<u8> = bits.iter().step_by(2).copied().collect();
            let q_bits: Vec<u8> = bits.iter().skip(1).step_by(2).copied().collect();
            let p = Complex64::new(pam_level(&i_bits), pam_level(&q_bits));
            power += p.norm_sqr();
            raw.push(p);
        }
        let norm = (power / m as f64).sqrt();
        let points = raw.into_iter().map(|p| p / norm).collect();
        Ok(Constellation { bits: b, points })
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Maps a bit vector (MSB = bit 0) to its constellation point.
    pub fn map(&self, bits: &[u8]) -> Result<Complex64> {
        if bits.len() != self.bits {
            return Err(Error::InvalidArg(format!(
                "expected {} bits, got {}",
                self.bits,
                bits.len()
            )));
        }
        let mut word = 0usize;
        for (l, &b) in bits.iter().enumerate() {
            debug_assert!(b <= 1);
            word |= (b as usize) << (self.bits - 1 - l);
        }
        Ok(self.points[word])
    }

    #[inline]
    pub fn point(&self, word: usize) -> Complex64 {
        self.points[word]
    }

    /// Bit `l` of constellation index `word`.
    #[inline]
    pub fn bit_of(&self, word: usize, l: usize) -> u8 {
        ((word >> (self.bits - 1 - l)) & 1) as u8
    }
}
