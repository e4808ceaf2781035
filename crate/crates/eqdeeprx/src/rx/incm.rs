//! Interference-plus-noise covariance estimation per coherence band with
//! oracle-approximating shrinkage toward a scaled identity.

use std::ops::Range;

use num_complex::Complex64;

use super::estimate::{ChannelEstimate, EstimateStage};
use crate::linksim::{PilotPattern, ResourceGrid};
use crate::tensor::ComplexMatrix;
use crate::{Error, Result};

/// Interference coherence bandwidth: two PRBs.
pub const INCM_BAND_SUBCARRIERS: usize = 24;

/// Covariance floor used when a degenerate (zero-trace) estimate must still
/// feed an equalizer inverse.
pub const INCM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct IncmEstimate {
    pub band_index: usize,
    pub subcarriers: Range<usize>,
    pub sample_cov: ComplexMatrix,
    pub rho: f64,
    pub shrunk: ComplexMatrix,
    pub pilot_count: usize,
}

impl IncmEstimate {
    /// Shrunk covariance with a tiny identity floor so downstream solves
    /// stay defined even for noiseless slots (where the estimate is 0).
    pub fn regularized(&self) -> ComplexMatrix {
        let n = self.shrunk.rows();
        let mut r = self.shrunk.clone();
        if r.trace_re() / n as f64 able_floor() {
            r.add_scaled_identity(INCM_FLOOR);
        }
        r
    }

    /// Builds a synthetic estimate from a known covariance (tests, genie).
    pub fn from_known(r: ComplexMatrix, band_index: usize, subcarriers: Range<usize>) -> Self {
        IncmEstimate {
            band_index,
            subcarriers,
            sample_cov: r.clone(),
            rho: 0.0,
            shrunk: r,
            pilot_count: 0,
        }
    }
}

/// Band partition: 24-subcarrier intervals, the last absorbing any remainder.
pub fn incm_bands(nf: usize) -> Vec<Range<usize>> {
    let n_bands = (nf / INCM_BAND_SUBCARRIERS).max(1);
    (0..n_bands)
        .map(|b| {
            let start = b * INCM_BAND_SUBCARRIERS;
            let end = if b + 1 == n_bands {
                nf
            } else {
                (b + 1) * INCM_BAND_SUBCARRIERS
            };
            start..end
        })
        .collect()
}

/// Band index of a subcarrier under `incm_bands`.
pub fn band_of_subcarrier(nf: usize, i: usize) -> usize {
    let n_bands = (nf / INCM_BAND_SUBCARRIERS).max(1);
    (i / INCM_BAND_SUBCARRIERS).min(n_bands - 1)
}

/// Complex oracle-approximating shrinkage toward (tr(S)/N) I.
///
/// Returns (rho, shrunk). The coefficient is clamped to [0, 1]; a zero-trace
/// sample covariance degenerates to rho = 1 with a zero matrix.
pub fn oas_shrink(s: &ComplexMatrix, p_count: usize) -> (f64, ComplexMatrix) {
    let n = s.rows() as f64;
    let tr = s.trace_re();
    if tr <= 0.0 {
        return (1.0, ComplexMatrix::zeros(s.rows(), s.cols()));
    }
    let tr2 = s.frobenius_sq(); // tr(S^2) for Hermitian S
    let num = (1.0 - 1.0 / n) * tr2 + tr * tr;
    let den = (p_count as f64 + 1.0 - 1.0 / n) * (tr2 - tr * tr / n);
    let rho = if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    };
    let target = tr / n;
    let mut shrunk = s.scaled(Complex64::new(1.0 - rho, 0.0));
    shrunk.add_scaled_identity(rho * target);
    (rho, shrunk)
}

/// Sample covariance of the pilot residuals in one band, then shrinkage.
/// Residuals pool the pilots of all layers and DMRS symbols in the band.
pub fn estimate_incm(
    grid: &ResourceGrid,
    h_full: &ChannelEstimate,
    pattern: &PilotPattern,
    band: Range<usize>,
    band_index: usize,
) -> Result<IncmEstimate> {
    if h_full.stage != EstimateStage::FullGrid {
        return Err(Error::InvalidArg(
            "estimate_incm needs a full-grid channel estimate".into(),
        ));
    }
    let nr = grid.n_rx;
    let mut s = ComplexMatrix::zeros(nr, nr);
    let mut count = 0usize;
    let mut d = vec![Complex64::new(0.0, 0.0); nr];
    for (i, j, layer) in pattern.pilot_res() {
        if !band.contains(&i) {
            continue;
        }
        let (_, p, si) = pattern.pilot_at(i, j).expect("pilot_res is consistent");
        let x = pattern.value(layer, p, si);
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = grid.y.at3(i, j, r) - h_full.h.at4(i, j, r, layer) * x;
        }
        for a in 0..nr {
            for b in 0..nr {
                s[(a, b)] += d[a] * d[b].conj();
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArg(format!(
            "band {band:?} contains no pilot REs"
        )));
    }
    let inv = 1.0 / count as f64;
    let s = s.scaled(Complex64::new(inv, 0.0));
    let (rho, shrunk) = oas_shrink(&s, count);
    Ok(IncmEstimate {
        band_index,
        subcarriers: band,
        sample_cov: s,
        rho,
        shrunk,
        pilot_count: count,
    })
}

/// All per-band estimates for a grid.
pub fn estimate_incm_all(
    grid: &ResourceGrid,
    h_full: &ChannelEstimate,
    pattern: &PilotPattern,
) -> Result<Vec<IncmEstimate>> {
    incm_bands(grid.nf)
        .into_iter()
        .enumerate()
        .map(|(b, range)| estimate_incm(grid, h_full, pattern, range, b))
        .collect()
}
