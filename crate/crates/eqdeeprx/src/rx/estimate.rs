//! Least-squares raw channel estimation at pilot positions, optional static
//! frequency smoothing, and interpolation to the full resource grid.

use num_complex::Complex64;

use crate::linksim::{PilotPattern, ResourceGrid};
use crate::tensor::tape::InterpTable;
use crate::tensor::CTensor;
use crate::{Error, Result};

/// Stage of a channel estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStage {
    /// Per-layer pilot grids, shape (F_P, S_P, N_R, N_T).
    RawPilot,
    /// Same layout after learned denoising.
    DenoisedPilot,
    /// Interpolated to (N_F, N_S, N_R, N_T).
    FullGrid,
}

#[derive(Debug, Clone)]
pub struct ChannelEstimate {
    pub stage: EstimateStage,
    pub h: CTensor,
}

/// Interpolation / smoothing mode for the conventional chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingMode {
    /// Static frequency FIR followed by linear interpolation.
    BaselineStatic,
    /// Linear interpolation only (a denoiser runs upstream instead).
    Passthrough,
}

/// Rank-one least-squares estimates at pilot REs, reorganized into
/// per-layer pilot grids.
pub fn raw_ls_estimate(grid: &ResourceGrid, pattern: &PilotPattern) -> Result<ChannelEstimate> {
    let fp = pattern.fp_count();
    let sp = pattern.sp_count();
    let nt = pattern.n_layers();
    let nr = grid.n_rx;
    if fp == 0 || sp == 0 {
        return Err(Error::InvalidArg("empty pilot set".into()));
    }
    if pattern.nf() != grid.nf {
        return Err(Error::Shape(format!(
            "pattern covers {} subcarriers, grid has {}",
            pattern.nf(),
            grid.nf
        )));
    }
    let mut h = CTensor::zeros(&[fp, sp, nr, nt]);
    for t in 0..nt {
        for (si, &j) in pattern.dmrs_symbols().iter().enumerate() {
            for p in 0..fp {
                let i = pattern.pilot_subcarrier(t, p);
                let x = pattern.value(t, p, si);
                let scale = x.conj() / x.norm_sqr();
                for r in 0..nr {
                    h.set4(p, si, r, t, grid.y.at3(i, j, r) * scale);
                }
            }
        }
    }
    Ok(ChannelEstimate {
        stage: EstimateStage::RawPilot,
        h,
    })
}

/// Length-7 raised-cosine window, center tap 1, used as the static
/// frequency-domain smoother. Edge positions renormalize over the taps that
/// fall inside the grid, so DC gain is exactly 1 everywhere.
pub fn smoothing_window() -> [f64; 7] {
    let mut w = [0.0; 7];
    for (m, wm) in w.iter_mut().enumerate() {
        let d = m as f64 - 3.0;
        *wm = 0.5 * (1.0 + (std::f64::consts::PI * d / 4.0).cos());
    }
    w
}

fn smooth_rows(grid: &mut [Complex64], fp: usize, sp: usize) {
    let w = smoothing_window();
    let mut tmp = vec![Complex64::new(0.0, 0.0); fp];
    for si in 0..sp {
        for p in 0..fp {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut wsum = 0.0;
            for (m, &wm) in w.iter().enumerate() {
                let q = p as isize + m as isize - 3;
                if q < 0 || q >= fp as isize {
                    continue;
                }
                acc += grid[q as usize * sp + si] * wm;
                wsum += wm;
            }
            tmp[p] = acc / wsum;
        }
        for p in 0..fp {
            grid[p * sp + si] = tmp[p];
        }
    }
}

/// Frequency interpolation table: linear between the pilot subcarriers of a
/// layer, constant hold beyond the first/last pilot.
pub fn freq_interp_table(nf: usize, pilot_subcarriers: &[usize]) -> InterpTable {
    let fp = pilot_subcarriers.len();
    let mut taps = Vec::with_capacity(nf);
    for f in 0..nf {
        if f <= pilot_subcarriers[0] {
            taps.push((0, 1.0, 0, 0.0));
        } else if f >= pilot_subcarriers[fp - 1] {
            taps.push((fp - 1, 1.0, fp - 1, 0.0));
        } else {
            let k = pilot_subcarriers.iter().rposition(|&p| p <= f).unwrap();
            let (p0, p1) = (pilot_subcarriers[k], pilot_subcarriers[k + 1]);
            let w = (f - p0) as f64 / (p1 - p0) as f64;
            taps.push((k, 1.0 - w, k + 1, w));
        }
    }
    InterpTable { out_len: nf, taps }
}

/// Time interpolation table: replication for one DMRS symbol, per-RE linear
/// interpolation/extrapolation between two.
pub fn time_interp_table(ns: usize, dmrs_symbols: &[usize]) -> InterpTable {
    let mut taps = Vec::with_capacity(ns);
    if dmrs_symbols.len() == 1 {
        for _ in 0..ns {
            taps.push((0, 1.0, 0, 0.0));
        }
    } else {
        let (j0, j1) = (dmrs_symbols[0] as f64, dmrs_symbols[1] as f64);
        for s in 0..ns {
            let w = (s as f64 - j0) / (j1 - j0);
            taps.push((0, 1.0 - w, 1, w));
        }
    }
    InterpTable { out_len: ns, taps }
}

/// Expands per-layer pilot grids to the full resource grid.
///
/// `BaselineStatic` first smooths each pilot row with the static FIR;
/// `Passthrough` interpolates directly (used when a denoiser ran upstream).
pub fn interpolate_and_smooth(
    raw: &ChannelEstimate,
    pattern: &PilotPattern,
    nf: usize,
    ns: usize,
    mode: SmoothingMode,
) -> Result<ChannelEstimate> {
    if raw.stage == EstimateStage::FullGrid {
        return Err(Error::InvalidArg(
            "interpolate_and_smooth expects a pilot-stage estimate".into(),
        ));
    }
    let shape = raw.h.shape().to_vec();
    let (fp, sp, nr, nt) = (shape[0], shape[1], shape[2], shape[3]);
    let time_table = time_interp_table(ns, pattern.dmrs_symbols());
    let mut out = CTensor::zeros(&[nf, ns, nr, nt]);
    let mut grid = vec![Complex64::new(0.0, 0.0); fp * sp];
    let mut freq_full = vec![Complex64::new(0.0, 0.0); nf * sp];
    for t in 0..nt {
        let pilots: Vec<usize> = (0..fp).map(|p| pattern.pilot_subcarrier(t, p)).collect();
        let freq_table = freq_interp_table(nf, &pilots);
        for r in 0..nr {
            for p in 0..fp {
                for si in 0..sp {
                    grid[p * sp + si] = raw.h.at4(p, si, r, t);
                }
            }
            if mode == SmoothingMode::BaselineStatic {
                smooth_rows(&mut grid, fp, sp);
            }
            for (f, &(i0, w0, i1, w1)) in freq_table.taps.iter().enumerate() {
                for si in 0..sp {
                    freq_full[f * sp + si] = grid[i0 * sp + si] * w0 + grid[i1 * sp + si] * w1;
                }
            }
            for f in 0..nf {
                for (s, &(s0, w0, s1, w1)) in time_table.taps.iter().enumerate() {
                    let v = freq_full[f * sp + s0] * w0 + freq_full[f * sp + s1] * w1;
                    out.set4(f, s, r, t, v);
                }
            }
        }
    }
    Ok(ChannelEstimate {
        stage: EstimateStage::FullGrid,
        h: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{generate_slot, InrSpec, SlotConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_slot_cfg() -> SlotConfig {
        SlotConfig {
            n_subcarriers: 24,
            n_rx: 2,
            n_layers: 2,
            snr_db: f64::INFINITY,
            inr: InrSpec::None,
            delay_spread_norm: 0.0,
            doppler_norm: 0.0,
            ..SlotConfig::default()
        }
    }

    #[test]
    fn noiseless_flat_channel_recovered_exactly() {
        let slot = generate_slot(&flat_slot_cfg()).unwrap();
        let raw = raw_ls_estimate(&slot.grid, &slot.tx.pattern).unwrap();
        let fp = slot.tx.pattern.fp_count();
        for t in 0..2 {
            for p in 0..fp {
                for r in 0..2 {
                    let want = slot.channel.h.at4(0, 0, r, t);
                    let got = raw.h.at4(p, 0, r, t);
                    assert!((want - got).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pilot_amplitude_cancels_in_ls_estimate() {
        // Scaling the pilot and the received sample together leaves the
        // estimate unchanged (the ||x||^2 normalization cancels a).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Complex64::new(rng.gen::<f64>(), rng.gen::<f64>());
        let x = Complex64::new(0.6, -0.8);
        let a = 3.7;
        let est1 = y * x.conj() / x.norm_sqr();
        let est2 = (y * a) * (x * a).conj() / (x * a).norm_sqr();
        assert!((est1 - est2).norm() < 1e-12);
    }

    #[test]
    fn ls_noise_variance_matches_sigma_over_pilot_energy() {
        // Noise-only grid: per-entry estimate variance is sigma^2 / |x|^2
        // (unit-modulus pilots), Monte-Carlo within 5%.
        let cfg = SlotConfig {
            n_subcarriers: 48,
            n_rx: 2,
            n_layers: 1,
            snr_db: 3.0,
            inr: InrSpec::None,
            ..SlotConfig::default()
        };
        let sigma2 = cfg.noise_var();
        let mut acc = 0.0;
        let mut count = 0usize;
        for seed in 0..400u64 {
            let slot = generate_slot(&SlotConfig { seed, ..cfg.clone() }).unwrap();
            // Subtract the true contribution to keep noise only.
            let raw = raw_ls_estimate(&slot.grid, &slot.tx.pattern).unwrap();
            let pat = &slot.tx.pattern;
            for p in 0..pat.fp_count() {
                let i = pat.pilot_subcarrier(0, p);
                let j = pat.dmrs_symbols()[0];
                for r in 0..cfg.n_rx {
                    let noise_part = raw.h.at4(p, 0, r, 0) - slot.channel.h.at4(i, j, r, 0);
                    acc += noise_part.norm_sqr();
                    count += 1;
                }
            }
        }
        let var = acc / count as f64;
        assert!(
            (var - sigma2).abs() / sigma2 < 0.05,
            "estimate variance {var} vs sigma^2 {sigma2}"
        );
    }

    #[test]
    fn constant_grid_interpolates_to_constant() {
        let pattern = PilotPattern::build(1, 2, 24, 14).unwrap();
        let c = Complex64::new(0.3, -0.9);
        let mut h = CTensor::zeros(&[6, 2, 1, 1]);
        for p in 0..6 {
            for si in 0..2 {
                h.set4(p, si, 0, 0, c);
            }
        }
        let raw = ChannelEstimate {
            stage: EstimateStage::RawPilot,
            h,
        };
        for mode in [SmoothingMode::BaselineStatic, SmoothingMode::Passthrough] {
            let full = interpolate_and_smooth(&raw, &pattern, 24, 14, mode).unwrap();
            for f in 0..24 {
                for s in 0..14 {
                    assert!(
                        (full.h.at4(f, s, 0, 0) - c).norm() < 1e-12,
                        "mode {mode:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn frequency_linear_values_reproduced_at_interior_subcarriers() {
        // Linear ramp across pilots interpolates exactly between the first
        // and last pilot subcarrier (passthrough mode; the FIR would bend
        // the ramp at pilot-grid edges).
        let pattern = PilotPattern::build(1, 1, 24, 14).unwrap();
        let mut h = CTensor::zeros(&[6, 1, 1, 1]);
        for p in 0..6 {
            let sub = pattern.pilot_subcarrier(0, p) as f64;
            h.set4(p, 0, 0, 0, Complex64::new(2.0 * sub + 1.0, -sub));
        }
        let raw = ChannelEstimate {
            stage: EstimateStage::RawPilot,
            h,
        };
        let full =
            interpolate_and_smooth(&raw, &pattern, 24, 14, SmoothingMode::Passthrough).unwrap();
        let first = pattern.pilot_subcarrier(0, 0);
        let last = pattern.pilot_subcarrier(0, 5);
        for f in first..=last {
            let got = full.h.at4(f, 3, 0, 0);
            let want = Complex64::new(2.0 * f as f64 + 1.0, -(f as f64));
            assert!((got - want).norm() < 1e-12, "subcarrier {f}");
        }
    }

    #[test]
    fn two_dmrs_time_interpolation_matches_closed_form() {
        // Values c1 at symbol 2 and c2 at symbol 11: symbol 5 gets
        // c1 + (3/9)(c2 - c1).
        let pattern = PilotPattern::build(1, 2, 12, 14).unwrap();
        let c1 = Complex64::new(1.0, 1.0);
        let c2 = Complex64::new(-2.0, 0.5);
        let mut h = CTensor::zeros(&[3, 2, 1, 1]);
        for p in 0..3 {
            h.set4(p, 0, 0, 0, c1);
            h.set4(p, 1, 0, 0, c2);
        }
        let raw = ChannelEstimate {
            stage: EstimateStage::RawPilot,
            h,
        };
        let full =
            interpolate_and_smooth(&raw, &pattern, 12, 14, SmoothingMode::Passthrough).unwrap();
        let want = c1 + (c2 - c1) * (3.0 / 9.0);
        assert!((full.h.at4(5, 5, 0, 0) - want).norm() < 1e-12);
    }

    #[test]
    fn smoothing_window_has_unit_dc_gain() {
        let w = smoothing_window();
        assert!((w[3] - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v >= 0.0));
    }
}
