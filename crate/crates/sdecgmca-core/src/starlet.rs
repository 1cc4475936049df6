//! Isotropic undecimated wavelets on the sphere, built as harmonic-domain
//! filters.
//!
//! The scaling functions are stretched cubic B-spline profiles,
//!
//! ```text
//!   Φ̂_0(l) ≡ 1,    Φ̂_j(l) = φ̂(2ʲ l / (l_max+1)),    φ̂(t) = B₃(2t) / B₃(0),
//! ```
//!
//! and the detail bands are their successive differences
//! `ĥ_j = Φ̂_{j−1} − Φ̂_j`, with `Φ̂_J` kept as the coarse band. The sum of
//! all bands telescopes back to `Φ̂_0 ≡ 1`, so reconstruction is a plain
//! addition and every band lives at full resolution. Smoothness of the
//! spline keeps ringing in the synthesized band maps low; the dictionary
//! is treated as a near-tight frame downstream, which is not asserted
//! here, only the additive reconstruction is.

use crate::error::{Error, Result};
use crate::sphere::{convolve, synthesize, HarmonicCoeffs, Map, SphereGrid};

/// Bank of detail filters `ĥ_1..ĥ_J` (finest first) and the coarse
/// low-pass `Φ̂_J`, each tabulated over `l = 0..=l_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct StarletFilters {
    l_max: usize,
    details: Vec<Vec<f64>>,
    coarse: Vec<f64>,
}

impl StarletFilters {
    /// Builds the filter bank with `n_scales` detail scales. Fails when
    /// `n_scales` is zero or so large that the coarsest profile would be
    /// stretched past the band limit (`2^n_scales > l_max`).
    pub fn new(l_max: usize, n_scales: usize) -> Result<Self> {
        if n_scales == 0 {
            return Err(Error::invalid("need at least one detail scale"));
        }
        if n_scales >= usize::BITS as usize || (1usize << n_scales) > l_max {
            return Err(Error::invalid(format!(
                "{n_scales} detail scales do not fit below band limit {l_max}"
            )));
        }
        let profile = |j: usize| -> Vec<f64> {
            let stretch = (1usize << j) as f64 / (l_max + 1) as f64;
            (0..=l_max)
                .map(|l| scaling_profile(l as f64 * stretch))
                .collect()
        };
        let mut previous: Vec<f64> = vec![1.0; l_max + 1];
        let mut details = Vec::with_capacity(n_scales);
        for j in 1..=n_scales {
            let current = profile(j);
            details.push(
                previous
                    .iter()
                    .zip(&current)
                    .map(|(a, b)| a - b)
                    .collect(),
            );
            previous = current;
        }
        Ok(Self {
            l_max,
            details,
            coarse: previous,
        })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn n_scales(&self) -> usize {
        self.details.len()
    }

    /// Detail filter `ĥ_{j+1}` (index 0 is the finest band).
    pub fn detail(&self, j: usize) -> &[f64] {
        &self.details[j]
    }

    pub fn coarse(&self) -> &[f64] {
        &self.coarse
    }
}

/// `φ̂(t) = B₃(2t)/B₃(0)` with `B₃` the centered cubic B-spline;
/// equals 1 at `t = 0`. Outside `|t| < 1` the value is pinned to an exact
/// zero instead of the cancellation residue the spline formula leaves.
fn scaling_profile(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        cubic_b_spline(2.0 * t) / cubic_b_spline(0.0)
    }
}

fn cubic_b_spline(t: f64) -> f64 {
    let cube = |u: f64| u.abs().powi(3);
    (cube(t - 2.0) - 4.0 * cube(t - 1.0) + 6.0 * cube(t) - 4.0 * cube(t + 1.0)
        + cube(t + 2.0))
        / 12.0
}

/// One signal split into per-scale bands: `details[0]` is the finest.
/// Reconstruction is the plain sum of all bands, coarse included.
#[derive(Debug, Clone)]
pub struct StarletDecomposition<B> {
    pub details: Vec<B>,
    pub coarse: B,
}

/// Splits coefficients into harmonic-domain bands.
pub fn forward(
    coeffs: &HarmonicCoeffs,
    filters: &StarletFilters,
) -> Result<StarletDecomposition<HarmonicCoeffs>> {
    check_band_limit(coeffs, filters)?;
    let details = (0..filters.n_scales())
        .map(|j| convolve(coeffs, filters.detail(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StarletDecomposition {
        details,
        coarse: convolve(coeffs, filters.coarse())?,
    })
}

/// Splits coefficients into bands and synthesizes each one to a map, the
/// form the thresholding machinery works on.
pub fn forward_direct(
    coeffs: &HarmonicCoeffs,
    filters: &StarletFilters,
    grid: &SphereGrid,
) -> Result<StarletDecomposition<Map>> {
    let harmonic = forward(coeffs, filters)?;
    let details = harmonic
        .details
        .iter()
        .map(|band| synthesize(band, grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(StarletDecomposition {
        details,
        coarse: synthesize(&harmonic.coarse, grid)?,
    })
}

/// Sums the bands back together.
pub fn inverse(decomp: &StarletDecomposition<HarmonicCoeffs>) -> Result<HarmonicCoeffs> {
    let mut out = decomp.coarse.clone();
    for band in &decomp.details {
        if band.l_max() != out.l_max() {
            return Err(Error::invalid(format!(
                "band limits {} and {} cannot be summed",
                band.l_max(),
                out.l_max()
            )));
        }
        out.add_assign(band);
    }
    Ok(out)
}

/// Sums pixel-domain bands back together.
pub fn inverse_direct(decomp: &StarletDecomposition<Map>) -> Result<Map> {
    let mut out = decomp.coarse.clone();
    for band in &decomp.details {
        if band.values.len() != out.values.len() {
            return Err(Error::invalid(format!(
                "band sizes {} and {} cannot be summed",
                band.values.len(),
                out.values.len()
            )));
        }
        for (o, v) in out.values.iter_mut().zip(&band.values) {
            *o += v;
        }
    }
    Ok(out)
}

fn check_band_limit(coeffs: &HarmonicCoeffs, filters: &StarletFilters) -> Result<()> {
    if coeffs.l_max() != filters.l_max() {
        return Err(Error::invalid(format!(
            "coefficients band-limited at {} do not match filters at {}",
            coeffs.l_max(),
            filters.l_max()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(l_max: usize, rng: &mut impl Rng) -> HarmonicCoeffs {
        let mut c = HarmonicCoeffs::zero(l_max);
        for l in 0..=l_max {
            c.set(l, 0, Complex64::new(rng.random::<f64>() - 0.5, 0.0));
            for m in 1..=l {
                c.set(
                    l,
                    m,
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
                );
            }
        }
        c
    }

    #[test]
    fn filters_partition_unity() {
        for (l_max, n_scales) in [(47, 3), (63, 1), (63, 5), (10, 2)] {
            let filters = StarletFilters::new(l_max, n_scales).unwrap();
            for l in 0..=l_max {
                let mut sum = filters.coarse()[l];
                for j in 0..n_scales {
                    sum += filters.detail(j)[l];
                }
                assert!(
                    (sum - 1.0).abs() < 1e-12,
                    "partition off at l={l} ({l_max},{n_scales})"
                );
            }
        }
    }

    #[test]
    fn filters_stay_in_range_and_nest() {
        let filters = StarletFilters::new(47, 3).unwrap();
        for j in 0..3 {
            // the detail bands are differences of nested low-passes, so
            // they stay within [0, 1] too
            for &v in filters.detail(j) {
                assert!((0.0..=1.0).contains(&v));
            }
            assert_eq!(filters.detail(j)[0], 0.0, "monopole leaked into band {j}");
        }
        for &v in filters.coarse() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(filters.coarse()[0], 1.0);
        // the coarsest low-pass dies once 2^J l / (l_max+1) reaches 1
        for l in 7..=47 {
            assert_eq!(filters.coarse()[l], 0.0, "coarse support extends to l={l}");
        }
        assert!(filters.coarse()[5] > 0.0);
        // the finest band owns the top of the spectrum outright
        assert_relative_eq!(filters.detail(0)[47], 1.0);
    }

    #[test]
    fn rejects_degenerate_banks() {
        assert!(StarletFilters::new(47, 0).is_err());
        assert!(StarletFilters::new(7, 3).is_err());
        assert!(StarletFilters::new(8, 3).is_ok());
    }

    #[test]
    fn round_trip_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let filters = StarletFilters::new(47, 3).unwrap();
        let input = random_coeffs(47, &mut rng);
        let decomp = forward(&input, &filters).unwrap();
        let back = inverse(&decomp).unwrap();
        let err = back.sub(&input).unwrap().norm_sq().sqrt() / input.norm_sq().sqrt();
        assert!(err < 1e-10, "round-trip error {err}");
    }

    #[test]
    fn direct_bands_sum_to_synthesized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let grid = SphereGrid::new(16).unwrap();
        let filters = StarletFilters::new(grid.l_max(), 3).unwrap();
        let input = random_coeffs(grid.l_max(), &mut rng);
        let decomp = forward_direct(&input, &filters, &grid).unwrap();
        assert_eq!(decomp.details.len(), 3);
        let summed = inverse_direct(&decomp).unwrap();
        let reference = synthesize(&input, &grid).unwrap();
        for (s, r) in summed.values.iter().zip(&reference.values) {
            assert_relative_eq!(s, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn monopole_goes_entirely_to_coarse() {
        let filters = StarletFilters::new(15, 2).unwrap();
        let mut c = HarmonicCoeffs::zero(15);
        c.set(0, 0, Complex64::new(2.5, 0.0));
        let decomp = forward(&c, &filters).unwrap();
        for band in &decomp.details {
            assert_eq!(band.norm_sq(), 0.0);
        }
        assert_eq!(decomp.coarse, c);
    }

    #[test]
    fn mismatched_bands_are_rejected() {
        let filters = StarletFilters::new(15, 2).unwrap();
        let c = HarmonicCoeffs::zero(15);
        let mut decomp = forward(&c, &filters).unwrap();
        decomp.details[0] = HarmonicCoeffs::zero(8);
        assert!(inverse(&decomp).is_err());
        assert!(forward(&HarmonicCoeffs::zero(8), &filters).is_err());
    }
}
