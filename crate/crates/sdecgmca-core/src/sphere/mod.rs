//! Spherical grids, harmonic transforms and spectra.
//!
//! Everything downstream works on band-limited signals sampled on an
//! equal-area iso-latitude grid. A real map `x` and its harmonic
//! coefficients `x̂_{l,m}` are related by
//!
//! ```text
//!   x_p = Σ_{l=0}^{l_max} Σ_{m=-l}^{l}  x̂_{l,m} Y_{l,m}(θ_p, φ_p)
//! ```
//!
//! with fully normalized spherical harmonics `Y_{l,m}`. Only `m ≥ 0` is
//! stored; real maps fix the negative orders by conjugate symmetry
//! `x̂_{l,-m} = (-1)^m conj(x̂_{l,m})`.

mod grid;
mod legendre;
mod transform;

pub use grid::{Ring, SphereGrid};
pub use transform::{analyze, convolve, power_spectrum, synthesize};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A real scalar field sampled on a [`SphereGrid`], one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub n_side: usize,
    pub values: Vec<f64>,
}

impl Map {
    /// Wraps a pixel vector, checking that its length matches the grid size.
    pub fn new(n_side: usize, values: Vec<f64>) -> Result<Self> {
        let n_pix = 12 * n_side * n_side;
        if values.len() != n_pix {
            return Err(Error::invalid(format!(
                "map has {} values, grid n_side={} needs {}",
                values.len(),
                n_side,
                n_pix
            )));
        }
        Ok(Map { n_side, values })
    }

    /// All-zero map on the given grid.
    pub fn zero(n_side: usize) -> Self {
        Map {
            n_side,
            values: vec![0.0; 12 * n_side * n_side],
        }
    }

    pub fn n_pix(&self) -> usize {
        self.values.len()
    }

    /// Entrywise ℓ2 norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Harmonic coefficients of a real field, band-limited at `l_max`.
///
/// Orders `m ≥ 0` only, packed as `idx(l, m) = l(l+1)/2 + m`, which gives
/// `(l_max+1)(l_max+2)/2` entries. `m = 0` entries are real (imaginary part
/// exactly zero by construction in [`analyze`]).
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicCoeffs {
    l_max: usize,
    data: Vec<Complex64>,
}

impl HarmonicCoeffs {
    pub fn zero(l_max: usize) -> Self {
        let n = (l_max + 1) * (l_max + 2) / 2;
        HarmonicCoeffs {
            l_max,
            data: vec![Complex64::ZERO; n],
        }
    }

    #[inline]
    pub fn l_max(&self) -> usize {
        self.l_max
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn idx(l: usize, m: usize) -> usize {
        l * (l + 1) / 2 + m
    }

    #[inline]
    pub fn get(&self, l: usize, m: usize) -> Complex64 {
        debug_assert!(m <= l && l <= self.l_max);
        self.data[Self::idx(l, m)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, m: usize, v: Complex64) {
        debug_assert!(m <= l && l <= self.l_max);
        self.data[Self::idx(l, m)] = v;
    }

    /// Raw coefficient slice in `idx(l, m)` order.
    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Squared ℓ2 norm over the full set of orders: `m > 0` entries count
    /// twice, standing in for their conjugate partners at `-m`.
    pub fn norm_sq(&self) -> f64 {
        let mut total = 0.0;
        for l in 0..=self.l_max {
            let base = Self::idx(l, 0);
            total += self.data[base].norm_sqr();
            for m in 1..=l {
                total += 2.0 * self.data[base + m].norm_sqr();
            }
        }
        total
    }

    /// `self - other`, degree by degree. Both sides must share `l_max`.
    pub fn sub(&self, other: &HarmonicCoeffs) -> Result<HarmonicCoeffs> {
        if self.l_max != other.l_max {
            return Err(Error::invalid(format!(
                "coefficient band limits differ: {} vs {}",
                self.l_max, other.l_max
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(HarmonicCoeffs {
            l_max: self.l_max,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &HarmonicCoeffs) {
        debug_assert_eq!(self.l_max, other.l_max);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Angular power spectrum `c_l = (1/(2l+1)) Σ_m |x̂_{l,m}|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub values: Vec<f64>,
}

impl PowerSpectrum {
    pub fn l_max(&self) -> usize {
        self.values.len() - 1
    }

    #[inline]
    pub fn get(&self, l: usize) -> f64 {
        self.values[l]
    }
}
