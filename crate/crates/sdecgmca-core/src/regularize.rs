//! Per-(source, degree) Tikhonov coefficients for the regularized source
//! update.
//!
//! The source update inverts `M[l] + diag(ε_{n,l})` with
//! `M[l] = Aᵀ diag(Ĥ^l)² A`, so the choice of `ε` decides how hard the
//! ill-conditioned high degrees (where every kernel has died) are
//! suppressed. Four strategies, from crude to spectrum-matched:
//!
//! 1. one constant;
//! 2. proportional to `λ_max(M[l])`;
//! 3. capping the noise amplification at `c` via `λ_min(M[l])`;
//! 4. proportional to the noise-to-source power ratio per degree, the
//!    harmonic-domain analogue of a Wiener filter.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::eigen_extrema;
use crate::model::{KernelSet, MixingMatrix};
use crate::sphere::PowerSpectrum;

/// The regularization table `ε_{n,l} ≥ 0`, one row per source.
#[derive(Debug, Clone, PartialEq)]
pub struct RegParams {
    eps: DMatrix<f64>,
}

impl RegParams {
    pub fn n_sources(&self) -> usize {
        self.eps.nrows()
    }

    pub fn l_max(&self) -> usize {
        self.eps.ncols() - 1
    }

    pub fn value(&self, source: usize, l: usize) -> f64 {
        self.eps[(source, l)]
    }

    fn from_fn(
        n_sources: usize,
        l_max: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        Self {
            eps: DMatrix::from_fn(n_sources, l_max + 1, f),
        }
    }
}

/// The per-degree normal matrices `M[l] = Aᵀ diag(Ĥ^l)² A` shared by the
/// source update, the noise propagation and strategies #2/#3.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMatrices {
    matrices: Vec<DMatrix<f64>>,
}

impl NormalMatrices {
    pub fn n_sources(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn l_max(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn at(&self, l: usize) -> &DMatrix<f64> {
        &self.matrices[l]
    }
}

pub fn build_normal_matrices(
    mixing: &MixingMatrix,
    kernels: &KernelSet,
) -> Result<NormalMatrices> {
    if mixing.n_channels() != kernels.n_channels() {
        return Err(Error::invalid(format!(
            "mixing has {} channels, kernels {}",
            mixing.n_channels(),
            kernels.n_channels()
        )));
    }
    let n_s = mixing.n_sources();
    let matrices = (0..=kernels.l_max())
        .map(|l| {
            DMatrix::from_fn(n_s, n_s, |p, q| {
                (0..mixing.n_channels())
                    .map(|c| {
                        let h = kernels.filter(c)[l];
                        h * h * mixing.entries[(c, p)] * mixing.entries[(c, q)]
                    })
                    .sum()
            })
        })
        .collect();
    Ok(NormalMatrices { matrices })
}

/// Strategy #1: one constant, blind to both degree and conditioning.
pub fn strategy1(c: f64, n_sources: usize, l_max: usize) -> Result<RegParams> {
    check_c(c)?;
    Ok(RegParams::from_fn(n_sources, l_max, |_, _| c))
}

/// Strategy #2: `ε_l = c·λ_max(M[l])`, scaling with the system instead of
/// being an absolute constant.
pub fn strategy2(c: f64, normal: &NormalMatrices) -> Result<RegParams> {
    check_c(c)?;
    let per_l: Vec<f64> = (0..=normal.l_max())
        .map(|l| c * eigen_extrema(normal.at(l)).1)
        .collect();
    Ok(RegParams::from_fn(normal.n_sources(), normal.l_max(), |_, l| per_l[l]))
}

/// Strategy #3: `ε_l = max(0, c − λ_min(M[l])/(λ_min(AᵀA) + 0.01))`. The
/// clamp keeps well-conditioned low degrees exactly unbiased and the
/// noise amplification at the others capped near `c`.
pub fn strategy3(c: f64, normal: &NormalMatrices, mixing: &MixingMatrix) -> Result<RegParams> {
    check_c(c)?;
    let gram = mixing.entries.transpose() * &mixing.entries;
    let denom = eigen_extrema(&gram).0 + 0.01;
    let per_l: Vec<f64> = (0..=normal.l_max())
        .map(|l| (c - eigen_extrema(normal.at(l)).0 / denom).max(0.0))
        .collect();
    Ok(RegParams::from_fn(normal.n_sources(), normal.l_max(), |_, l| per_l[l]))
}

/// Strategy #4: `ε_{n,l} = c·c_N(l)/c_{S_n}(l)`, suppressing each degree
/// in proportion to how badly its estimate drowns in noise. Estimated
/// spectra can vanish, so each source's spectrum is floored at
/// `1e-12 · max_l c_{S_n}(l)` to keep `ε` finite (and enormous exactly
/// where the source has no content).
pub fn strategy4(
    c: f64,
    source_spectra: &[PowerSpectrum],
    noise_spectrum: &PowerSpectrum,
) -> Result<RegParams> {
    check_c(c)?;
    if source_spectra.is_empty() {
        return Err(Error::invalid("need at least one source spectrum"));
    }
    let l_max = noise_spectrum.l_max();
    if source_spectra.iter().any(|s| s.l_max() != l_max) {
        return Err(Error::invalid("spectra disagree on the band limit"));
    }
    let floors: Vec<f64> = source_spectra
        .iter()
        .map(|s| {
            let max = s.values.iter().cloned().fold(0.0f64, f64::max);
            (1e-12 * max).max(f64::MIN_POSITIVE)
        })
        .collect();
    Ok(RegParams::from_fn(source_spectra.len(), l_max, |n, l| {
        c * noise_spectrum.get(l) / source_spectra[n].get(l).max(floors[n])
    }))
}

fn check_c(c: f64) -> Result<()> {
    if c < 0.0 || !c.is_finite() {
        return Err(Error::invalid(format!(
            "regularization scale must be finite and non-negative, got {c}"
        )));
    }
    Ok(())
}
