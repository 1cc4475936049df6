//! Forward mixture model and synthetic dataset generation.
//!
//! An observation in channel `ν` is `X_ν = H_ν * (A S)_ν + N_ν`: sources
//! mixed by `A`, blurred by the channel's isotropic Gaussian kernel, and
//! hit by white Gaussian pixel noise of a single variance `σ²` across
//! channels. The generators here produce the synthetic test datasets:
//! starlet-sparse non-negative band-limited sources, non-negative mixing
//! matrices with a prescribed condition number, and kernels whose
//! resolutions are evenly spread between a worst and a best channel.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sphere::{analyze, convolve, synthesize, HarmonicCoeffs, Map, SphereGrid};
use crate::starlet::StarletFilters;

/// Per-channel isotropic kernels `Ĥ_ν^l` tabulated over `l = 0..=l_max`,
/// with the resolution (FWHM in degree units) each one was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    l_max: usize,
    resolutions: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

/// `Ĥ^l = exp(−l(l+1)/(r(r+1))·ln 2)`: unity at `l = 0`, exactly one half
/// at `l = r`, strictly decreasing.
pub fn gaussian_kernel(r: f64, l_max: usize) -> Result<Vec<f64>> {
    if r <= 0.0 {
        return Err(Error::invalid(format!("resolution must be positive, got {r}")));
    }
    let rate = std::f64::consts::LN_2 / (r * (r + 1.0));
    Ok((0..=l_max)
        .map(|l| {
            let l = l as f64;
            (-l * (l + 1.0) * rate).exp()
        })
        .collect())
}

impl KernelSet {
    /// Gaussian kernel per channel, one resolution each.
    pub fn gaussian(resolutions: &[f64], l_max: usize) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::invalid("need at least one channel"));
        }
        let filters = resolutions
            .iter()
            .map(|&r| gaussian_kernel(r, l_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            l_max,
            resolutions: resolutions.to_vec(),
            filters,
        })
    }

    /// All-pass kernels, the no-deconvolution limit.
    pub fn identity(n_channels: usize, l_max: usize) -> Self {
        Self {
            l_max,
            resolutions: vec![l_max as f64; n_channels],
            filters: vec![vec![1.0; l_max + 1]; n_channels],
        }
    }

    /// Rebuilds a set from explicit per-channel tables, one resolution and
    /// one `l_max+1`-long filter each.
    pub fn from_filters(resolutions: Vec<f64>, filters: Vec<Vec<f64>>) -> Result<Self> {
        if resolutions.is_empty() || resolutions.len() != filters.len() {
            return Err(Error::invalid("one resolution per filter required"));
        }
        let len = filters[0].len();
        if len == 0 || filters.iter().any(|f| f.len() != len) {
            return Err(Error::invalid("filters must share one nonzero length"));
        }
        Ok(Self {
            l_max: len - 1,
            resolutions,
            filters,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.filters.len()
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn resolution(&self, channel: usize) -> f64 {
        self.resolutions[channel]
    }

    pub fn filter(&self, channel: usize) -> &[f64] {
        &self.filters[channel]
    }

    /// Channel with the finest resolution (largest `r`).
    pub fn best_channel(&self) -> usize {
        (0..self.n_channels())
            .max_by(|&a, &b| self.resolutions[a].total_cmp(&self.resolutions[b]))
            .unwrap()
    }

    /// Channel with the coarsest resolution (smallest `r`).
    pub fn worst_channel(&self) -> usize {
        (0..self.n_channels())
            .min_by(|&a, &b| self.resolutions[a].total_cmp(&self.resolutions[b]))
            .unwrap()
    }

    /// Divides every kernel by the best-resolved one, making that channel
    /// all-pass; the deconvolution then targets its resolution. Idempotent.
    pub fn normalize_to_best(&self) -> Result<Self> {
        let best = self.best_channel();
        let reference = &self.filters[best];
        if let Some(l) = reference.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateKernel(format!(
                "best-resolved channel {best} vanishes at degree {l}"
            )));
        }
        let filters = self
            .filters
            .iter()
            .map(|f| f.iter().zip(reference).map(|(a, b)| a / b).collect())
            .collect();
        Ok(Self {
            l_max: self.l_max,
            resolutions: self.resolutions.clone(),
            filters,
        })
    }
}

/// Real `N_c × N_s` mixing matrix. Column normalization and
/// non-negativity are enforced by the operations that promise them, not
/// by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub entries: DMatrix<f64>,
}

impl MixingMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("mixing matrix cannot be empty"));
        }
        Ok(Self { entries })
    }

    pub fn n_channels(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_sources(&self) -> usize {
        self.entries.ncols()
    }

    /// Projects every column onto the unit sphere. A zero column has no
    /// direction to keep and is reported as degenerate.
    pub fn normalize_columns(&mut self) -> Result<()> {
        for j in 0..self.entries.ncols() {
            let norm = self.entries.column(j).norm();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "mixing column {j} collapsed to zero"
                )));
            }
            self.entries.column_mut(j).scale_mut(1.0 / norm);
        }
        Ok(())
    }

    pub fn clip_negatives(&mut self) {
        self.entries.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Ratio of extreme singular values.
    pub fn condition_number(&self) -> f64 {
        let sv = self.entries.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Everything the ground truth of a synthetic dataset holds: mixing
/// matrix, sources at the best resolution, and their harmonic
/// coefficients.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mixing: MixingMatrix,
    pub sources: Vec<Map>,
    pub source_coeffs: Vec<HarmonicCoeffs>,
}

/// One multichannel observation set: pixel maps, their harmonic
/// coefficients, the kernels that blurred them, and the white pixel-noise
/// variance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: SphereGrid,
    pub maps: Vec<Map>,
    pub coeffs: Vec<HarmonicCoeffs>,
    pub kernels: KernelSet,
    pub sigma2: f64,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn n_channels(&self) -> usize {
        self.maps.len()
    }
}

/// Re-blurs every channel down to the worst resolution
/// (`X̂_ν ← (Ĥ_w/Ĥ_ν) ⊙ X̂_ν`), the preprocessing the non-deconvolving
/// baselines require. Channels already at the worst resolution pass
/// through untouched.
pub fn degrade_to_worst(dataset: &Dataset) -> Result<Dataset> {
    let kernels = &dataset.kernels;
    let worst = kernels.worst_channel();
    let reference = kernels.filter(worst);
    let mut maps = Vec::with_capacity(dataset.n_channels());
    let mut coeffs = Vec::with_capacity(dataset.n_channels());
    for channel in 0..dataset.n_channels() {
        let own = kernels.filter(channel);
        let ratio: Vec<f64> = reference
            .iter()
            .zip(own)
            .enumerate()
            .map(|(l, (w, h))| {
                if *h == 0.0 && *w != 0.0 {
                    Err(Error::DegenerateKernel(format!(
                        "channel {channel} vanishes at degree {l} inside the worst kernel's support"
                    )))
                } else if *h == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(w / h)
                }
            })
            .collect::<Result<_>>()?;
        if ratio.iter().all(|&v| v == 1.0) {
            maps.push(dataset.maps[channel].clone());
            coeffs.push(dataset.coeffs[channel].clone());
        } else {
            let degraded = convolve(&dataset.coeffs[channel], &ratio)?;
            maps.push(synthesize(&degraded, &dataset.grid)?);
            coeffs.push(degraded);
        }
    }
    Ok(Dataset {
        grid: dataset.grid.clone(),
        maps,
        coeffs,
        kernels: KernelSet {
            l_max: kernels.l_max,
            resolutions: vec![kernels.resolution(worst); kernels.n_channels()],
            filters: vec![reference.to_vec(); kernels.n_channels()],
        },
        sigma2: dataset.sigma2,
        ground_truth: dataset.ground_truth.clone(),
    })
}

/// Draws non-negative sources that are sparse in the starlet dictionary
/// and band-limited at `cutoff`: per detail scale, Bernoulli-Gaussian
/// spike maps convolved with that scale's filter, plus a smooth
/// non-negative coarse component scaled to the detail energy; the sum is
/// clipped at zero, band-limited, clipped again and ℓ2-normalized.
/// Non-negativity and the band limit fight each other, so the final clip
/// leaves a small out-of-band residual instead of negative pixels.
pub fn random_sources(
    n_sources: usize,
    grid: &SphereGrid,
    cutoff: usize,
    sparsity: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Map>> {
    if n_sources == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    if cutoff == 0 || cutoff > grid.l_max() {
        return Err(Error::invalid(format!(
            "cutoff {} outside 1..={}",
            cutoff,
            grid.l_max()
        )));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity {sparsity} outside [0, 1]")));
    }
    // spikes are drawn in the same wavelet bands the separation will
    // later threshold; the band limit then keeps only the scales that
    // fit under the cutoff, which concentrates the surviving detail
    // blobs right above the coarse cut, like the data this mimics
    let filters = StarletFilters::new(grid.l_max(), 3)?;
    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let mut details = vec![0.0; grid.n_pix()];
        for j in 0..filters.n_scales() {
            let spikes = Map::new(
                grid.n_side(),
                (0..grid.n_pix())
                    .map(|_| {
                        if rng.random::<f64>() < sparsity {
                            rng.sample::<f64, _>(StandardNormal).abs()
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
            let blob = synthesize(
                &convolve(&analyze(&spikes, grid, 0)?, filters.detail(j))?,
                grid,
            )?;
            for (d, b) in details.iter_mut().zip(&blob.values) {
                *d += b;
            }
        }
        let band_mask: Vec<f64> = (0..=grid.l_max())
            .map(|l| if l <= cutoff { 1.0 } else { 0.0 })
            .collect();
        // the cutoff removes the finer scales wholesale and truncates the
        // last one, so equalize detail against coarse only after it
        let details = synthesize(
            &convolve(
                &analyze(&Map::new(grid.n_side(), details)?, grid, 0)?,
                &band_mask,
            )?,
            grid,
        )?
        .values;
        let white = Map::new(
            grid.n_side(),
            (0..grid.n_pix())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        let mut coarse =
            synthesize(&convolve(&analyze(&white, grid, 0)?, filters.coarse())?, grid)?
                .values;
        let detail_rms = rms(&details);
        let coarse_rms = rms(&coarse);
        if detail_rms > 0.0 && coarse_rms > 0.0 {
            let scale = detail_rms / coarse_rms;
            coarse.iter_mut().for_each(|v| *v *= scale);
        }
        // non-negativity by clipping, not by a constant offset: the
        // result is a mostly dark sky with bright blobs; a few rounds of
        // alternating clip and band-limit keep the out-of-band leakage of
        // the clip below the accepted residual
        let mut pixels: Vec<f64> = details
            .iter()
            .zip(&coarse)
            .map(|(d, c)| (d + c).max(0.0))
            .collect();
        for _ in 0..3 {
            let limited = synthesize(
                &convolve(
                    &analyze(&Map::new(grid.n_side(), pixels)?, grid, 2)?,
                    &band_mask,
                )?,
                grid,
            )?;
            pixels = limited.values.iter().map(|&v| v.max(0.0)).collect();
        }
        let norm = pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::GenerationFailure(
                "drew an identically zero source".into(),
            ));
        }
        pixels.iter_mut().for_each(|v| *v /= norm);
        sources.push(Map::new(grid.n_side(), pixels)?);
    }
    Ok(sources)
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Draws a non-negative mixing matrix with unit-norm columns and a
/// condition number within 5% of `cond`. A target of 1 needs exactly
/// orthogonal columns, which non-negativity forces onto disjoint supports,
/// so near-1 targets get that construction directly; larger targets are
/// reached by reshaping the singular spectrum to a geometric ramp, then
/// re-projecting onto the constraints until the condition number settles.
pub fn random_mixing(
    n_channels: usize,
    n_sources: usize,
    cond: f64,
    rng: &mut impl Rng,
) -> Result<MixingMatrix> {
    if n_sources == 0 || n_channels < n_sources {
        return Err(Error::invalid(format!(
            "need n_channels >= n_sources >= 1, got {n_channels} x {n_sources}"
        )));
    }
    if cond < 1.0 {
        return Err(Error::invalid(format!(
            "condition number {cond} below the attainable minimum 1"
        )));
    }
    let within = |measured: f64| (measured - cond).abs() <= 0.05 * cond;
    if cond <= 1.01 || n_sources == 1 {
        if !within(1.0) {
            return Err(Error::GenerationFailure(format!(
                "condition number {cond} unreachable with orthogonal non-negative columns"
            )));
        }
        // disjoint row supports: random positive entries, column k owning
        // rows congruent to k
        let mut entries = DMatrix::zeros(n_channels, n_sources);
        for i in 0..n_channels {
            entries[(i, i % n_sources)] = 0.5 + rng.random::<f64>();
        }
        let mut mixing = MixingMatrix::new(entries)?;
        mixing.normalize_columns()?;
        return Ok(mixing);
    }
    for _attempt in 0..50 {
        let mut entries =
            DMatrix::from_fn(n_channels, n_sources, |_, _| rng.random::<f64>());
        for _ in 0..200 {
            let svd = entries.clone().svd(true, true);
            let u = svd.u.as_ref().unwrap();
            let vt = svd.v_t.as_ref().unwrap();
            let ramp = DMatrix::from_fn(n_sources, n_sources, |i, j| {
                if i == j {
                    cond.powf(-(i as f64) / (n_sources as f64 - 1.0))
                } else {
                    0.0
                }
            });
            entries = u * ramp * vt;
            entries.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut mixing = MixingMatrix::new(entries.clone())?;
            if mixing.normalize_columns().is_err() {
                break;
            }
            if within(mixing.condition_number()) {
                return Ok(mixing);
            }
            entries = mixing.entries;
        }
    }
    Err(Error::GenerationFailure(format!(
        "condition number {cond} not reached for a {n_channels} x {n_sources} non-negative matrix"
    )))
}

/// Knobs of the synthetic data generator, preset to the reference toy
/// configuration for the given grid size: 4 sources in 8 channels, mixing
/// condition 2, kernel resolutions spread from `l_max/8` up to `l_max`,
/// sources cut off at `l_max/6`, 10 dB signal-to-noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateParams {
    pub n_side: usize,
    pub n_sources: usize,
    pub n_channels: usize,
    pub cond: f64,
    pub r_min: f64,
    pub cutoff: usize,
    pub sparsity: f64,
    /// `None` simulates noiseless data (σ² = 0).
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl SimulateParams {
    pub fn new(n_side: usize) -> Self {
        let l_max = 3 * n_side - 1;
        Self {
            n_side,
            n_sources: 4,
            n_channels: 8,
            cond: 2.0,
            r_min: (l_max / 8).max(1) as f64,
            cutoff: (l_max / 6).max(1),
            sparsity: 0.01,
            snr_db: Some(10.0),
            seed: 0,
        }
    }
}

/// Simulates one dataset: sources, mixing, per-channel blur and white
/// noise with `σ²` set from the requested global Frobenius SNR,
/// `10·log₁₀(‖X₀‖²_F / (N_c·N_p·σ²))`. Identical parameters give a
/// bit-identical dataset.
pub fn simulate(params: &SimulateParams) -> Result<Dataset> {
    if params.n_channels < params.n_sources {
        return Err(Error::invalid(format!(
            "need n_channels >= n_sources, got {} x {}",
            params.n_channels, params.n_sources
        )));
    }
    let grid = SphereGrid::new(params.n_side)?;
    let l_max = grid.l_max();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sources = random_sources(
        params.n_sources,
        &grid,
        params.cutoff,
        params.sparsity,
        &mut rng,
    )?;
    let source_coeffs = sources
        .iter()
        .map(|s| analyze(s, &grid, 2))
        .collect::<Result<Vec<_>>>()?;
    let mixing = random_mixing(params.n_channels, params.n_sources, params.cond, &mut rng)?;

    let resolutions: Vec<f64> = (0..params.n_channels)
        .map(|c| {
            if params.n_channels == 1 {
                l_max as f64
            } else {
                params.r_min
                    + (l_max as f64 - params.r_min) * c as f64
                        / (params.n_channels - 1) as f64
            }
        })
        .collect();
    let kernels = KernelSet::gaussian(&resolutions, l_max)?;

    let mut noiseless = Vec::with_capacity(params.n_channels);
    for channel in 0..params.n_channels {
        let mut mixed = HarmonicCoeffs::zero(l_max);
        for (n, coeffs) in source_coeffs.iter().enumerate() {
            let weight = mixing.entries[(channel, n)];
            for (acc, c) in mixed.as_mut_slice().iter_mut().zip(coeffs.as_slice()) {
                *acc += c * weight;
            }
        }
        noiseless.push(synthesize(&convolve(&mixed, kernels.filter(channel))?, &grid)?);
    }

    let signal_energy: f64 = noiseless
        .iter()
        .flat_map(|m| m.values.iter())
        .map(|v| v * v)
        .sum();
    let sigma2 = match params.snr_db {
        Some(snr) => {
            signal_energy
                / (params.n_channels as f64 * grid.n_pix() as f64 * 10f64.powf(snr / 10.0))
        }
        None => 0.0,
    };
    let sigma = sigma2.sqrt();

    let mut maps = Vec::with_capacity(params.n_channels);
    let mut coeffs = Vec::with_capacity(params.n_channels);
    for clean in &noiseless {
        let noisy = Map::new(
            grid.n_side(),
            clean
                .values
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        // refined analysis keeps the harmonic data consistent with the
        // forward model (the quadrature alone would distort it at the
        // percent level)
        coeffs.push(analyze(&noisy, &grid, 2)?);
        maps.push(noisy);
    }

    Ok(Dataset {
        grid,
        maps,
        coeffs,
        kernels,
        sigma2,
        ground_truth: Some(GroundTruth {
            mixing,
            sources,
            source_coeffs,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::power_spectrum;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_kernel_hits_its_half_power_point() {
        let k = gaussian_kernel(10.0, 30).unwrap();
        assert_eq!(k[0], 1.0);
        assert_relative_eq!(k[10], 0.5, epsilon = 1e-15);
        for l in 1..=30 {
            assert!(k[l] < k[l - 1], "not strictly decreasing at {l}");
        }
        assert!(gaussian_kernel(0.0, 10).is_err());
        assert!(gaussian_kernel(-3.0, 10).is_err());
    }

    #[test]
    fn normalization_flattens_the_best_channel() {
        let kernels = KernelSet::gaussian(&[5.0, 20.0, 11.0], 40).unwrap();
        assert_eq!(kernels.best_channel(), 1);
        assert_eq!(kernels.worst_channel(), 0);
        let normalized = kernels.normalize_to_best().unwrap();
        for l in 0..=40 {
            assert_relative_eq!(normalized.filter(1)[l], 1.0);
            assert!(normalized.filter(0)[l] <= 1.0 + 1e-15);
            // ratio of exponentials, directly
            let expected = (-((l * (l + 1)) as f64)
                * std::f64::consts::LN_2
                * (1.0 / 30.0 - 1.0 / 420.0))
                .exp();
            assert_relative_eq!(normalized.filter(0)[l], expected, max_relative = 1e-12);
        }
        let twice = normalized.normalize_to_best().unwrap();
        assert_eq!(twice, normalized);
        // a single channel normalizes to the identity kernel
        let single = KernelSet::gaussian(&[7.0], 20).unwrap().normalize_to_best().unwrap();
        assert!(single.filter(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degrade_reblurs_everything_to_the_worst_channel() {
        let params = SimulateParams {
            n_sources: 2,
            n_channels: 3,
            seed: 5,
            ..SimulateParams::new(8)
        };
        let dataset = simulate(&params).unwrap();
        let degraded = degrade_to_worst(&dataset).unwrap();
        let worst = dataset.kernels.worst_channel();
        // worst channel passes through bit-identically
        assert_eq!(degraded.maps[worst], dataset.maps[worst]);
        assert_eq!(degraded.coeffs[worst], dataset.coeffs[worst]);
        for channel in 0..3 {
            assert_eq!(degraded.kernels.filter(channel), dataset.kernels.filter(worst));
        }
        // degrading again is the identity
        let twice = degrade_to_worst(&degraded).unwrap();
        for channel in 0..3 {
            assert_eq!(twice.maps[channel], degraded.maps[channel]);
        }
    }

    #[test]
    fn sources_are_band_limited_and_nearly_non_negative() {
        let grid = SphereGrid::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cutoff = grid.l_max() / 6;
        let sources = random_sources(3, &grid, cutoff, 0.01, &mut rng).unwrap();
        for s in &sources {
            let norm: f64 = s.values.iter().map(|v| v * v).sum();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
            assert!(s.values.iter().all(|&v| v >= 0.0));
            let spec = power_spectrum(&analyze(s, &grid, 2).unwrap());
            let total: f64 = (0..=grid.l_max())
                .map(|l| (2 * l + 1) as f64 * spec.get(l))
                .sum();
            let out_of_band: f64 = (cutoff + 1..=grid.l_max())
                .map(|l| (2 * l + 1) as f64 * spec.get(l))
                .sum();
            assert!(
                out_of_band < 0.01 * total,
                "out-of-band residual {out_of_band:.3e} of {total:.3e}"
            );
        }
    }

    #[test]
    fn zero_sparsity_leaves_only_the_coarse_component() {
        let grid = SphereGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sources = random_sources(2, &grid, 6, 0.0, &mut rng).unwrap();
        for s in &sources {
            assert!(s.values.iter().all(|&v| v >= 0.0));
            // coarse-only content: spectrum dies above the generator's
            // coarsest low-pass support, well below the cutoff
            let spec = power_spectrum(&analyze(s, &grid, 2).unwrap());
            let total: f64 = (0..=grid.l_max())
                .map(|l| (2 * l + 1) as f64 * spec.get(l))
                .sum();
            let high: f64 = (4..=grid.l_max())
                .map(|l| (2 * l + 1) as f64 * spec.get(l))
                .sum();
            assert!(high < 0.05 * total);
        }
    }

    #[test]
    fn mixing_meets_its_condition_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &cond in &[1.5, 2.0, 5.0, 14.0] {
            let m = random_mixing(6, 3, cond, &mut rng).unwrap();
            assert!(m.entries.iter().all(|&v| v >= 0.0));
            for j in 0..3 {
                assert_relative_eq!(m.entries.column(j).norm(), 1.0, epsilon = 1e-12);
            }
            let measured = m.condition_number();
            assert!(
                (measured - cond).abs() <= 0.05 * cond,
                "target {cond}, got {measured}"
            );
        }
    }

    #[test]
    fn unit_condition_target_gives_orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mixing(7, 3, 1.0, &mut rng).unwrap();
        assert_relative_eq!(m.condition_number(), 1.0, epsilon = 1e-12);
        assert!(m.entries.iter().all(|&v| v >= 0.0));
        let gram = m.entries.transpose() * &m.entries;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn mixing_rejects_bad_shapes_and_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(random_mixing(2, 3, 2.0, &mut rng).is_err());
        assert!(random_mixing(3, 2, 0.5, &mut rng).is_err());
        assert!(random_mixing(3, 1, 2.0, &mut rng).is_err());
    }

    #[test]
    fn simulated_snr_matches_the_request() {
        let params = SimulateParams {
            n_sources: 2,
            n_channels: 4,
            seed: 11,
            ..SimulateParams::new(16)
        };
        let dataset = simulate(&params).unwrap();
        let truth = dataset.ground_truth.as_ref().unwrap();
        // rebuild the noiseless observations and measure the actual SNR
        let mut signal = 0.0f64;
        let mut noise = 0.0f64;
        for channel in 0..4 {
            let mut mixed = HarmonicCoeffs::zero(dataset.grid.l_max());
            for (n, c) in truth.source_coeffs.iter().enumerate() {
                let w = truth.mixing.entries[(channel, n)];
                for (acc, v) in mixed.as_mut_slice().iter_mut().zip(c.as_slice()) {
                    *acc += v * w;
                }
            }
            let clean = synthesize(
                &convolve(&mixed, dataset.kernels.filter(channel)).unwrap(),
                &dataset.grid,
            )
            .unwrap();
            signal += clean.values.iter().map(|v| v * v).sum::<f64>();
            noise += clean
                .values
                .iter()
                .zip(&dataset.maps[channel].values)
                .map(|(c, x)| (x - c) * (x - c))
                .sum::<f64>();
        }
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 10.0).abs() < 0.1, "snr {snr}");
        // noiseless mode really is noiseless
        let clean = simulate(&SimulateParams {
            snr_db: None,
            ..params
        })
        .unwrap();
        assert_eq!(clean.sigma2, 0.0);
    }

    #[test]
    fn noiseless_data_obeys_the_forward_model_in_harmonics() {
        let params = SimulateParams {
            n_sources: 2,
            n_channels: 3,
            snr_db: None,
            seed: 21,
            ..SimulateParams::new(8)
        };
        let dataset = simulate(&params).unwrap();
        let truth = dataset.ground_truth.as_ref().unwrap();
        for channel in 0..3 {
            let mut mixed = HarmonicCoeffs::zero(dataset.grid.l_max());
            for (n, c) in truth.source_coeffs.iter().enumerate() {
                let w = truth.mixing.entries[(channel, n)];
                for (acc, v) in mixed.as_mut_slice().iter_mut().zip(c.as_slice()) {
                    *acc += v * w;
                }
            }
            let expected = convolve(&mixed, dataset.kernels.filter(channel)).unwrap();
            let err = dataset.coeffs[channel].sub(&expected).unwrap().norm_sq();
            let scale = expected.norm_sq();
            assert!(
                err < 1e-18 * scale,
                "channel {channel} off the model by {:.3e} relative",
                (err / scale).sqrt()
            );
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let params = SimulateParams {
            n_sources: 2,
            n_channels: 3,
            seed: 77,
            ..SimulateParams::new(8)
        };
        let a = simulate(&params).unwrap();
        let b = simulate(&params).unwrap();
        assert_eq!(a.sigma2, b.sigma2);
        for (x, y) in a.maps.iter().zip(&b.maps) {
            assert_eq!(x, y);
        }
        assert_eq!(
            a.ground_truth.as_ref().unwrap().mixing.entries,
            b.ground_truth.as_ref().unwrap().mixing.entries
        );
    }
}
