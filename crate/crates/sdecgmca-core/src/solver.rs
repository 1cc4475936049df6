//! The two-stage alternating solver and its non-blind variant.
//!
//! Each iteration alternates a Tikhonov-regularized least-squares update
//! of the sources in the harmonic domain (where deconvolution is
//! diagonal) with sparsity enforcement in the starlet domain and a
//! projected least-squares update of the mixing matrix. The warm-up stage
//! anneals the regularization and the support fraction to pull the
//! iterates into the right basin; the refinement stage switches to
//! spectrum-matched regularization, ℓ1-reweighting and (optionally)
//! non-negative sources. Once the factorization has stabilized, the
//! sources are re-estimated a final time with the mixing matrix frozen,
//! every supra-noise coefficient kept, and the coarse scales of the raw
//! data reincorporated.
//!
//! Separation itself runs on coarse-free data: the coarse starlet scale
//! carries no morphological contrast between sources, only offsets that
//! bias the mixing update, so it is stripped from the observations and
//! restored in the final re-estimation.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::model::{degrade_to_worst, Dataset, KernelSet, MixingMatrix};
use crate::regularize::{
    build_normal_matrices, strategy1, strategy2, strategy3, strategy4, RegParams,
};
use crate::sphere::{
    analyze, convolve, power_spectrum, synthesize, HarmonicCoeffs, Map, PowerSpectrum,
    SphereGrid,
};
use crate::starlet::{forward_direct, inverse_direct, StarletDecomposition, StarletFilters};

/// Where the per-(source, scale) noise levels come from: the known pixel
/// variance propagated analytically, or a median-absolute-deviation
/// estimate on the finest detail scale of the current source estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseEstimate {
    Analytic(f64),
    Mad,
}

/// Regularization used in the refinement stage and the final
/// re-estimation: the per-degree noise-to-source spectral ratio, or the
/// largest-eigenvalue rule (the non-spectral fallback).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementStrategy {
    SpectrumRatio,
    LargestEigenvalue,
}

/// All solver knobs. `new` fills the reference configuration; fields are
/// public so call sites tweak what they need.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub n_sources: usize,
    /// Warm-up regularization scale (the anneal ends here).
    pub c_warmup: f64,
    /// Refinement regularization scale.
    pub c_refine: f64,
    /// Threshold multiplier in units of the per-scale noise std.
    pub k: f64,
    /// Largest fraction of supra-noise coefficients kept active.
    pub support_max: f64,
    /// Detail scales in the sparsity dictionary.
    pub n_scales: usize,
    /// Warm-up schedule length (and minimum warm-up iteration count).
    pub n_warmup: usize,
    pub eps_warmup: f64,
    pub eps_refine: f64,
    pub max_warmup_iters: usize,
    pub max_refine_iters: usize,
    pub nonneg_s: bool,
    pub nonneg_a: bool,
    pub noise: NoiseEstimate,
    pub refinement: RefinementStrategy,
}

impl SolverConfig {
    pub fn new(n_sources: usize, sigma2: f64) -> Self {
        Self {
            n_sources,
            c_warmup: 0.5,
            c_refine: 0.5,
            k: 3.0,
            support_max: 0.5,
            n_scales: 3,
            n_warmup: 100,
            eps_warmup: 1e-2,
            eps_refine: 1e-5,
            max_warmup_iters: 200,
            max_refine_iters: 500,
            nonneg_s: false,
            nonneg_a: false,
            noise: NoiseEstimate::Analytic(sigma2),
            refinement: RefinementStrategy::SpectrumRatio,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::invalid("need at least one source"));
        }
        if self.k <= 0.0 {
            return Err(Error::invalid("threshold multiplier must be positive"));
        }
        if !(self.support_max > 0.0 && self.support_max <= 1.0) {
            return Err(Error::invalid("support fraction must lie in (0, 1]"));
        }
        if self.eps_warmup <= 0.0 || self.eps_refine <= 0.0 {
            return Err(Error::invalid("stop tolerances must be positive"));
        }
        if self.n_warmup == 0 {
            return Err(Error::invalid("warm-up schedule needs at least one step"));
        }
        if self.max_warmup_iters == 0 || self.max_refine_iters == 0 {
            return Err(Error::invalid("iteration caps must be at least one"));
        }
        if let NoiseEstimate::Analytic(s) = self.noise {
            if s < 0.0 {
                return Err(Error::invalid("noise variance cannot be negative"));
            }
        }
        Ok(())
    }
}

/// Which stage produced a diagnostics row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Refinement,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Refinement => "refinement",
        })
    }
}

/// One iteration of the trace: the schedule values in force and the
/// relative change of the source estimate they produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub c: f64,
    pub support: f64,
    pub rel_change: f64,
}

/// Final factorization with its diagnostics trace.
#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub mixing: MixingMatrix,
    pub sources: Vec<Map>,
    pub source_coeffs: Vec<HarmonicCoeffs>,
    pub diagnostics: Vec<IterationRecord>,
    /// False when any stage ran into its iteration cap before reaching
    /// its tolerance; the best iterate is still returned.
    pub converged: bool,
}

/// Per-source, per-scale, per-coefficient soft-threshold levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    values: Vec<Vec<Vec<f64>>>,
}

impl Thresholds {
    pub fn n_sources(&self) -> usize {
        self.values.len()
    }

    pub fn n_scales(&self) -> usize {
        self.values[0].len()
    }

    pub fn value(&self, source: usize, scale: usize) -> &[f64] {
        &self.values[source][scale]
    }
}

/// `sign(x)·max(|x|−λ, 0)`.
pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// Initializes the mixing matrix from the leading principal directions of
/// the channel covariance, computed on data degraded to a common
/// resolution with coarse scales removed. Deterministic.
pub fn pca_init(
    dataset: &Dataset,
    n_sources: usize,
    n_scales: usize,
    nonneg: bool,
) -> Result<MixingMatrix> {
    let n_channels = dataset.n_channels();
    if n_channels < n_sources {
        return Err(Error::InitializationFailure(format!(
            "{n_channels} channels cannot hold {n_sources} sources"
        )));
    }
    let degraded = degrade_to_worst(dataset)?;
    let filters = StarletFilters::new(dataset.grid.l_max(), n_scales)?;
    let detail_pass = detail_pass_filter(&filters);
    let n_pix = dataset.grid.n_pix();
    let mut channels = Vec::with_capacity(n_channels);
    for coeffs in &degraded.coeffs {
        let mut map = synthesize(&convolve(coeffs, &detail_pass)?, &dataset.grid)?;
        let mean = map.values.iter().sum::<f64>() / n_pix as f64;
        map.values.iter_mut().for_each(|v| *v -= mean);
        channels.push(map);
    }
    let covariance = DMatrix::from_fn(n_channels, n_channels, |i, j| {
        channels[i]
            .values
            .iter()
            .zip(&channels[j].values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n_pix as f64
    });
    let (eigenvalues, eigenvectors) = symmetric_eigen(&covariance);
    let largest = eigenvalues[n_channels - 1];
    let wanted = eigenvalues[n_channels - n_sources];
    if largest <= 0.0 || wanted <= 1e-12 * largest {
        return Err(Error::InitializationFailure(format!(
            "channel covariance has rank below {n_sources}"
        )));
    }
    // leading directions as columns, strongest first
    let mut entries = DMatrix::from_fn(n_channels, n_sources, |i, j| {
        eigenvectors[(i, n_channels - 1 - j)]
    });
    for mut column in entries.column_iter_mut() {
        let lead = column
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap();
        if lead < 0.0 {
            column.neg_mut();
        }
    }
    let mut mixing = MixingMatrix::new(entries)?;
    if nonneg {
        mixing.clip_negatives();
    }
    mixing.normalize_columns().map_err(|_| {
        Error::InitializationFailure("a principal direction vanished under the non-negative projection".into())
    })?;
    Ok(mixing)
}

/// Regularized least-squares source update: for every `(l, m)`,
/// `Ŝ = (M[l] + diag(ε_{n,l}))⁻¹ Aᵀ diag(Ĥ^l) X̂`.
pub fn update_sources_ls(
    data: &[HarmonicCoeffs],
    kernels: &KernelSet,
    mixing: &MixingMatrix,
    reg: &RegParams,
) -> Result<Vec<HarmonicCoeffs>> {
    let l_max = kernels.l_max();
    let n_s = mixing.n_sources();
    let n_c = mixing.n_channels();
    if data.len() != n_c {
        return Err(Error::invalid(format!(
            "{} data channels against a {}-channel mixing matrix",
            data.len(),
            n_c
        )));
    }
    if reg.n_sources() != n_s || reg.l_max() != l_max {
        return Err(Error::invalid("regularization table shape mismatch"));
    }
    let normal = build_normal_matrices(mixing, kernels)?;
    let mut sources = vec![HarmonicCoeffs::zero(l_max); n_s];
    let mut rhs_re = DVector::zeros(n_s);
    let mut rhs_im = DVector::zeros(n_s);
    for l in 0..=l_max {
        let mut system = normal.at(l).clone();
        for n in 0..n_s {
            system[(n, n)] += reg.value(n, l);
        }
        let chol = Cholesky::new(system).ok_or(Error::SingularSystem { l })?;
        let base = l * (l + 1) / 2;
        for m in 0..=l {
            for p in 0..n_s {
                let mut acc = Complex64::ZERO;
                for c in 0..n_c {
                    acc += data[c].as_slice()[base + m]
                        * (mixing.entries[(c, p)] * kernels.filter(c)[l]);
                }
                rhs_re[p] = acc.re;
                rhs_im[p] = acc.im;
            }
            let sol_re = chol.solve(&rhs_re);
            let sol_im = chol.solve(&rhs_im);
            for (p, source) in sources.iter_mut().enumerate() {
                source.as_mut_slice()[base + m] = Complex64::new(sol_re[p], sol_im[p]);
            }
        }
    }
    Ok(sources)
}

/// Least-squares mixing update with optional non-negative projection,
/// then column normalization. Real parts of the Hermitian accumulations
/// are taken before the per-channel solves since the model matrix is
/// real.
pub fn update_mixing(
    data: &[HarmonicCoeffs],
    kernels: &KernelSet,
    sources: &[HarmonicCoeffs],
    nonneg: bool,
) -> Result<MixingMatrix> {
    let l_max = kernels.l_max();
    let n_s = sources.len();
    let n_c = data.len();
    if n_c != kernels.n_channels() {
        return Err(Error::invalid("data channels do not match the kernel set"));
    }
    // per degree: multiplicity-weighted Re(Ŝ Ŝᴴ) and Re(Ŝ X̂ᴴ) sums
    let mut entries = DMatrix::zeros(n_c, n_s);
    for channel in 0..n_c {
        let filter = kernels.filter(channel);
        let mut gram = DMatrix::zeros(n_s, n_s);
        let mut rhs = DVector::zeros(n_s);
        for l in 0..=l_max {
            let h = filter[l];
            if h == 0.0 {
                continue;
            }
            let base = l * (l + 1) / 2;
            for m in 0..=l {
                let weight = if m == 0 { 1.0 } else { 2.0 };
                let x = data[channel].as_slice()[base + m];
                for p in 0..n_s {
                    let sp = sources[p].as_slice()[base + m];
                    rhs[p] += weight * h * (x * sp.conj()).re;
                    for q in p..n_s {
                        let sq = sources[q].as_slice()[base + m];
                        gram[(p, q)] += weight * h * h * (sp * sq.conj()).re;
                    }
                }
            }
        }
        for p in 0..n_s {
            for q in 0..p {
                gram[(p, q)] = gram[(q, p)];
            }
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::Numerical(format!("singular source Gram in the update of channel {channel}"))
        })?;
        entries.row_mut(channel).tr_copy_from(&chol.solve(&rhs));
    }
    let mut mixing = MixingMatrix::new(entries)?;
    if nonneg {
        mixing.clip_negatives();
    }
    mixing.normalize_columns()?;
    Ok(mixing)
}

/// Propagates white pixel noise of variance `sigma2` through the
/// regularized inversion and the given band filters:
/// `σ²_{n,j} = (σ²/N_p)·Σ_l (2l+1)·[(M+E)⁻¹M(M+E)⁻¹]_{nn}·ĥ_j(l)²`.
/// Off-diagonal covariance is ignored by construction.
pub fn noise_std_per_scale(
    mixing: &MixingMatrix,
    kernels: &KernelSet,
    reg: &RegParams,
    sigma2: f64,
    scale_filters: &[&[f64]],
    n_pix: usize,
) -> Result<Vec<Vec<f64>>> {
    if sigma2 < 0.0 {
        return Err(Error::invalid("noise variance cannot be negative"));
    }
    let normal = build_normal_matrices(mixing, kernels)?;
    let n_s = mixing.n_sources();
    let l_max = kernels.l_max();
    // diagonal of the per-degree propagation matrix
    let mut amplification = vec![vec![0.0; n_s]; l_max + 1];
    for l in 0..=l_max {
        let mut system = normal.at(l).clone();
        for n in 0..n_s {
            system[(n, n)] += reg.value(n, l);
        }
        let chol = Cholesky::new(system).ok_or(Error::SingularSystem { l })?;
        let inv = chol.inverse();
        let propagated = &inv * normal.at(l) * &inv;
        for n in 0..n_s {
            amplification[l][n] = propagated[(n, n)];
        }
    }
    Ok((0..n_s)
        .map(|n| {
            scale_filters
                .iter()
                .map(|filter| {
                    let sum: f64 = (0..=l_max)
                        .map(|l| {
                            (2 * l + 1) as f64
                                * amplification[l][n]
                                * filter[l]
                                * filter[l]
                        })
                        .sum();
                    (sigma2 / n_pix as f64 * sum).sqrt()
                })
                .collect()
        })
        .collect())
}

/// Median-absolute-deviation noise estimate: the finest detail scale of
/// each source estimate yields `MAD/0.6745`, propagated to the other
/// scales by the analytic per-scale ratios computed at unit variance.
pub fn estimate_sigma_mad(
    bands: &[StarletDecomposition<Map>],
    unit_sigma: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    bands
        .iter()
        .zip(unit_sigma)
        .map(|(decomp, unit)| {
            let finest = mad(&decomp.details[0].values) / 0.6745;
            unit.iter()
                .map(|&u| {
                    if unit[0] > 0.0 {
                        finest * u / unit[0]
                    } else {
                        finest
                    }
                })
                .collect()
        })
        .collect()
}

fn mad(values: &[f64]) -> f64 {
    let center = median(values.to_vec());
    median(values.iter().map(|v| (v - center).abs()).collect())
}

fn median(mut values: Vec<f64>) -> f64 {
    let mid = values.len() / 2;
    let (_, pivot, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let high = *pivot;
    if values.len() % 2 == 1 {
        high
    } else {
        let low = values[..mid]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (low + high)
    }
}

/// Per-coefficient thresholds from the `k·σ` noise floor, the
/// keep-a-fraction support rule, and optional ℓ1-reweighting against the
/// previous iterate:
///
/// * `T = k·σ_{n,j}`; among the `C` coefficients with `|x| ≥ T`, the base
///   threshold is the `⌊support·C⌋`-th largest magnitude (at least the
///   single largest; `T` itself when `C = 0`);
/// * with a previous iterate, each coefficient gets
///   `Λ = base / (1 + |prev|/base)`.
pub fn compute_thresholds(
    bands: &[StarletDecomposition<Map>],
    sigma: &[Vec<f64>],
    k: f64,
    support: f64,
    previous: Option<&[StarletDecomposition<Map>]>,
) -> Result<Thresholds> {
    if k <= 0.0 || !(0.0..=1.0).contains(&support) {
        return Err(Error::invalid(
            "need k > 0 and a support fraction in [0, 1]",
        ));
    }
    if bands.is_empty() || bands.iter().any(|b| b.details.is_empty()) {
        return Err(Error::invalid("no detail bands to threshold"));
    }
    let values = bands
        .iter()
        .enumerate()
        .map(|(n, decomp)| {
            decomp
                .details
                .iter()
                .enumerate()
                .map(|(j, band)| {
                    let noise_floor = k * sigma[n][j];
                    let mut magnitudes: Vec<f64> =
                        band.values.iter().map(|v| v.abs()).collect();
                    let supra = magnitudes.iter().filter(|&&v| v >= noise_floor).count();
                    let base = if supra == 0 {
                        noise_floor
                    } else {
                        let keep = ((support * supra as f64).floor() as usize).max(1);
                        magnitudes.sort_unstable_by(|a, b| b.total_cmp(a));
                        magnitudes[keep - 1]
                    };
                    match previous {
                        Some(prev) if base > 0.0 => prev[n].details[j]
                            .values
                            .iter()
                            .map(|p| base / (1.0 + p.abs() / base))
                            .collect(),
                        _ => vec![base; band.values.len()],
                    }
                })
                .collect()
        })
        .collect();
    Ok(Thresholds { values })
}

/// Soft-thresholds the detail bands, passes the coarse band through,
/// reconstructs pixel sources (clipped at zero if `nonneg`), and returns
/// them with their plain-quadrature harmonic coefficients.
pub fn threshold_sources(
    bands: &[StarletDecomposition<Map>],
    thresholds: &Thresholds,
    nonneg: bool,
    grid: &SphereGrid,
) -> Result<(Vec<Map>, Vec<HarmonicCoeffs>)> {
    let mut maps = Vec::with_capacity(bands.len());
    let mut coeffs = Vec::with_capacity(bands.len());
    for (n, decomp) in bands.iter().enumerate() {
        let details = decomp
            .details
            .iter()
            .enumerate()
            .map(|(j, band)| {
                let lambda = thresholds.value(n, j);
                Map {
                    n_side: band.n_side,
                    values: band
                        .values
                        .iter()
                        .zip(lambda)
                        .map(|(&x, &t)| soft_threshold(x, t))
                        .collect(),
                }
            })
            .collect();
        let mut map = inverse_direct(&StarletDecomposition {
            details,
            coarse: decomp.coarse.clone(),
        })?;
        if nonneg {
            map.values.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        coeffs.push(analyze(&map, grid, 0)?);
        maps.push(map);
    }
    Ok((maps, coeffs))
}

/// Warm-up schedule: `c` decays log-linearly from `10·c_warmup` to
/// `c_warmup` while the support fraction climbs linearly from 0 to
/// `support_max`; both hold their endpoint afterwards.
pub(crate) fn warmup_schedule(
    iteration: usize,
    n_warmup: usize,
    c_warmup: f64,
    support_max: f64,
) -> (f64, f64) {
    if iteration >= n_warmup || n_warmup == 1 {
        return (c_warmup, support_max);
    }
    let t = (iteration - 1) as f64 / (n_warmup - 1) as f64;
    (c_warmup * 10f64.powf(1.0 - t), support_max * t)
}

/// How the driver builds `ε` in each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RegPlan {
    /// Amplification-capped warm-up, then the configured refinement rule.
    TwoStage,
    /// `ε ≡ 0` throughout: plain projected alternating least squares.
    Zero,
}

pub fn run_sdecgmca(dataset: &Dataset, config: &SolverConfig) -> Result<SolverOutput> {
    run_driver(dataset, config, RegPlan::TwoStage)
}

pub(crate) fn run_driver(
    dataset: &Dataset,
    config: &SolverConfig,
    plan: RegPlan,
) -> Result<SolverOutput> {
    config.validate()?;
    let grid = &dataset.grid;
    let l_max = grid.l_max();
    let kernels = dataset.kernels.normalize_to_best()?;
    let filters = StarletFilters::new(l_max, config.n_scales)?;
    let detail_pass = detail_pass_filter(&filters);
    let separation_data = dataset
        .coeffs
        .iter()
        .map(|c| convolve(c, &detail_pass))
        .collect::<Result<Vec<_>>>()?;
    let scale_filters: Vec<&[f64]> =
        (0..filters.n_scales()).map(|j| filters.detail(j)).collect();
    let noise_spectrum = white_noise_spectrum(&config.noise, l_max, grid.n_pix());

    let mut mixing = pca_init(dataset, config.n_sources, config.n_scales, config.nonneg_a)?;
    let mut source_coeffs: Vec<HarmonicCoeffs> =
        vec![HarmonicCoeffs::zero(l_max); config.n_sources];
    let mut ls_estimate = source_coeffs.clone();
    let mut previous_bands: Option<Vec<StarletDecomposition<Map>>> = None;
    let mut diagnostics = Vec::new();
    let mut converged = true;
    let mut iteration = 0usize;

    // warm-up: annealed amplification cap, growing support, no
    // reweighting, no |source| constraint yet
    let mut warmed_up = false;
    for step in 1..=config.max_warmup_iters {
        iteration += 1;
        let (c, support) = warmup_schedule(step, config.n_warmup, config.c_warmup, config.support_max);
        let reg = match plan {
            RegPlan::TwoStage => {
                let normal = build_normal_matrices(&mixing, &kernels)?;
                strategy3(c, &normal, &mixing)?
            }
            RegPlan::Zero => strategy1(0.0, config.n_sources, l_max)?,
        };
        let ls = update_sources_ls(&separation_data, &kernels, &mixing, &reg)?;
        let bands = decompose_all(&ls, &filters, grid)?;
        let sigma = band_noise(
            &config.noise,
            &mixing,
            &kernels,
            &reg,
            &scale_filters,
            grid.n_pix(),
            &bands,
        )?;
        let thresholds = compute_thresholds(&bands, &sigma, config.k, support, None)?;
        let (_, new_coeffs) = threshold_sources(&bands, &thresholds, false, grid)?;
        let rel = relative_change(&new_coeffs, &source_coeffs);
        // the first schedule steps can zero a source outright (support
        // fraction 0 keeps one coefficient, which the soft threshold then
        // consumes); the mixing update waits until every source is live
        if new_coeffs.iter().all(|s| s.norm_sq() > 0.0) {
            mixing = update_mixing(&separation_data, &kernels, &new_coeffs, config.nonneg_a)?;
        }
        source_coeffs = new_coeffs;
        ls_estimate = ls;
        previous_bands = Some(bands);
        diagnostics.push(IterationRecord {
            iteration,
            stage: Stage::Warmup,
            c: if plan == RegPlan::Zero { 0.0 } else { c },
            support,
            rel_change: rel,
        });
        if step >= config.n_warmup && rel <= config.eps_warmup {
            warmed_up = true;
            break;
        }
    }
    converged &= warmed_up;

    // refinement: spectrum-matched (or largest-eigenvalue) regularization,
    // full support fraction, reweighting, optional non-negative sources
    let mut refined = false;
    for _ in 0..config.max_refine_iters {
        iteration += 1;
        let reg = refinement_reg(
            plan,
            config,
            &mixing,
            &kernels,
            &ls_estimate,
            &noise_spectrum,
        )?;
        let ls = update_sources_ls(&separation_data, &kernels, &mixing, &reg)?;
        let bands = decompose_all(&ls, &filters, grid)?;
        let sigma = band_noise(
            &config.noise,
            &mixing,
            &kernels,
            &reg,
            &scale_filters,
            grid.n_pix(),
            &bands,
        )?;
        let thresholds = compute_thresholds(
            &bands,
            &sigma,
            config.k,
            config.support_max,
            previous_bands.as_deref(),
        )?;
        let (_, new_coeffs) = threshold_sources(&bands, &thresholds, config.nonneg_s, grid)?;
        let rel = relative_change(&new_coeffs, &source_coeffs);
        if new_coeffs.iter().all(|s| s.norm_sq() > 0.0) {
            mixing = update_mixing(&separation_data, &kernels, &new_coeffs, config.nonneg_a)?;
        }
        source_coeffs = new_coeffs;
        ls_estimate = ls;
        previous_bands = Some(bands);
        diagnostics.push(IterationRecord {
            iteration,
            stage: Stage::Refinement,
            c: if plan == RegPlan::Zero { 0.0 } else { config.c_refine },
            support: config.support_max,
            rel_change: rel,
        });
        if rel <= config.eps_refine {
            refined = true;
            break;
        }
    }
    converged &= refined;

    // the sources are re-estimated against the raw data (coarse scales
    // back in) with the mixing matrix frozen
    let final_run = final_refine_with_plan(dataset, &mixing, &source_coeffs, config, plan)?;
    for record in final_run.diagnostics {
        iteration += 1;
        diagnostics.push(IterationRecord { iteration, ..record });
    }
    Ok(SolverOutput {
        mixing,
        sources: final_run.sources,
        source_coeffs: final_run.source_coeffs,
        diagnostics,
        converged: converged && final_run.converged,
    })
}

/// Re-estimates the sources on the full data with the mixing matrix
/// fixed: every supra-noise coefficient is kept (support fraction 1),
/// reweighting and the non-negativity flag stay active, and the coarse
/// scales pass straight through the thresholding into the estimate.
pub fn final_refine(
    dataset: &Dataset,
    mixing: &MixingMatrix,
    initial: &[HarmonicCoeffs],
    config: &SolverConfig,
) -> Result<SolverOutput> {
    final_refine_with_plan(dataset, mixing, initial, config, RegPlan::TwoStage)
}

pub(crate) fn final_refine_with_plan(
    dataset: &Dataset,
    mixing: &MixingMatrix,
    initial: &[HarmonicCoeffs],
    config: &SolverConfig,
    plan: RegPlan,
) -> Result<SolverOutput> {
    config.validate()?;
    let grid = &dataset.grid;
    let kernels = dataset.kernels.normalize_to_best()?;
    let filters = StarletFilters::new(grid.l_max(), config.n_scales)?;
    let scale_filters: Vec<&[f64]> =
        (0..filters.n_scales()).map(|j| filters.detail(j)).collect();
    let noise_spectrum = white_noise_spectrum(&config.noise, grid.l_max(), grid.n_pix());
    let mut source_coeffs = initial.to_vec();
    let mut sources: Vec<Map> = Vec::new();
    let mut previous_bands: Option<Vec<StarletDecomposition<Map>>> = None;
    let mut diagnostics = Vec::new();
    let mut converged = false;
    for step in 1..=config.max_refine_iters {
        let reg = refinement_reg(
            plan,
            config,
            mixing,
            &kernels,
            &source_coeffs,
            &noise_spectrum,
        )?;
        let ls = update_sources_ls(&dataset.coeffs, &kernels, mixing, &reg)?;
        let bands = decompose_all(&ls, &filters, grid)?;
        let sigma = band_noise(
            &config.noise,
            mixing,
            &kernels,
            &reg,
            &scale_filters,
            grid.n_pix(),
            &bands,
        )?;
        let thresholds =
            compute_thresholds(&bands, &sigma, config.k, 1.0, previous_bands.as_deref())?;
        let (new_sources, new_coeffs) =
            threshold_sources(&bands, &thresholds, config.nonneg_s, grid)?;
        let rel = relative_change(&new_coeffs, &source_coeffs);
        sources = new_sources;
        source_coeffs = new_coeffs;
        previous_bands = Some(bands);
        diagnostics.push(IterationRecord {
            iteration: step,
            stage: Stage::Refinement,
            c: if plan == RegPlan::Zero { 0.0 } else { config.c_refine },
            support: 1.0,
            rel_change: rel,
        });
        if rel <= config.eps_refine {
            converged = true;
            break;
        }
    }
    Ok(SolverOutput {
        mixing: mixing.clone(),
        sources,
        source_coeffs,
        diagnostics,
        converged,
    })
}

/// Source estimation with the mixing matrix known: one stage of
/// regularized updates and thresholding at the full support fraction with
/// reweighting, under the requested strategy. Strategy 4 uses the
/// ground-truth source spectra.
pub fn run_nonblind(
    dataset: &Dataset,
    mixing: &MixingMatrix,
    strategy_id: u8,
    c: f64,
    config: &SolverConfig,
) -> Result<SolverOutput> {
    config.validate()?;
    let grid = &dataset.grid;
    let l_max = grid.l_max();
    let kernels = dataset.kernels.normalize_to_best()?;
    let filters = StarletFilters::new(l_max, config.n_scales)?;
    let scale_filters: Vec<&[f64]> =
        (0..filters.n_scales()).map(|j| filters.detail(j)).collect();
    let truth_spectra: Option<Vec<PowerSpectrum>> = dataset
        .ground_truth
        .as_ref()
        .map(|t| t.source_coeffs.iter().map(power_spectrum).collect());
    let noise_spectrum = white_noise_spectrum(&config.noise, l_max, grid.n_pix());
    let reg = match strategy_id {
        1 => strategy1(c, config.n_sources, l_max)?,
        2 => {
            let normal = build_normal_matrices(mixing, &kernels)?;
            strategy2(c, &normal)?
        }
        3 => {
            let normal = build_normal_matrices(mixing, &kernels)?;
            strategy3(c, &normal, mixing)?
        }
        4 => {
            let spectra = truth_spectra.as_ref().ok_or_else(|| {
                Error::invalid("spectrum-matched strategy needs ground-truth spectra")
            })?;
            strategy4(c, spectra, &noise_spectrum)?
        }
        other => {
            return Err(Error::invalid(format!(
                "strategy id {other} outside 1..=4"
            )))
        }
    };
    let mut source_coeffs: Vec<HarmonicCoeffs> =
        vec![HarmonicCoeffs::zero(l_max); config.n_sources];
    let mut sources: Vec<Map> = Vec::new();
    let mut previous_bands: Option<Vec<StarletDecomposition<Map>>> = None;
    let mut diagnostics = Vec::new();
    let mut converged = false;
    for step in 1..=config.max_refine_iters {
        let ls = update_sources_ls(&dataset.coeffs, &kernels, mixing, &reg)?;
        let bands = decompose_all(&ls, &filters, grid)?;
        let sigma = band_noise(
            &config.noise,
            mixing,
            &kernels,
            &reg,
            &scale_filters,
            grid.n_pix(),
            &bands,
        )?;
        let thresholds = compute_thresholds(
            &bands,
            &sigma,
            config.k,
            config.support_max,
            previous_bands.as_deref(),
        )?;
        let (new_sources, new_coeffs) =
            threshold_sources(&bands, &thresholds, config.nonneg_s, grid)?;
        let rel = relative_change(&new_coeffs, &source_coeffs);
        sources = new_sources;
        source_coeffs = new_coeffs;
        previous_bands = Some(bands);
        diagnostics.push(IterationRecord {
            iteration: step,
            stage: Stage::Refinement,
            c,
            support: config.support_max,
            rel_change: rel,
        });
        if rel <= config.eps_refine {
            converged = true;
            break;
        }
    }
    Ok(SolverOutput {
        mixing: mixing.clone(),
        sources,
        source_coeffs,
        diagnostics,
        converged,
    })
}

/// Sum of the detail filters: all-pass minus the coarse low-pass.
fn detail_pass_filter(filters: &StarletFilters) -> Vec<f64> {
    filters.coarse().iter().map(|c| 1.0 - c).collect()
}

fn white_noise_spectrum(noise: &NoiseEstimate, l_max: usize, n_pix: usize) -> PowerSpectrum {
    let sigma2 = match noise {
        NoiseEstimate::Analytic(s) => *s,
        NoiseEstimate::Mad => 0.0,
    };
    PowerSpectrum {
        values: vec![4.0 * std::f64::consts::PI * sigma2 / n_pix as f64; l_max + 1],
    }
}

fn refinement_reg(
    plan: RegPlan,
    config: &SolverConfig,
    mixing: &MixingMatrix,
    kernels: &KernelSet,
    spectra_source: &[HarmonicCoeffs],
    noise_spectrum: &PowerSpectrum,
) -> Result<RegParams> {
    match plan {
        RegPlan::Zero => strategy1(0.0, config.n_sources, kernels.l_max()),
        RegPlan::TwoStage => match config.refinement {
            RefinementStrategy::LargestEigenvalue => {
                let normal = build_normal_matrices(mixing, kernels)?;
                strategy2(config.c_refine, &normal)
            }
            RefinementStrategy::SpectrumRatio => {
                let spectra: Vec<PowerSpectrum> =
                    spectra_source.iter().map(power_spectrum).collect();
                strategy4(config.c_refine, &spectra, noise_spectrum)
            }
        },
    }
}

fn decompose_all(
    sources: &[HarmonicCoeffs],
    filters: &StarletFilters,
    grid: &SphereGrid,
) -> Result<Vec<StarletDecomposition<Map>>> {
    sources
        .iter()
        .map(|s| forward_direct(s, filters, grid))
        .collect()
}

fn band_noise(
    noise: &NoiseEstimate,
    mixing: &MixingMatrix,
    kernels: &KernelSet,
    reg: &RegParams,
    scale_filters: &[&[f64]],
    n_pix: usize,
    bands: &[StarletDecomposition<Map>],
) -> Result<Vec<Vec<f64>>> {
    match noise {
        NoiseEstimate::Analytic(sigma2) => {
            noise_std_per_scale(mixing, kernels, reg, *sigma2, scale_filters, n_pix)
        }
        NoiseEstimate::Mad => {
            let unit =
                noise_std_per_scale(mixing, kernels, reg, 1.0, scale_filters, n_pix)?;
            Ok(estimate_sigma_mad(bands, &unit))
        }
    }
}

/// `‖new − old‖ / ‖new‖` over all sources, in the multiplicity-weighted
/// coefficient norm.
fn relative_change(new: &[HarmonicCoeffs], old: &[HarmonicCoeffs]) -> f64 {
    let mut diff = 0.0;
    let mut scale = 0.0;
    for (n, o) in new.iter().zip(old) {
        scale += n.norm_sq();
        diff += n.sub(o).map(|d| d.norm_sq()).unwrap_or(f64::INFINITY);
    }
    if scale == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (diff / scale).sqrt()
}
