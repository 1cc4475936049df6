//! Non-deconvolving comparison methods. Both first bring the observations
//! to the common worst resolution: GMCA reuses the sparse separation
//! machinery with all-pass kernels and no Tikhonov regularization, HALS is
//! a plain non-negative matrix factorization in pixel space.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{degrade_to_worst, Dataset, MixingMatrix};
use crate::solver::{run_driver, NoiseEstimate, RegPlan, SolverConfig};
use crate::sphere::Map;

/// Output of a baseline run: mixing estimate and sources at the common
/// (worst) resolution.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub mixing: MixingMatrix,
    pub sources: Vec<Map>,
    pub iterations: usize,
    pub converged: bool,
}

/// Sparse blind separation without deconvolution: degrades the data to
/// the worst channel's resolution (a no-op when it is already there) and
/// runs the two-stage solver with the kernels normalized away and `ε ≡ 0`,
/// which reduces every source update to a plain projected least-squares
/// step. Noise is always estimated by MAD: degradation colors the pixel
/// noise, so the analytic white-noise propagation no longer applies.
pub fn run_gmca(dataset: &Dataset, config: &SolverConfig) -> Result<BaselineResult> {
    let degraded = degrade_to_worst(dataset)?;
    let mut cfg = config.clone();
    cfg.noise = NoiseEstimate::Mad;
    let out = run_driver(&degraded, &cfg, RegPlan::Zero)?;
    Ok(BaselineResult {
        mixing: out.mixing,
        sources: out.sources,
        iterations: out.diagnostics.len(),
        converged: out.converged,
    })
}

/// Hierarchical alternating least squares NMF on the degraded
/// observations: exact non-negative updates of one source row and one
/// mixing column at a time, cycled until the fit stalls (relative
/// objective change below 1e−6) or `max_iters` sweeps pass.
///
/// The factorization model is non-negative on both sides, so negative
/// pixels (noise does produce them) are clipped to zero first, with a
/// warning on stderr when that discards anything. The returned mixing
/// matrix has unit-norm columns, the compensating scales folded into the
/// sources.
pub fn run_hals(
    dataset: &Dataset,
    n_sources: usize,
    max_iters: usize,
    seed: u64,
) -> Result<BaselineResult> {
    if n_sources == 0 || n_sources > dataset.n_channels() {
        return Err(Error::invalid(format!(
            "need 1..={} sources, got {n_sources}",
            dataset.n_channels()
        )));
    }
    let degraded = degrade_to_worst(dataset)?;
    let n_channels = degraded.n_channels();
    let n_pix = degraded.grid.n_pix();
    let mut clipped = 0usize;
    let x = DMatrix::from_fn(n_channels, n_pix, |c, p| {
        let v = degraded.maps[c].values[p];
        if v < 0.0 {
            clipped += 1;
            0.0
        } else {
            v
        }
    });
    if clipped > 0 {
        eprintln!("warning: clipped {clipped} negative pixels before the factorization");
    }
    let (mut a, mut s, iterations, converged) = nmf(&x, n_sources, max_iters, seed);
    for n in 0..n_sources {
        let norm = a.column(n).norm();
        if norm > 0.0 {
            a.column_mut(n).scale_mut(1.0 / norm);
            s.row_mut(n).scale_mut(norm);
        }
    }
    let sources = (0..n_sources)
        .map(|n| {
            Map::new(
                degraded.grid.n_side(),
                s.row(n).iter().cloned().collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineResult {
        mixing: MixingMatrix::new(a)?,
        sources,
        iterations,
        converged,
    })
}

/// The factorization loop on a plain matrix: `A` starts from seeded
/// non-negative randoms with unit columns, `S` from zero (the first sweep
/// sets it to its exact non-negative update). Each block update minimizes
/// `‖X − AS‖²_F` exactly over its block, so the objective never increases;
/// a component whose scale column or row collapses to zero is re-seeded
/// from the residual, falling back to randoms when the residual has no
/// positive part to offer.
fn nmf(
    x: &DMatrix<f64>,
    n_sources: usize,
    max_iters: usize,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>, usize, bool) {
    let (n_channels, n_pix) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n_channels, n_sources, |_, _| rng.random::<f64>() + 0.1);
    for n in 0..n_sources {
        let norm = a.column(n).norm();
        a.column_mut(n).scale_mut(1.0 / norm);
    }
    let mut s = DMatrix::zeros(n_sources, n_pix);
    let mut residual = x.clone();
    let mut objective = residual.norm_squared();
    for sweep in 1..=max_iters {
        for n in 0..n_sources {
            let denom = a.column(n).norm_squared();
            if denom == 0.0 {
                reseed_column(&mut a, &mut residual, &s, n, &mut rng);
            }
            let denom = a.column(n).norm_squared();
            let mut row = s.row(n).into_owned();
            let update = (a.column(n).transpose() * &residual) / denom;
            let mut delta = update;
            for (d, old) in delta.iter_mut().zip(row.iter()) {
                *d = (old + *d).max(0.0) - old;
            }
            row += &delta;
            residual -= a.column(n) * &delta;
            s.set_row(n, &row);
        }
        for n in 0..n_sources {
            let denom = s.row(n).norm_squared();
            if denom == 0.0 {
                reseed_row(&mut s, &mut residual, &a, n, &mut rng);
            }
            let denom = s.row(n).norm_squared();
            let mut col = a.column(n).into_owned();
            let update = (&residual * s.row(n).transpose()) / denom;
            let mut delta = update;
            for (d, old) in delta.iter_mut().zip(col.iter()) {
                *d = (old + *d).max(0.0) - old;
            }
            col += &delta;
            residual -= &delta * s.row(n);
            a.set_column(n, &col);
        }
        let next = residual.norm_squared();
        debug_assert!(
            next <= objective * (1.0 + 1e-9) + 1e-30,
            "objective rose from {objective} to {next} at sweep {sweep}"
        );
        let stalled = next == 0.0 || (objective - next).abs() <= 1e-6 * objective;
        objective = next;
        if stalled {
            return (a, s, sweep, true);
        }
    }
    (a, s, max_iters, false)
}

/// A dead mixing column takes the non-negative part of the residual's
/// projection onto its source row, or fresh randoms when that is zero too.
fn reseed_column(
    a: &mut DMatrix<f64>,
    residual: &mut DMatrix<f64>,
    s: &DMatrix<f64>,
    n: usize,
    rng: &mut impl Rng,
) {
    let denom = s.row(n).norm_squared();
    let mut col: DVector<f64> = if denom > 0.0 {
        (&*residual * s.row(n).transpose() / denom).map(|v| v.max(0.0))
    } else {
        DVector::zeros(a.nrows())
    };
    if col.iter().all(|&v| v == 0.0) {
        col = DVector::from_fn(a.nrows(), |_, _| rng.random::<f64>() + 0.1);
        let norm = col.norm();
        col.scale_mut(1.0 / norm);
    }
    *residual -= &col * s.row(n);
    a.set_column(n, &col);
}

/// A dead source row takes the non-negative part of the residual seen
/// through its mixing column, or fresh randoms.
fn reseed_row(
    s: &mut DMatrix<f64>,
    residual: &mut DMatrix<f64>,
    a: &DMatrix<f64>,
    n: usize,
    rng: &mut impl Rng,
) {
    let denom = a.column(n).norm_squared();
    let mut row: RowDVector<f64> = if denom > 0.0 {
        (a.column(n).transpose() * &*residual / denom).map(|v| v.max(0.0))
    } else {
        RowDVector::zeros(s.ncols())
    };
    if row.iter().all(|&v| v == 0.0) {
        row = RowDVector::from_fn(s.ncols(), |_, _| rng.random::<f64>());
    }
    *residual -= a.column(n) * &row;
    s.set_row(n, &row);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{align, c_a};
    use crate::model::{random_mixing, GroundTruth, KernelSet};
    use crate::sphere::{analyze, convolve, synthesize, HarmonicCoeffs, SphereGrid};
    use crate::starlet::StarletFilters;
    use approx::assert_relative_eq;

    /// Noiseless orthogonal mixtures of strictly positive sparse sources
    /// at a single common resolution: narrow wavelet atoms on opposite
    /// hemispheres plus a constant offset, mixed exactly in the harmonic
    /// domain.
    fn orthogonal_dataset(seed: u64) -> Dataset {
        orthogonal_dataset_sized(seed, 16)
    }

    fn orthogonal_dataset_sized(seed: u64, n_side: usize) -> Dataset {
        let grid = SphereGrid::new(n_side).unwrap();
        let l_max = grid.l_max();
        let filters = StarletFilters::new(l_max, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sources = Vec::new();
        let mut source_coeffs = Vec::new();
        for n in 0..2usize {
            // atoms confined to opposite polar caps, keeping the sources'
            // side lobes from leaking into each other
            let mut spikes = vec![0.0; grid.n_pix()];
            for _ in 0..6 {
                let p = n * 3 * grid.n_pix() / 4 + rng.random_range(0..grid.n_pix() / 4);
                spikes[p] = 1.0 + rng.random::<f64>();
            }
            let mut coeffs = convolve(
                &analyze(&Map::new(n_side, spikes).unwrap(), &grid, 2).unwrap(),
                filters.detail(1),
            )
            .unwrap();
            let map = synthesize(&coeffs, &grid).unwrap();
            let floor = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let offset = 1.1 * (-floor).max(0.01);
            coeffs.set(
                0,
                0,
                coeffs.get(0, 0)
                    + num_complex::Complex64::new(
                        offset * (4.0 * std::f64::consts::PI).sqrt(),
                        0.0,
                    ),
            );
            let mut map = map;
            map.values.iter_mut().for_each(|v| *v += offset);
            source_coeffs.push(coeffs);
            sources.push(map);
        }
        let mixing = random_mixing(4, 2, 1.0, &mut rng).unwrap();
        let mut coeffs = Vec::new();
        let mut maps = Vec::new();
        for c in 0..4 {
            let mut mixed = HarmonicCoeffs::zero(l_max);
            for (n, s) in source_coeffs.iter().enumerate() {
                let w = mixing.entries[(c, n)];
                for (acc, v) in mixed.as_mut_slice().iter_mut().zip(s.as_slice()) {
                    *acc += v * w;
                }
            }
            maps.push(synthesize(&mixed, &grid).unwrap());
            coeffs.push(mixed);
        }
        Dataset {
            grid,
            maps,
            coeffs,
            kernels: KernelSet::identity(4, l_max),
            sigma2: 0.0,
            ground_truth: Some(GroundTruth {
                mixing,
                sources,
                source_coeffs,
            }),
        }
    }

    fn quick_config() -> SolverConfig {
        let mut config = SolverConfig::new(2, 0.0);
        config.n_warmup = 30;
        config.max_warmup_iters = 60;
        config.support_max = 0.75;
        config
    }

    #[test]
    fn gmca_recovers_orthogonal_noiseless_mixtures() {
        // a finer grid keeps the atoms well inside the band where the
        // plain-quadrature analysis is accurate, which is what bounds the
        // mixing error on noiseless data
        let dataset = orthogonal_dataset_sized(1, 32);
        let config = quick_config();
        let result = run_gmca(&dataset, &config).unwrap();
        let truth = dataset.ground_truth.as_ref().unwrap();
        for n in 0..2 {
            assert_relative_eq!(result.mixing.entries.column(n).norm(), 1.0, epsilon = 1e-12);
        }
        let (aligned, _, _, _) = align(&truth.mixing, &result.mixing, &result.sources).unwrap();
        let score = c_a(&truth.mixing, &aligned).unwrap();
        assert!(score > 40.0, "C_A {score:.1} dB");
    }

    #[test]
    fn gmca_commutes_with_a_global_rescaling() {
        let dataset = orthogonal_dataset(2);
        let beta = 37.0;
        let scaled = Dataset {
            maps: dataset
                .maps
                .iter()
                .map(|m| {
                    Map::new(16, m.values.iter().map(|v| beta * v).collect()).unwrap()
                })
                .collect(),
            coeffs: dataset
                .coeffs
                .iter()
                .map(|c| {
                    let mut out = c.clone();
                    out.as_mut_slice().iter_mut().for_each(|v| *v *= beta);
                    out
                })
                .collect(),
            ..dataset.clone()
        };
        let config = quick_config();
        let base = run_gmca(&dataset, &config).unwrap();
        let rescaled = run_gmca(&scaled, &config).unwrap();
        assert!(
            (&rescaled.mixing.entries - &base.mixing.entries).abs().max() < 1e-10,
            "mixing moved under rescaling"
        );
        for (a, b) in base.sources.iter().zip(&rescaled.sources) {
            let diff: f64 = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (beta * x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-8 * beta * a.norm().max(1.0), "sources off by {diff}");
        }
    }

    #[test]
    fn hals_reaches_an_exact_factorization_on_a_small_toy() {
        // separable sources: each row owns a disjoint support
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s_true = DMatrix::zeros(3, 30);
        for n in 0..3 {
            for p in 0..10 {
                s_true[(n, n * 10 + p)] = rng.random::<f64>() + 0.2;
            }
        }
        let a_true = DMatrix::from_fn(4, 3, |_, _| rng.random::<f64>() + 0.1);
        let x = &a_true * &s_true;
        let (a, s, sweeps, converged) = nmf(&x, 3, 500, 0);
        assert!(converged, "no convergence in {sweeps} sweeps");
        let objective = (&x - &a * &s).norm_squared();
        assert!(
            objective < 1e-8 * x.norm_squared(),
            "objective {objective:.3e} after {sweeps} sweeps"
        );
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!(s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn hals_recovers_a_rank_one_factorization_up_to_scale() {
        let a_true = DMatrix::from_fn(5, 1, |i, _| (i + 1) as f64);
        let s_true = DMatrix::from_fn(1, 12, |_, j| ((j % 4) + 1) as f64);
        let x = &a_true * &s_true;
        let (a, s, _, converged) = nmf(&x, 1, 200, 3);
        assert!(converged);
        assert!((&x - &a * &s).norm_squared() < 1e-16 * x.norm_squared());
        let cos = a.column(0).dot(&a_true.column(0)) / (a.column(0).norm() * a_true.norm());
        assert!(cos > 1.0 - 1e-8, "direction cosine {cos}");
    }

    #[test]
    fn hals_on_a_dataset_clips_normalizes_and_fits() {
        let dataset = orthogonal_dataset(7);
        let result = run_hals(&dataset, 2, 200, 11).unwrap();
        assert_eq!(result.sources.len(), 2);
        assert_eq!(result.sources[0].n_pix(), dataset.grid.n_pix());
        assert!(result.mixing.entries.iter().all(|&v| v >= 0.0));
        for n in 0..2 {
            assert_relative_eq!(result.mixing.entries.column(n).norm(), 1.0, epsilon = 1e-12);
            assert!(result.sources[n].values.iter().all(|&v| v >= 0.0));
        }
        // the clipped data matrix is essentially non-negative rank two, so
        // the fit must be near exact well before the sweep cap
        let clipped = DMatrix::from_fn(4, dataset.grid.n_pix(), |c, p| {
            dataset.maps[c].values[p].max(0.0)
        });
        let fitted = &result.mixing.entries
            * DMatrix::from_fn(2, dataset.grid.n_pix(), |n, p| result.sources[n].values[p]);
        let misfit = (&clipped - fitted).norm_squared() / clipped.norm_squared();
        assert!(misfit < 1e-4, "relative misfit {misfit:.3e}");
        assert!(run_hals(&dataset, 0, 10, 0).is_err());
        assert!(run_hals(&dataset, 5, 10, 0).is_err());
    }
}
