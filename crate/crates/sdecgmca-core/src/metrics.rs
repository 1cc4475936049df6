//! Separation quality metrics: source reconstruction error in dB (NMSE),
//! the same at the common degraded resolution (NMSE_w), and mixing-matrix
//! recovery (C_A), together with the permutation/sign alignment every one
//! of them presupposes. Estimated factors come out of a blind run in
//! arbitrary column order and sign; comparing them against ground truth
//! without aligning first makes the numbers meaningless.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::MixingMatrix;
use crate::sphere::{analyze, convolve, synthesize, Map, SphereGrid};

/// One evaluated run. `permutation[j]` is the index of the estimated
/// source assigned to ground-truth source `j` (a bijection), `sign_flips`
/// the ±1 factors applied alongside; `nmse_w_db` is absent for runs where
/// a degraded comparison makes no sense (single-resolution data).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub nmse_db: f64,
    pub nmse_w_db: Option<f64>,
    pub c_a_db: f64,
    pub permutation: Vec<usize>,
    pub sign_flips: Vec<f64>,
}

/// Resolves the permutation and sign ambiguity of a blind factorization:
/// greedily pairs estimated mixing columns with reference columns by
/// largest |cosine|, flips the estimate's signs so the paired correlations
/// come out non-negative, and reorders the sources consistently. Returns
/// the aligned `(mixing, sources)` plus the permutation (reference column
/// `j` took estimated column `permutation[j]`) and the applied signs.
pub fn align(
    reference: &MixingMatrix,
    mixing: &MixingMatrix,
    sources: &[Map],
) -> Result<(MixingMatrix, Vec<Map>, Vec<usize>, Vec<f64>)> {
    let n = reference.n_sources();
    if mixing.n_sources() != n || mixing.n_channels() != reference.n_channels() {
        return Err(Error::invalid(format!(
            "mixing shapes differ: {}x{} vs {}x{}",
            mixing.n_channels(),
            mixing.n_sources(),
            reference.n_channels(),
            reference.n_sources()
        )));
    }
    if sources.len() != n {
        return Err(Error::invalid(format!(
            "{} sources for a {n}-column mixing matrix",
            sources.len()
        )));
    }
    // cosine[i][j] between estimated column i and reference column j; a
    // zero column correlates with nothing and is assigned last
    let cosine: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let est = mixing.entries.column(i);
            (0..n)
                .map(|j| {
                    let truth = reference.entries.column(j);
                    let scale = est.norm() * truth.norm();
                    if scale == 0.0 {
                        0.0
                    } else {
                        est.dot(&truth) / scale
                    }
                })
                .collect()
        })
        .collect();
    let mut permutation = vec![usize::MAX; n];
    let mut signs = vec![0.0; n];
    let mut est_used = vec![false; n];
    let mut ref_used = vec![false; n];
    for _ in 0..n {
        let mut best = (0, 0, -1.0);
        for i in (0..n).filter(|&i| !est_used[i]) {
            for j in (0..n).filter(|&j| !ref_used[j]) {
                if cosine[i][j].abs() > best.2 {
                    best = (i, j, cosine[i][j].abs());
                }
            }
        }
        let (i, j, _) = best;
        est_used[i] = true;
        ref_used[j] = true;
        permutation[j] = i;
        signs[j] = if cosine[i][j] < 0.0 { -1.0 } else { 1.0 };
    }
    let entries = DMatrix::from_fn(reference.n_channels(), n, |r, j| {
        signs[j] * mixing.entries[(r, permutation[j])]
    });
    let maps = (0..n)
        .map(|j| {
            let src = &sources[permutation[j]];
            Map {
                n_side: src.n_side,
                values: src.values.iter().map(|v| signs[j] * v).collect(),
            }
        })
        .collect();
    Ok((MixingMatrix::new(entries)?, maps, permutation, signs))
}

/// `NMSE = −10·log₁₀(‖S* − S‖²_F / ‖S*‖²_F)` over all sources jointly, in
/// dB; higher is better and exact recovery gives `+∞`.
pub fn nmse(reference: &[Map], estimate: &[Map]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "{} reference sources vs {} estimates",
            reference.len(),
            estimate.len()
        )));
    }
    let mut err = 0.0;
    let mut scale = 0.0;
    for (truth, est) in reference.iter().zip(estimate) {
        if truth.values.len() != est.values.len() {
            return Err(Error::invalid("source maps differ in size"));
        }
        err += truth
            .values
            .iter()
            .zip(&est.values)
            .map(|(t, e)| (t - e) * (t - e))
            .sum::<f64>();
        scale += truth.values.iter().map(|v| v * v).sum::<f64>();
    }
    if scale == 0.0 {
        return Err(Error::invalid("reference sources are identically zero"));
    }
    Ok(if err == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (err / scale).log10()
    })
}

/// Blurs a map with an isotropic kernel. Estimates at the target (best)
/// resolution go through this before [`nmse_w`] so they are compared at
/// the same resolution as the degraded reference.
pub fn blur_map(map: &Map, kernel: &[f64], grid: &SphereGrid) -> Result<Map> {
    synthesize(&convolve(&analyze(map, grid, 2)?, kernel)?, grid)
}

/// NMSE against the reference sources degraded to the worst channel
/// resolution: `−10·log₁₀(‖H_w S* − S‖²_F / ‖H_w S*‖²_F)`. The estimate
/// must already live at that resolution (methods separating at full
/// resolution blur their output with [`blur_map`] first).
pub fn nmse_w(
    reference: &[Map],
    estimate: &[Map],
    worst_kernel: &[f64],
    grid: &SphereGrid,
) -> Result<f64> {
    let degraded = reference
        .iter()
        .map(|s| blur_map(s, worst_kernel, grid))
        .collect::<Result<Vec<_>>>()?;
    nmse(&degraded, estimate)
}

/// `C_A = −10·log₁₀(mean |A⁺A* − I|)` in dB, the mean running over all
/// `N_s²` entries; `A⁺` is the pseudo-inverse of the (aligned) estimate.
/// Exact recovery gives `+∞`; a rank-deficient estimate has no
/// pseudo-inverse worth reporting and is rejected.
pub fn c_a(reference: &MixingMatrix, estimate: &MixingMatrix) -> Result<f64> {
    if estimate.n_channels() != reference.n_channels()
        || estimate.n_sources() != reference.n_sources()
    {
        return Err(Error::invalid(format!(
            "mixing shapes differ: {}x{} vs {}x{}",
            estimate.n_channels(),
            estimate.n_sources(),
            reference.n_channels(),
            reference.n_sources()
        )));
    }
    let n = reference.n_sources();
    let product = pinv(&estimate.entries)? * &reference.entries;
    let mean = (product - DMatrix::identity(n, n)).abs().sum() / (n * n) as f64;
    Ok(if mean == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mean.log10()
    })
}

/// Moore-Penrose pseudo-inverse through the SVD, rejecting rank-deficient
/// input instead of truncating it.
fn pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    if max == 0.0 || svd.singular_values.min() <= 1e-12 * max {
        return Err(Error::invalid(
            "rank-deficient mixing matrix has no usable pseudo-inverse",
        ));
    }
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let mut ut = u.transpose();
    for (i, mut row) in ut.row_iter_mut().enumerate() {
        let s = svd.singular_values[i];
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(v_t.transpose() * ut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::HarmonicCoeffs;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn map_of(values: Vec<f64>) -> Map {
        Map { n_side: 0, values }
    }

    fn mixing_of(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> MixingMatrix {
        MixingMatrix::new(DMatrix::from_fn(rows, cols, f)).unwrap()
    }

    #[test]
    fn align_is_the_identity_on_identical_factors() {
        let a = mixing_of(4, 2, |i, j| (i * 2 + j + 1) as f64);
        let s = vec![map_of(vec![1.0, 2.0]), map_of(vec![3.0, 4.0])];
        let (aligned, maps, perm, signs) = align(&a, &a, &s).unwrap();
        assert_eq!(aligned.entries, a.entries);
        assert_eq!(perm, vec![0, 1]);
        assert_eq!(signs, vec![1.0, 1.0]);
        assert_eq!(maps[0].values, s[0].values);
    }

    #[test]
    fn align_undoes_a_column_swap() {
        let truth = mixing_of(3, 2, |i, j| if j == 0 { (i + 1) as f64 } else { 1.0 });
        let swapped = mixing_of(3, 2, |i, j| truth.entries[(i, 1 - j)]);
        let s = vec![map_of(vec![9.0]), map_of(vec![7.0])];
        let (aligned, maps, perm, signs) = align(&truth, &swapped, &s).unwrap();
        assert_eq!(aligned.entries, truth.entries);
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(signs, vec![1.0, 1.0]);
        assert_eq!(maps[0].values, vec![7.0]);
        assert_eq!(maps[1].values, vec![9.0]);
    }

    #[test]
    fn align_recovers_every_permutation_and_sign_pattern() {
        // orthogonal reference columns so the assignment is unambiguous
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5);
        let truth = MixingMatrix::new(raw.qr().q()).unwrap();
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            for bits in 0..8u32 {
                let sign = |j: usize| if bits & (1 << j) != 0 { -1.0 } else { 1.0 };
                // estimated column i carries truth column perm[i], flipped
                let est = mixing_of(5, 3, |r, i| sign(i) * truth.entries[(r, perm[i])]);
                let maps: Vec<Map> =
                    (0..3).map(|i| map_of(vec![sign(i) * perm[i] as f64])).collect();
                let (aligned, sources, p, signs) = align(&truth, &est, &maps).unwrap();
                assert!((aligned.entries.clone() - truth.entries.clone()).abs().max() < 1e-12);
                for j in 0..3 {
                    // reference j must have taken the estimate that holds it
                    assert_eq!(perm[p[j]], j);
                    assert_eq!(signs[j], sign(p[j]));
                    assert_relative_eq!(sources[j].values[0], j as f64, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn nmse_hits_its_closed_form_values() {
        let truth = vec![map_of(vec![3.0, 0.0]), map_of(vec![0.0, 4.0])];
        assert_eq!(nmse(&truth, &truth).unwrap(), f64::INFINITY);
        let zero = vec![map_of(vec![0.0, 0.0]), map_of(vec![0.0, 0.0])];
        assert_relative_eq!(nmse(&truth, &zero).unwrap(), 0.0);
        // a 10% amplitude error everywhere is exactly 1% of the energy
        let off = vec![map_of(vec![3.3, 0.0]), map_of(vec![0.0, 4.4])];
        assert_relative_eq!(nmse(&truth, &off).unwrap(), 20.0, epsilon = 1e-12);
        assert!(nmse(&zero, &truth).is_err());
        assert!(nmse(&truth, &truth[..1]).is_err());
    }

    #[test]
    fn degraded_nmse_reduces_to_nmse_for_identity_kernels() {
        let grid = SphereGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // band-limited truth, so the analysis inside the blur is lossless
        let truth: Vec<Map> = (0..2)
            .map(|_| {
                let mut c = HarmonicCoeffs::zero(grid.l_max());
                for l in 0..=grid.l_max() {
                    for m in 0..=l {
                        let re = rng.random::<f64>() - 0.5;
                        let im = if m == 0 { 0.0 } else { rng.random::<f64>() - 0.5 };
                        c.set(l, m, num_complex::Complex64::new(re, im));
                    }
                }
                synthesize(&c, &grid).unwrap()
            })
            .collect();
        let kernel = vec![1.0; grid.l_max() + 1];
        // blurred truth compares as exact, the blur being bit-reproducible
        let blurred: Vec<Map> = truth
            .iter()
            .map(|s| blur_map(s, &kernel, &grid).unwrap())
            .collect();
        assert_eq!(nmse_w(&truth, &blurred, &kernel, &grid).unwrap(), f64::INFINITY);
        let zero = vec![Map::zero(4), Map::zero(4)];
        assert_relative_eq!(
            nmse_w(&truth, &zero, &kernel, &grid).unwrap(),
            0.0,
            epsilon = 1e-9
        );
        // identity kernel: same score as the direct comparison
        let est: Vec<Map> = truth
            .iter()
            .map(|s| {
                Map::new(4, s.values.iter().map(|v| v * 1.05).collect()).unwrap()
            })
            .collect();
        assert_relative_eq!(
            nmse_w(&truth, &est, &kernel, &grid).unwrap(),
            nmse(&truth, &est).unwrap(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn mixing_criterion_hits_its_closed_form_values() {
        let eye = mixing_of(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(c_a(&eye, &eye).unwrap(), f64::INFINITY);
        // A = I, A* = I + E with |E| ≡ 0.01: mean |A⁺A* − I| is 0.01
        let reference = mixing_of(2, 2, |i, j| if i == j { 1.01 } else { 0.01 });
        assert_relative_eq!(c_a(&reference, &eye).unwrap(), 20.0, epsilon = 1e-10);
        let singular = mixing_of(2, 2, |_, _| 1.0);
        assert!(c_a(&eye, &singular).is_err());
    }

    #[test]
    fn mixing_criterion_ignores_simultaneous_column_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = mixing_of(5, 3, |_, _| rng.random::<f64>() + 0.1);
        let est = mixing_of(5, 3, |i, j| truth.entries[(i, j)] + 0.02 * rng.random::<f64>());
        let base = c_a(&truth, &est).unwrap();
        let perm = [2, 0, 1];
        let truth_p = mixing_of(5, 3, |i, j| truth.entries[(i, perm[j])]);
        let est_p = mixing_of(5, 3, |i, j| est.entries[(i, perm[j])]);
        assert_relative_eq!(c_a(&truth_p, &est_p).unwrap(), base, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pseudo_inverse_satisfies_the_moore_penrose_identities(
            seed in 0u64..1000,
            rows in 2usize..7,
            cols in 2usize..5,
        ) {
            prop_assume!(rows >= cols);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5);
            let sv = a.clone().singular_values();
            prop_assume!(sv.min() > 1e-6 * sv.max());
            let p = pinv(&a).unwrap();
            let tol = 1e-10;
            prop_assert!((&a * &p * &a - &a).abs().max() < tol);
            prop_assert!((&p * &a * &p - &p).abs().max() < tol);
            prop_assert!(((&a * &p).transpose() - &a * &p).abs().max() < tol);
            prop_assert!(((&p * &a).transpose() - &p * &a).abs().max() < tol);
        }
    }
}
