//! Disk layout for datasets, solver runs and experiment tables.
//!
//! Maps use a small binary record (magic, little-endian `n_side`, then
//! the pixels); matrices and tables are CSV with a header row; dataset
//! parameters live in `meta.json`; solver knobs come from a `key = value`
//! config file whose keys are exactly the [`SolverConfig`] field names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Dataset, GroundTruth, KernelSet, MixingMatrix, SimulateParams};
use crate::solver::{IterationRecord, NoiseEstimate, RefinementStrategy, SolverConfig, SolverOutput};
use crate::sphere::{analyze, Map, SphereGrid};

const MAP_MAGIC: &[u8; 4] = b"SMAP";

pub fn write_map(path: &Path, map: &Map) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 8 * map.n_pix());
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&u32::try_from(map.n_side)
        .map_err(|_| Error::invalid("n_side too large for the map format"))?
        .to_le_bytes());
    for v in &map.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<Map> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != MAP_MAGIC {
        return Err(Error::Format(format!("{} is not a map file", path.display())));
    }
    let n_side = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_pix = n_side
        .checked_mul(n_side)
        .and_then(|v| v.checked_mul(12))
        .filter(|&v| v == (bytes.len() - 8) / 8)
        .ok_or_else(|| Error::Format(format!("{}: header disagrees with size", path.display())))?;
    if bytes.len() != 8 + 8 * n_pix {
        return Err(Error::Format(format!(
            "{}: expected {} pixels, found {} bytes of payload",
            path.display(),
            n_pix,
            bytes.len() - 8
        )));
    }
    let values = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Map::new(n_side, values)
}

/// Long-form `channel,source,value` rows, one per matrix entry.
pub fn write_mixing(path: &Path, mixing: &MixingMatrix) -> Result<()> {
    let mut out = String::from("channel,source,value\n");
    for c in 0..mixing.n_channels() {
        for n in 0..mixing.n_sources() {
            out.push_str(&format!("{c},{n},{}\n", mixing.entries[(c, n)]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mixing(path: &Path) -> Result<MixingMatrix> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut max_c = 0usize;
    let mut max_n = 0usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "channel,source,value" {
                return Err(Error::Format(format!("{}: bad header", path.display())));
            }
            continue;
        }
        let mut parts = line.split(',');
        let (c, n, v) = (|| -> Option<(usize, usize, f64)> {
            let c = parts.next()?.parse().ok()?;
            let n = parts.next()?.parse().ok()?;
            let v = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some((c, n, v))
        })()
        .ok_or_else(|| Error::Format(format!("{}: bad row {line:?}", path.display())))?;
        max_c = max_c.max(c);
        max_n = max_n.max(n);
        entries.push((c, n, v));
    }
    if entries.len() != (max_c + 1) * (max_n + 1) {
        return Err(Error::Format(format!("{}: incomplete matrix", path.display())));
    }
    let mut m = nalgebra::DMatrix::zeros(max_c + 1, max_n + 1);
    for (c, n, v) in entries {
        m[(c, n)] = v;
    }
    Ok(MixingMatrix { entries: m })
}

/// `channel,l,value` rows of every kernel's harmonic filter.
pub fn write_kernels(path: &Path, kernels: &KernelSet) -> Result<()> {
    let mut out = String::from("channel,l,value\n");
    for c in 0..kernels.n_channels() {
        for (l, v) in kernels.filter(c).iter().enumerate() {
            out.push_str(&format!("{c},{l},{v}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Resolutions are not part of the CSV; they come from `meta.json`.
pub fn read_kernels(path: &Path, resolutions: Vec<f64>) -> Result<KernelSet> {
    let text = fs::read_to_string(path)?;
    let mut filters: Vec<Vec<f64>> = vec![Vec::new(); resolutions.len()];
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "channel,l,value" {
                return Err(Error::Format(format!("{}: bad header", path.display())));
            }
            continue;
        }
        let mut parts = line.split(',');
        let (c, l, v) = (|| -> Option<(usize, usize, f64)> {
            let c = parts.next()?.parse().ok()?;
            let l = parts.next()?.parse().ok()?;
            let v = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some((c, l, v))
        })()
        .ok_or_else(|| Error::Format(format!("{}: bad row {line:?}", path.display())))?;
        let filter = filters
            .get_mut(c)
            .ok_or_else(|| Error::Format(format!("{}: channel {c} out of range", path.display())))?;
        if l != filter.len() {
            return Err(Error::Format(format!("{}: degrees out of order", path.display())));
        }
        filter.push(v);
    }
    KernelSet::from_filters(resolutions, filters)
}

/// Everything needed to rebuild a dataset around its binary maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_side: usize,
    pub n_sources: usize,
    pub n_channels: usize,
    pub cond: f64,
    pub r_min: f64,
    pub cutoff: usize,
    pub sparsity: f64,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub sigma2: f64,
    pub resolutions: Vec<f64>,
}

/// Writes `meta.json`, `X_<c>.map`, `kernels.csv`, and (with ground
/// truth) `S_<n>.map` plus `A.csv` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset, params: &SimulateParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        n_side: params.n_side,
        n_sources: params.n_sources,
        n_channels: params.n_channels,
        cond: params.cond,
        r_min: params.r_min,
        cutoff: params.cutoff,
        sparsity: params.sparsity,
        snr_db: params.snr_db,
        seed: params.seed,
        sigma2: dataset.sigma2,
        resolutions: (0..dataset.kernels.n_channels())
            .map(|c| dataset.kernels.resolution(c))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), json + "\n")?;
    for (c, map) in dataset.maps.iter().enumerate() {
        write_map(&dir.join(format!("X_{c}.map")), map)?;
    }
    write_kernels(&dir.join("kernels.csv"), &dataset.kernels)?;
    if let Some(truth) = &dataset.ground_truth {
        write_mixing(&dir.join("A.csv"), &truth.mixing)?;
        for (n, map) in truth.sources.iter().enumerate() {
            write_map(&dir.join(format!("S_{n}.map")), map)?;
        }
    }
    Ok(())
}

/// Rebuilds the dataset: maps are read back bit-exactly and the harmonic
/// coefficients are re-derived with the accurate analysis, so a read
/// dataset matches the simulated one.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    let grid = SphereGrid::new(meta.n_side)?;
    let kernels = read_kernels(&dir.join("kernels.csv"), meta.resolutions.clone())?;
    let mut maps = Vec::with_capacity(meta.n_channels);
    let mut coeffs = Vec::with_capacity(meta.n_channels);
    for c in 0..meta.n_channels {
        let map = read_map(&dir.join(format!("X_{c}.map")))?;
        coeffs.push(analyze(&map, &grid, 2)?);
        maps.push(map);
    }
    let ground_truth = if dir.join("A.csv").exists() {
        let mixing = read_mixing(&dir.join("A.csv"))?;
        let mut sources = Vec::with_capacity(meta.n_sources);
        let mut source_coeffs = Vec::with_capacity(meta.n_sources);
        for n in 0..meta.n_sources {
            let map = read_map(&dir.join(format!("S_{n}.map")))?;
            source_coeffs.push(analyze(&map, &grid, 2)?);
            sources.push(map);
        }
        Some(GroundTruth {
            mixing,
            sources,
            source_coeffs,
        })
    } else {
        None
    };
    Ok((
        Dataset {
            grid,
            maps,
            coeffs,
            kernels,
            sigma2: meta.sigma2,
            ground_truth,
        },
        meta,
    ))
}

/// Writes the solver-run layout: `A.csv`, `S_<n>.map`, `diagnostics.csv`.
pub fn write_solver_output(dir: &Path, output: &SolverOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_mixing(&dir.join("A.csv"), &output.mixing)?;
    for (n, map) in output.sources.iter().enumerate() {
        write_map(&dir.join(format!("S_{n}.map")), map)?;
    }
    write_diagnostics(&dir.join("diagnostics.csv"), &output.diagnostics)
}

pub fn write_diagnostics(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let mut out = String::from("iter,stage,c,K,rel_change\n");
    for rec in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.iteration, rec.stage, rec.c, rec.support, rec.rel_change
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One `metrics.csv` row; `report: None` marks a failed trial.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub trial: usize,
    pub method: String,
    pub report: Option<MetricReport>,
}

/// Infinite metrics print as `inf` (exact recovery, not an error).
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("trial,method,c_a_db,nmse_db,nmse_w_db\n");
    for row in rows {
        out.push_str(&format!("{},{},", row.trial, row.method));
        match &row.report {
            Some(r) => {
                let w = r.nmse_w_db.map_or(String::new(), |v| v.to_string());
                out.push_str(&format!("{},{},{w}\n", r.c_a_db, r.nmse_db));
            }
            None => out.push_str("failed,failed,failed\n"),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Applies `key = value` lines to a config. Keys are the
/// [`SolverConfig`] field names; `noise` takes `mad` or a variance;
/// `refinement` takes `spectrum` or `eigenvalue`. Blank lines and `#`
/// comments are skipped; an unknown key is a format error.
pub fn apply_config_str(text: &str, config: &mut SolverConfig) -> Result<()> {
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Format(format!("expected `key = value`, got {raw:?}")))?;
        let bad = |what: &str| Error::Format(format!("{key}: bad {what} {value:?}"));
        match key {
            "n_sources" => config.n_sources = value.parse().map_err(|_| bad("count"))?,
            "c_warmup" => config.c_warmup = value.parse().map_err(|_| bad("number"))?,
            "c_refine" => config.c_refine = value.parse().map_err(|_| bad("number"))?,
            "k" => config.k = value.parse().map_err(|_| bad("number"))?,
            "support_max" => config.support_max = value.parse().map_err(|_| bad("number"))?,
            "n_scales" => config.n_scales = value.parse().map_err(|_| bad("count"))?,
            "n_warmup" => config.n_warmup = value.parse().map_err(|_| bad("count"))?,
            "eps_warmup" => config.eps_warmup = value.parse().map_err(|_| bad("number"))?,
            "eps_refine" => config.eps_refine = value.parse().map_err(|_| bad("number"))?,
            "max_warmup_iters" => {
                config.max_warmup_iters = value.parse().map_err(|_| bad("count"))?
            }
            "max_refine_iters" => {
                config.max_refine_iters = value.parse().map_err(|_| bad("count"))?
            }
            "nonneg_s" => config.nonneg_s = value.parse().map_err(|_| bad("flag"))?,
            "nonneg_a" => config.nonneg_a = value.parse().map_err(|_| bad("flag"))?,
            "noise" => {
                config.noise = if value == "mad" {
                    NoiseEstimate::Mad
                } else {
                    NoiseEstimate::Analytic(value.parse().map_err(|_| bad("variance"))?)
                }
            }
            "refinement" => {
                config.refinement = match value {
                    "spectrum" => RefinementStrategy::SpectrumRatio,
                    "eigenvalue" => RefinementStrategy::LargestEigenvalue,
                    _ => return Err(bad("strategy")),
                }
            }
            _ => return Err(Error::Format(format!("unknown config key {key:?}"))),
        }
    }
    Ok(())
}

pub fn read_config(path: &Path, config: &mut SolverConfig) -> Result<()> {
    apply_config_str(&fs::read_to_string(path)?, config)
}

pub fn write_config(path: &Path, config: &SolverConfig) -> Result<()> {
    let noise = match config.noise {
        NoiseEstimate::Mad => "mad".to_string(),
        NoiseEstimate::Analytic(v) => v.to_string(),
    };
    let refinement = match config.refinement {
        RefinementStrategy::SpectrumRatio => "spectrum",
        RefinementStrategy::LargestEigenvalue => "eigenvalue",
    };
    let text = format!(
        "n_sources = {}\nc_warmup = {}\nc_refine = {}\nk = {}\nsupport_max = {}\n\
         n_scales = {}\nn_warmup = {}\neps_warmup = {}\neps_refine = {}\n\
         max_warmup_iters = {}\nmax_refine_iters = {}\nnonneg_s = {}\nnonneg_a = {}\n\
         noise = {noise}\nrefinement = {refinement}\n",
        config.n_sources,
        config.c_warmup,
        config.c_refine,
        config.k,
        config.support_max,
        config.n_scales,
        config.n_warmup,
        config.eps_warmup,
        config.eps_refine,
        config.max_warmup_iters,
        config.max_refine_iters,
        config.nonneg_s,
        config.nonneg_a,
    );
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, SimulateParams};
    use tempfile::tempdir;

    #[test]
    fn map_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.map");
        let map = Map::new(2, (0..48).map(|p| (p as f64).sin() * 1e-3).collect()).unwrap();
        write_map(&path, &map).unwrap();
        let back = read_map(&path).unwrap();
        assert_eq!(back.n_side, 2);
        assert_eq!(back.values, map.values);
    }

    #[test]
    fn corrupt_maps_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.map");
        fs::write(&path, b"SMAPxxxx").unwrap();
        assert!(matches!(read_map(&path), Err(Error::Format(_))));
        fs::write(&path, b"JUNK").unwrap();
        assert!(matches!(read_map(&path), Err(Error::Format(_))));
        let mut ok = Vec::new();
        ok.extend_from_slice(b"SMAP");
        ok.extend_from_slice(&1u32.to_le_bytes());
        ok.extend_from_slice(&[0u8; 8 * 11]);
        fs::write(&path, ok).unwrap();
        assert!(matches!(read_map(&path), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trip_preserves_maps_and_truth() {
        let dir = tempdir().unwrap();
        let mut params = SimulateParams::new(8);
        params.n_sources = 2;
        params.n_channels = 3;
        params.seed = 9;
        let dataset = simulate(&params).unwrap();
        write_dataset(dir.path(), &dataset, &params).unwrap();
        let (back, meta) = read_dataset(dir.path()).unwrap();
        assert_eq!(meta.n_side, 8);
        assert_eq!(meta.seed, 9);
        assert_eq!(back.sigma2, dataset.sigma2);
        for (a, b) in back.maps.iter().zip(&dataset.maps) {
            assert_eq!(a.values, b.values);
        }
        for (a, b) in back.coeffs.iter().zip(&dataset.coeffs) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        let t0 = dataset.ground_truth.as_ref().unwrap();
        let t1 = back.ground_truth.as_ref().unwrap();
        assert_eq!(t0.mixing.entries, t1.mixing.entries);
        for (a, b) in t0.sources.iter().zip(&t1.sources) {
            assert_eq!(a.values, b.values);
        }
        for c in 0..3 {
            assert_eq!(back.kernels.filter(c), dataset.kernels.filter(c));
            assert_eq!(back.kernels.resolution(c), dataset.kernels.resolution(c));
        }
    }

    #[test]
    fn config_file_round_trips_and_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut config = SolverConfig::new(3, 0.7);
        config.noise = NoiseEstimate::Analytic(1.5e-3);
        config.refinement = RefinementStrategy::LargestEigenvalue;
        config.nonneg_a = true;
        write_config(&path, &config).unwrap();
        let mut back = SolverConfig::new(1, 0.0);
        read_config(&path, &mut back).unwrap();
        assert_eq!(back, config);

        let mut c = SolverConfig::new(1, 0.0);
        apply_config_str("# comment\n\nnoise = mad\n", &mut c).unwrap();
        assert_eq!(c.noise, NoiseEstimate::Mad);
        assert!(matches!(
            apply_config_str("banana = 3", &mut c),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            apply_config_str("n_sources", &mut c),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            apply_config_str("refinement = fast", &mut c),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn metrics_rows_print_inf_and_failed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow {
                trial: 0,
                method: "sdecgmca".into(),
                report: Some(MetricReport {
                    nmse_db: f64::INFINITY,
                    nmse_w_db: Some(12.5),
                    c_a_db: 30.0,
                    permutation: vec![0],
                    sign_flips: vec![1.0],
                }),
            },
            MetricsRow {
                trial: 1,
                method: "hals".into(),
                report: None,
            },
        ];
        write_metrics(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "trial,method,c_a_db,nmse_db,nmse_w_db\n\
             0,sdecgmca,30,inf,12.5\n\
             1,hals,failed,failed,failed\n"
        );
    }
}
