//! Cartesian parameter sweeps over configuration leaves.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::{csv_error as csv_err, run_experiment, RunReport};

/// One swept key with its raw values, e.g. `s2d.n=2,3,4`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid {spec:?}: expected key=v1,v2,...")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if key.trim().is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("grid {spec:?}: empty key or value")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

/// SplitMix64 of `(base, index)`, masked to 63 bits so it stays a TOML integer.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) & (i64::MAX as u64)
}

/// Expands the grid into validated cells. An empty grid yields one cell at `base`.
pub fn expand(base: &ExperimentConfig, grid: &[GridAxis]) -> Result<Vec<SweepCell>> {
    let base_text = base.to_toml_string()?;
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in grid {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let seeds_swept = grid.iter().any(|a| a.key == "seed");
    combos
        .into_iter()
        .enumerate()
        .map(|(index, assignments)| {
            let overrides: Vec<String> = assignments
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            let mut config = ExperimentConfig::from_toml_str(&base_text, &overrides)
                .map_err(|e| Error::Config(format!("grid cell {index}: {e}")))?;
            if !seeds_swept {
                config.seed = derive_seed(base.seed, index);
            }
            Ok(SweepCell {
                index,
                assignments,
                config,
            })
        })
        .collect()
}

/// Runs every cell; with `jobs > 1` cells run on scoped threads. Results keep cell order.
pub fn run_cells(cells: &[SweepCell], jobs: usize) -> Result<Vec<RunReport>> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return cells.iter().map(|c| run_experiment(&c.config).map(|r| r.1)).collect();
    }
    let mut out: Vec<Option<Result<RunReport>>> = (0..cells.len()).map(|_| None).collect();
    for (chunk_cells, chunk_out) in cells.chunks(jobs).zip(out.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_cells
                .iter()
                .map(|c| s.spawn(move || run_experiment(&c.config).map(|r| r.1)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::InvalidArgument("sweep worker panicked".into()))
                }));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every cell ran")).collect()
}

/// One row per cell: index, seed, swept values, regime, losses and spectral summary.
pub fn summary_csv(grid: &[GridAxis], cells: &[SweepCell], reports: &[RunReport]) -> Result<String> {
    let mut quant_keys: Vec<String> = reports
        .iter()
        .flat_map(|r| r.final_metrics.quant_eval_loss.keys().cloned())
        .collect();
    quant_keys.sort();
    quant_keys.dedup();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "seed".to_string()];
    header.extend(grid.iter().map(|a| a.key.clone()));
    header.extend(["regime", "fp_eval_loss"].map(String::from));
    header.extend(quant_keys.iter().map(|k| format!("quant_eval_loss_{k}")));
    header.extend(["max_sigma_max", "selected_layers", "min_staleness_cosine"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;

    for (cell, r) in cells.iter().zip(reports) {
        let mut row = vec![cell.index.to_string(), cell.config.seed.to_string()];
        row.extend(cell.assignments.iter().map(|(_, v)| v.clone()));
        row.push(serde_json::to_value(r.config.regime)?.as_str().unwrap_or_default().to_string());
        row.push(format!("{:.16e}", r.final_metrics.fp_eval_loss));
        for k in &quant_keys {
            row.push(
                r.final_metrics
                    .quant_eval_loss
                    .get(k)
                    .map(|v| format!("{v:.16e}"))
                    .unwrap_or_default(),
            );
        }
        let max_sigma = r.layers.iter().map(|l| l.sigma_max).fold(0.0, f64::max);
        row.push(format!("{max_sigma:.16e}"));
        row.push(r.selected_layers().map(|l| l.layer.as_str()).collect::<Vec<_>>().join(";"));
        row.push(r.min_staleness().map(|v| format!("{v:.16e}")).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_axes() {
        let a: GridAxis = "s2d.n = 2, 3,4".parse().unwrap();
        assert_eq!(a.key, "s2d.n");
        assert_eq!(a.values, vec!["2", "3", "4"]);
        assert!("s2d.n".parse::<GridAxis>().is_err());
        assert!("s2d.n=2,,3".parse::<GridAxis>().is_err());
    }

    #[test]
    fn cartesian_order_and_seeds() {
        let grid = vec!["s2d.n=2,3".parse().unwrap(), "s2d.tau=0.8,0.9,0.95".parse().unwrap()];
        let cells = expand(&ExperimentConfig::default(), &grid).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].config.s2d.n, 3.0);
        assert_eq!(cells[4].config.s2d.tau, 0.9);
        assert_eq!(cells[4].config.seed, derive_seed(0, 4));
        let again = expand(&ExperimentConfig::default(), &grid).unwrap();
        assert_eq!(cells[5].config, again[5].config);
        assert_ne!(cells[0].config.seed, cells[1].config.seed);
    }

    #[test]
    fn empty_grid_is_one_default_cell() {
        let cells = expand(&ExperimentConfig::default(), &[]).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(cells[0].assignments.is_empty());
    }

    #[test]
    fn unknown_field_is_rejected() {
        let grid = vec!["s2d.nope=1,2".parse().unwrap()];
        let err = expand(&ExperimentConfig::default(), &grid).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn explicit_seed_axis_is_kept() {
        let grid = vec!["seed=4,5".parse().unwrap()];
        let cells = expand(&ExperimentConfig::default(), &grid).unwrap();
        assert_eq!(cells[1].config.seed, 5);
    }
}
