//! Train-and-probe over a grid of crop and transform menus.

use std::fmt::Write as _;

use serde::Deserialize;

use super::eval::cross_validate;
use super::svm::SvmConfig;
use super::{embed_corpus, ProbeError, Result};
use crate::augment::{CropMethod, TransformKind};
use crate::ingest::VelocitySignal;
use crate::pipeline::{parse_menu, train, ConfigFile, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub crops: Vec<CropMethod>,
    pub transforms: Vec<TransformKind>,
}

impl AblationCell {
    pub fn new(name: &str, crops: &[CropMethod], transforms: &[TransformKind]) -> Self {
        Self {
            name: name.to_string(),
            crops: crops.to_vec(),
            transforms: transforms.to_vec(),
        }
    }
}

/// Crop-method rows use every transform; transform rows use every crop.
pub fn reference_grid() -> Vec<AblationCell> {
    use CropMethod::*;
    use TransformKind as T;
    let all_t = &TransformKind::ALL[..];
    let all_c = &CropMethod::ALL[..];
    vec![
        AblationCell::new("Same", &[Same], all_t),
        AblationCell::new("Consecutive", &[Consecutive], all_t),
        AblationCell::new("Random", &[Random], all_t),
        AblationCell::new("Consec, Same", &[Consecutive, Same], all_t),
        AblationCell::new("Random, Same", &[Random, Same], all_t),
        AblationCell::new("Random, Consec", &[Random, Consecutive], all_t),
        AblationCell::new("None", all_c, &[T::Identity]),
        AblationCell::new("Dropout", all_c, &TransformKind::ALL[..5]),
        AblationCell::new("Dropout, Noise", all_c, &TransformKind::ALL[..7]),
        AblationCell::new("Full", all_c, all_t),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationSettings {
    /// Everything except the menus, which each cell overrides.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub svm: SvmConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    seeds: Option<Vec<u64>>,
    folds: Option<usize>,
    svm_c: Option<f64>,
    svm_iterations: Option<usize>,
    base: Option<ConfigFile>,
    #[serde(default)]
    cell: Vec<CellFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellFile {
    name: String,
    crops: Vec<String>,
    transforms: Vec<String>,
}

/// Parses a grid file: top-level `seeds`, `folds`, `svm_c`,
/// `svm_iterations`, a `[base]` table of training keys, and `[[cell]]`
/// entries. Without cells the reference grid is used.
pub fn parse_grid(text: &str) -> Result<(Vec<AblationCell>, AblationSettings)> {
    let file: GridFile = toml::from_str(text).map_err(|e| ProbeError::Contract(format!("grid file: {e}")))?;
    let (base, overrides) = file
        .base
        .unwrap_or_default()
        .apply(TrainConfig::desk())?;
    for o in overrides {
        log::info!("ablation base override: {o}");
    }
    let cells = if file.cell.is_empty() {
        reference_grid()
    } else {
        file.cell
            .iter()
            .map(|c| {
                Ok(AblationCell {
                    name: c.name.clone(),
                    crops: parse_menu(&c.crops).map_err(|e| ProbeError::Contract(e.to_string()))?,
                    transforms: parse_menu(&c.transforms).map_err(|e| ProbeError::Contract(e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let defaults = SvmConfig::default();
    let settings = AblationSettings {
        base,
        seeds: file.seeds.unwrap_or_else(|| vec![0]),
        folds: file.folds.unwrap_or(5),
        svm: SvmConfig {
            c: file.svm_c.unwrap_or(defaults.c),
            iterations: file.svm_iterations.unwrap_or(defaults.iterations),
        },
    };
    Ok((cells, settings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Pooled cross-validated accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(cell: &AblationCell, corpus: &[VelocitySignal], settings: &AblationSettings) -> Result<Vec<f64>> {
    let mut accuracies = Vec::with_capacity(settings.seeds.len());
    for &seed in &settings.seeds {
        let config = TrainConfig {
            crops: cell.crops.clone(),
            transforms: cell.transforms.clone(),
            seed,
            ..settings.base.clone()
        };
        let fingerprint = config.fingerprint();
        let exec = if config.parallel {
            crate::numcore::ExecMode::Parallel
        } else {
            crate::numcore::ExecMode::Sequential
        };
        let (state, _) = train(config, corpus)?;
        let embeddings = embed_corpus(&state.params, corpus, exec)?;
        let report = cross_validate(&embeddings, settings.folds, settings.svm, seed, &fingerprint)?;
        log::info!("cell `{}` seed {seed}: accuracy {:.4}", cell.name, report.accuracy);
        accuracies.push(report.accuracy);
    }
    Ok(accuracies)
}

/// Trains and probes every cell with the same seeds and budget. A failing
/// cell is recorded in its row and the remaining cells still run.
pub fn ablation_run(grid: &[AblationCell], corpus: &[VelocitySignal], settings: &AblationSettings) -> Vec<AblationRow> {
    grid.iter()
        .map(|cell| match run_cell(cell, corpus, settings) {
            Ok(accuracies) => AblationRow {
                cell: cell.clone(),
                mean_accuracy: (!accuracies.is_empty())
                    .then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64),
                accuracies,
                error: None,
            },
            Err(e) => AblationRow {
                cell: cell.clone(),
                accuracies: Vec::new(),
                mean_accuracy: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Delimited table: one row per cell with menus, per-seed accuracies,
/// their mean, and any error.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let names = |v: &mut dyn Iterator<Item = &str>| v.collect::<Vec<_>>().join("+");
    let mut out = String::from("configuration,crops,transforms,seed_accuracies,mean_accuracy,error\n");
    for r in rows {
        let crops = names(&mut r.cell.crops.iter().map(|c| c.name()));
        let transforms = names(&mut r.cell.transforms.iter().map(|t| t.name()));
        let accs = r.accuracies.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(";");
        let mean = r.mean_accuracy.map(|m| format!("{m:.6}")).unwrap_or_default();
        let error = r.error.as_deref().unwrap_or("").replace(['"', ','], " ");
        writeln!(out, "\"{}\",{crops},{transforms},{accs},{mean},{error}", r.cell.name).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::ingest::{preprocess, synthesize_corpus};

    fn settings() -> AblationSettings {
        AblationSettings {
            base: TrainConfig {
                segment_len: 40,
                batch_size: 4,
                epochs: 1,
                parallel: false,
                encoder: EncoderConfig::uniform(4),
                ..TrainConfig::default()
            },
            seeds: vec![1],
            folds: 2,
            svm: SvmConfig { c: 1.0, iterations: 50 },
        }
    }

    #[test]
    fn reference_grid_mirrors_row_structure() {
        let grid = reference_grid();
        assert_eq!(grid.len(), 10);
        assert_eq!(grid[0].crops, vec![CropMethod::Same]);
        assert_eq!(grid[7].transforms.len(), 5);
        assert_eq!(grid[8].transforms.len(), 7);
        assert_eq!(grid[9].transforms.len(), 9);
    }

    #[test]
    fn grid_file_parses() {
        let text = r#"
            seeds = [1, 2, 3]
            folds = 4
            [base]
            epochs = 2
            [[cell]]
            name = "Same, none"
            crops = ["same"]
            transforms = ["identity"]
        "#;
        let (cells, s) = parse_grid(text).unwrap();
        assert_eq!(cells, vec![AblationCell::new("Same, none", &[CropMethod::Same], &[TransformKind::Identity])]);
        assert_eq!((s.seeds.len(), s.folds, s.base.epochs, s.base.batch_size), (3, 4, 2, 64));
        assert_eq!(parse_grid("").unwrap().0.len(), 10);
        assert!(parse_grid("[[cell]]\nname = \"x\"\ncrops = [\"up\"]\ntransforms = []").is_err());
    }

    #[test]
    fn failures_are_recorded_per_row() {
        let corpus: Vec<_> = synthesize_corpus(2, 4, 1.0, 5)
            .unwrap()
            .iter()
            .map(|r| preprocess(r).unwrap())
            .collect();
        let grid = vec![
            AblationCell::new("ok", &[CropMethod::Random], &[TransformKind::Identity]),
            AblationCell::new("empty", &[], &[TransformKind::Identity]),
        ];
        let rows = ablation_run(&grid, &corpus, &settings());
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_none() && rows[0].mean_accuracy.is_some());
        assert!(rows[1].error.is_some());
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 3);
        assert_eq!(ablation_table(&ablation_run(&grid, &corpus, &settings())), table);
    }
}
