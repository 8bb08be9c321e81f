//! Run configuration files and the experiment drivers behind the CLI:
//! single runs (pretrain, train, eval) and the sweep and ablation grids.
//!
//! A run directory holds `config.toml`, `metrics.ndjson`, `checkpoint.bin`
//! and `report.json`/`report.txt`; grids put one run directory per grid
//! point under the output directory plus `summary.csv` and `summary.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::images::{load_image_dataset, ImageFormat};
use crate::data::{generate_synthetic, LabeledDataset, Split, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, Provenance};
use crate::metrics::MetricsWriter;
use crate::seed::derive_seed;
use crate::training::{
    config_hash, load_checkpoint, save_checkpoint, train_ensemble, Objective, ReferenceSource, TrainConfig,
    TrainOptions, TrainingRun, CHECKPOINT_FILE,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const CORRELATIONS_DIR: &str = "correlations";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticDatasetSpec,
    },
    /// Pre-split image corpora; paths are relative to the config file.
    Images {
        train: PathBuf,
        test: PathBuf,
        format: ImageFormat,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticDatasetSpec::default(),
        }
    }
}

impl DatasetSource {
    pub fn load(&self, base: &Path) -> Result<Split> {
        match self {
            DatasetSource::Synthetic { spec } => generate_synthetic(spec),
            DatasetSource::Images { train, test, format } => Ok(Split {
                train: load_image_dataset(&base.join(train), *format)?,
                test: load_image_dataset(&base.join(test), *format)?,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Off-diagonal weights of the plain Barlow-Twins rows.
    pub lambdas: Vec<f64>,
    /// Off-diagonal weight of the two reference-regularized rows.
    pub regularized_lambda: f64,
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.005, 0.01, 0.1],
            regularized_lambda: 0.005,
            betas: vec![0.001, 0.005, 0.01, 0.02, 0.05],
        }
    }
}

/// Everything a run needs; hashed into every artifact it writes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Probe and test data for transfer evaluation; defaults to `dataset`.
    pub eval_dataset: Option<DatasetSource>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Reads a TOML file (or JSON when the extension is `.json`).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.probe.validate()?;
        if self.eval.knn_k == 0 {
            return Err(Error::Config("eval.knn_k must be positive".into()));
        }
        for source in std::iter::once(&self.dataset).chain(&self.eval_dataset) {
            if let DatasetSource::Synthetic { spec } = source {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Sets the training and probe seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.eval.probe.seed = seed;
        self
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Deterministic run name: the first 16 hex digits of the config hash.
    pub fn run_id(&self) -> Result<String> {
        Ok(format!("run-{}", &self.hash()?[..16]))
    }

    fn load_training_data(&self) -> Result<LabeledDataset> {
        let split = self.dataset.load(&self.base_dir)?;
        check_dims(&split.train, &self.train)?;
        Ok(split.train)
    }

    /// (probe data, test data).
    fn load_eval_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let split = self.eval_dataset.as_ref().unwrap_or(&self.dataset).load(&self.base_dir)?;
        check_dims(&split.train, &self.train)?;
        Ok((split.train, split.test))
    }
}

fn check_dims(data: &LabeledDataset, config: &TrainConfig) -> Result<()> {
    if data.input_dim() != config.architecture.input_dim {
        return Err(Error::Config(format!(
            "dataset rows have {} values but architecture.input_dim is {}",
            data.input_dim(),
            config.architecture.input_dim
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub dump_correlations: bool,
}

fn prepare_dir(out: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    std::fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn open_metrics(out: &Path, config: &RunConfig, resume: bool) -> Result<MetricsWriter> {
    let path = out.join(METRICS_FILE);
    let (run_id, hash) = (config.run_id()?, config.hash()?);
    if resume && path.exists() {
        MetricsWriter::append(&path, &run_id, &hash)
    } else {
        MetricsWriter::create(&path, &run_id, &hash)
    }
}

fn existing_checkpoint(out: &Path, config: &RunConfig) -> Result<Option<crate::training::TrainingState>> {
    let path = out.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    load_checkpoint(&path, &config.train, &config.hash()?).map(Some)
}

fn run_training(config: &RunConfig, out: &Path, opts: &RunOptions, stop_after: Option<usize>) -> Result<TrainingRun> {
    prepare_dir(out, config)?;
    let data = config.load_training_data()?;
    let resume = existing_checkpoint(out, config)?;
    let mut metrics = open_metrics(out, config, resume.is_some())?;
    let run = train_ensemble(
        &config.train,
        &data,
        TrainOptions {
            config_hash: config.hash()?,
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(out.to_path_buf()),
            dump_correlations: opts.dump_correlations.then(|| out.join(CORRELATIONS_DIR)),
            resume,
            stop_after,
        },
    )?;
    save_checkpoint(&run.state, &out.join(CHECKPOINT_FILE))?;
    Ok(run)
}

/// Autoencoder pretraining only; leaves a checkpoint that `train` resumes.
pub fn pretrain(config: &RunConfig, out: &Path) -> Result<TrainingRun> {
    run_training(config, out, &RunOptions::default(), Some(0))
}

/// Trains to `config.train.epochs`, continuing from a checkpoint in `out`
/// written for the same config.
pub fn train(config: &RunConfig, out: &Path, opts: &RunOptions) -> Result<TrainingRun> {
    run_training(config, out, opts, None)
}

/// Evaluates the checkpoint in `out` and writes the report files.
pub fn eval(config: &RunConfig, out: &Path) -> Result<EvalReport> {
    let hash = config.hash()?;
    let state = load_checkpoint(&out.join(CHECKPOINT_FILE), &config.train, &hash)?;
    let (probe, test) = config.load_eval_data()?;
    let mut metrics = open_metrics(out, config, true)?;
    let provenance = Provenance {
        config_hash: hash,
        seed: config.train.seed,
        epoch: state.next_epoch,
    };
    let report = evaluate(&state.blocks, &probe, &test, &config.eval, provenance, Some(&mut metrics))?;
    let json = out.join(REPORT_JSON);
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let txt = out.join(REPORT_TXT);
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// One grid point of a sweep or ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub objective: String,
    pub beta: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub top1: f64,
    pub knn_top1: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Invalid(format!("summary csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("summary csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("summary csv: {e}")))
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let obj = self.rows.iter().map(|r| r.objective.len()).max().unwrap_or(0).max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<obj$}  {:>7}  {:>20}  {:>12}  {:>8}  {:>8}",
            "label", "objective", "beta", "seed", "final_loss", "Linear", "KNN"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<obj$}  {:>7}  {:>20}  {:>12.4}  {:>8.2}  {:>8.2}",
                r.label, r.objective, r.beta, r.seed, r.final_loss, r.top1, r.knn_top1
            );
        }
        out
    }

    fn write(&self, out: &Path) -> Result<()> {
        let csv = out.join(SUMMARY_CSV);
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        let txt = out.join(SUMMARY_TXT);
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Runs every grid point under its own subdirectory with a seed derived
/// from the base seed, the grid name and the point's index.
fn run_grid(base: &RunConfig, grid: &str, points: Vec<(String, TrainConfig)>, out: &Path) -> Result<Summary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(points.len());
    for (i, (label, train_cfg)) in points.into_iter().enumerate() {
        let seed = derive_seed(base.train.seed, grid, &[i as u64]);
        let point = RunConfig {
            train: train_cfg,
            ..base.clone()
        }
        .with_seed(seed);
        let dir = out.join(&label);
        let run = train(&point, &dir, &RunOptions::default())?;
        let report = eval(&point, &dir)?;
        let last = run.history().iter().rev().take(point.train.blocks).map(|s| s.mean.total);
        rows.push(SummaryRow {
            objective: point.train.objective.label(),
            beta: point.train.beta,
            seed,
            final_loss: last.sum::<f64>() / point.train.blocks as f64,
            top1: report.top1,
            knn_top1: report.knn_top1,
            config_hash: point.hash()?,
            label,
        });
    }
    let summary = Summary { rows };
    summary.write(out)?;
    Ok(summary)
}

fn lambda_label(l: f64) -> String {
    format!("{l}").replace('.', "p")
}

/// Barlow Twins at each configured λ, then the reference-regularized loss
/// with an autoencoder-derived and with a Gaussian reference.
pub fn sweep_lambda(config: &RunConfig, out: &Path) -> Result<Summary> {
    let mut points: Vec<(String, TrainConfig)> = config
        .sweep
        .lambdas
        .iter()
        .map(|&lambda| {
            let t = TrainConfig {
                objective: Objective::BarlowTwins { lambda },
                ..config.train.clone()
            };
            (format!("bt-lambda-{}", lambda_label(lambda)), t)
        })
        .collect();
    for (name, reference) in [("ae", ReferenceSource::Autoencoders), ("gaussian", ReferenceSource::Gaussian)] {
        let t = TrainConfig {
            objective: Objective::RegularizedBt {
                lambda: config.sweep.regularized_lambda,
                reference,
            },
            ..config.train.clone()
        };
        points.push((format!("regularized-{name}"), t));
    }
    run_grid(config, "sweep-lambda", points, out)
}

/// GUESS at each configured β.
pub fn sweep_beta(config: &RunConfig, out: &Path) -> Result<Summary> {
    let points = config
        .sweep
        .betas
        .iter()
        .map(|&beta| {
            let t = TrainConfig {
                beta,
                objective: Objective::Guess,
                ..config.train.clone()
            };
            (format!("beta-{}", lambda_label(beta)), t)
        })
        .collect();
    run_grid(config, "sweep-beta", points, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No autoencoder influence: α = β = 0 and no pretraining, which
    /// reduces the loss to Barlow Twins with λ = 1.
    DropAe,
    NoPretrain,
    SharedViews,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::DropAe, Ablation::NoPretrain, Ablation::SharedViews];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::DropAe => "drop-ae",
            Ablation::NoPretrain => "no-pretrain",
            Ablation::SharedViews => "shared-views",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut t = TrainConfig {
            objective: Objective::Guess,
            ..base.clone()
        };
        match self {
            Ablation::DropAe => {
                t.alpha = 0.0;
                t.beta = 0.0;
                t.ae_pretrain_enabled = false;
            }
            Ablation::NoPretrain => t.ae_pretrain_enabled = false,
            Ablation::SharedViews => t.shared_views = true,
        }
        t
    }
}

/// The unmodified GUESS run followed by each requested ablation.
pub fn ablate(config: &RunConfig, ablations: &[Ablation], out: &Path) -> Result<Summary> {
    let baseline = TrainConfig {
        objective: Objective::Guess,
        ..config.train.clone()
    };
    let mut points = vec![("baseline".to_string(), baseline)];
    points.extend(ablations.iter().map(|a| (a.name().to_string(), a.apply(&config.train))));
    run_grid(config, "ablate", points, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.train.blocks = 3;
        c.eval_dataset = Some(DatasetSource::Images {
            train: "a".into(),
            test: "b".into(),
            format: ImageFormat::Idx,
        });
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let c: RunConfig = toml::from_str("[train]\nblocks = 2\n[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert_eq!(c.train.blocks, 2);
        assert_eq!(c.dataset, DatasetSource::default());
        assert!(toml::from_str::<RunConfig>("[train]\nblockz = 2\n").is_err());
    }

    #[test]
    fn run_ids_follow_the_config() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(5);
        assert_eq!(a.run_id().unwrap(), RunConfig::default().run_id().unwrap());
        assert_ne!(a.run_id().unwrap(), b.run_id().unwrap());
    }

    #[test]
    fn drop_ae_removes_autoencoder_influence() {
        let t = Ablation::DropAe.apply(&TrainConfig::default());
        assert_eq!((t.alpha, t.beta, t.ae_pretrain_enabled), (0.0, 0.0, false));
        assert!(Ablation::SharedViews.apply(&TrainConfig::default()).shared_views);
    }
}
