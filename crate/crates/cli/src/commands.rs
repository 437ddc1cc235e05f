use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtp::data::embedding::save_embedding;
use mtp::data::{generate_synthetic, load_manifest, Dataset, Split, SyntheticSpec};
use mtp::gradcheck::{gradcheck, GradcheckCase, GradcheckReport};
use mtp::model::{atom_attention_scores, MtpConfig, MtpModel};
use mtp::train::checkpoint::{config_hash, CheckpointMeta};
use mtp::train::{load_checkpoint, metrics, predict_all, save_checkpoint, train, MetricsReport};
use mtp::{Error, FeatureMatrix, Result};

use crate::config::{output_dir, RunConfig};

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_LOG: &str = "metrics.log";
pub const ATTENTION_DIR: &str = "attention";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub output: Option<PathBuf>,
    pub quiet: bool,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config;
    cfg.validate()?;
    let manifest = cfg
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest: set [paths].manifest or pass --manifest".into()))?;
    let out = output_dir(args.output.as_deref(), &cfg);
    let dataset = load_manifest(&manifest)?;
    create_dir(&out)?;
    cfg.paths.output_dir = Some(out.clone());
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;

    let log_path = out.join(METRICS_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(&dataset, &cfg.model, &cfg.train, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if !args.quiet {
            eprintln!(
                "epoch {:>4}  train_loss {:.6}  {}_loss {:.6}",
                r.epoch, r.train_loss, r.eval_split, r.eval_loss
            );
        }
        Ok(())
    })?;
    save_checkpoint(&outcome.best, outcome.best_epoch, out.join(CHECKPOINT_FILE))?;
    println!(
        "best epoch {} of {}; checkpoint {}",
        outcome.best_epoch,
        outcome.history.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Loads a checkpoint and confirms it fits the dataset and, if given, the
/// expected model configuration.
fn compatible_model(
    checkpoint: &Path,
    dataset: &Dataset,
    expected: Option<&MtpConfig>,
) -> Result<(MtpModel<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint::<f32>(checkpoint)?;
    if model.config.task != dataset.task() {
        return Err(Error::Config(format!(
            "task mismatch: checkpoint is {} but dataset is {}",
            model.config.task,
            dataset.task()
        )));
    }
    let wanted = config_hash(expected.unwrap_or(&meta.config), &dataset.dims());
    if wanted != meta.config_hash {
        return Err(Error::Config(format!(
            "config hash mismatch: checkpoint has {} but this run expects {wanted}",
            meta.config_hash
        )));
    }
    Ok((model, meta))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: Split,
    /// Model section to check the checkpoint against.
    pub expected: Option<RunConfig>,
    pub output: Option<PathBuf>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let expected = args.expected.as_ref().map(|c| &c.model);
    let (model, meta) = compatible_model(&args.checkpoint, &dataset, expected)?;
    let samples = dataset.load_split::<f32>(args.split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} split is empty", args.split)));
    }
    let preds = predict_all(&model, &samples)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let report = MetricsReport {
        task: model.config.task,
        split: args.split.to_string(),
        metrics: metrics(&preds, &labels, model.config.task)?,
        seed: model.config.seed,
        config_hash: meta.config_hash,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    let cfg = args.expected.unwrap_or_default();
    let out = output_dir(args.output.as_deref(), &cfg);
    create_dir(&out)?;
    write(&out.join(format!("eval.{}.json", args.split)), json + "\n")
}

pub fn cmd_gradcheck(case: &GradcheckCase, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let hook = |name: &str, g: &mut FeatureMatrix<f64>| {
        if Some(name) == corrupt {
            for v in g.data_mut() {
                *v = *v * 1.5 + 0.01;
            }
        }
    };
    if let Some(name) = corrupt {
        let model = MtpModel::<f64>::new(
            case.config.clone(),
            mtp::model::InputDims {
                d_mol: case.d_mol,
                d_pro: case.d_pro,
            },
        )?;
        if !model.params.named_blocks().iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("unknown parameter block {name:?}")));
        }
    }
    let report = gradcheck(case, Some(&hook))?;
    print!("{}", report.table());
    let failed = report.blocks.iter().filter(|b| !b.passed).count();
    println!(
        "{}: {} of {} blocks within tolerance (seed {}, loss {:.6e})",
        if failed == 0 { "PASS" } else { "FAIL" },
        report.blocks.len() - failed,
        report.blocks.len(),
        report.seed,
        report.loss
    );
    Ok(report)
}

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub samples: Vec<String>,
    pub output: Option<PathBuf>,
}

pub fn cmd_export_attention(args: ExportArgs) -> Result<Vec<PathBuf>> {
    let dataset = load_manifest(&args.manifest)?;
    let (model, _) = compatible_model(&args.checkpoint, &dataset, None)?;
    let mut indices = Vec::with_capacity(args.samples.len());
    let unknown: Vec<String> = args
        .samples
        .iter()
        .filter(|id| match dataset.find_sample(id) {
            Some(i) => {
                indices.push(i);
                false
            }
            None => true,
        })
        .map(|id| format!("unknown sample id {id:?}"))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(unknown));
    }

    let out = output_dir(args.output.as_deref(), &RunConfig::default()).join(ATTENTION_DIR);
    create_dir(&out)?;
    let mut written = Vec::new();
    for (id, i) in args.samples.iter().zip(indices) {
        let sample = dataset.load_sample::<f32>(i)?;
        let prediction = model.predict(&sample.input())?;
        let scores = atom_attention_scores(&prediction.attention)?;

        let path = out.join(format!("{id}.scores.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["atom", "score"]).map_err(|e| csv_error(&path, e))?;
        for (atom, s) in scores.iter().enumerate() {
            w.write_record([atom.to_string(), s.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        for map in &prediction.attention.maps {
            let path = out.join(format!("{id}.{}.mtpe", map.label()));
            save_embedding(&map.weights, &path)?;
            written.push(path);
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

pub fn cmd_synth_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec = SyntheticSpec::from_toml(&text)?;
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "{} samples over {} targets in {}",
        manifest.samples.len(),
        manifest.targets.len(),
        out.display()
    );
    Ok(())
}
