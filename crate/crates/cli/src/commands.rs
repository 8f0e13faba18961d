//! Command bodies. Each one reads only its [`RunSpec`], so a run can be
//! repeated from its `run.json` alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ecgauth::adversarial::attack_sweep;
use ecgauth::data_io::{
    decode_record, encode_checkpoint, encode_imageset, encode_record, load_checkpoint, read_imageset, read_manifest,
    read_record, subject_label, synth_ecg, write_manifest, write_record, ImageSet, LabeledImage, Manifest,
    ManifestEntry, Split, SplitTag,
};
use ecgauth::experiment::{ExperimentConfig, Profile};
use ecgauth::federated::run_rounds;
use ecgauth::metrics::{eer_top5, metrics_report};
use ecgauth::pipeline::{beat_transforms, build_imageset, record_seed};
use ecgauth::scalogram::export_png;
use ecgauth::training::{cross_entropy_value, predict, train};
use ecgauth::{EcgRecord, Error, ModelConfig, ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::plots;
use crate::runs::{Inputs, RunDir, RunSpec};

pub const IMAGESET_FILE: &str = "imageset.ecgi";
pub const CHECKPOINT_FILE: &str = "checkpoint.ecgb";
const EVAL_CHUNK: usize = 64;

pub fn execute(spec: &RunSpec, root: &Path) -> Result<PathBuf> {
    let dir = RunDir::create(root, spec)?;
    match spec.command.as_str() {
        "synth" => synth(spec, &dir)?,
        "preprocess" => preprocess(spec, &dir)?,
        "train" => train_cmd(spec, &dir)?,
        "eval" => eval(spec, &dir)?,
        "attack" => attack(spec, &dir)?,
        "fedsim" => fedsim(spec, &dir)?,
        "report" => report(spec, &dir)?,
        other => bail!(Error::Usage(format!("unknown command {other:?} in run spec"))),
    }
    dir.finish(spec)?;
    Ok(dir.path().to_path_buf())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn format_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Format {
        offset: 0,
        message: msg.into(),
    }
    .into()
}

fn synthesize(config: &ExperimentConfig) -> Result<(Vec<EcgRecord>, Vec<Vec<usize>>, ecgauth::data_io::SynthEcg)> {
    let s = &config.synth;
    let synth = synth_ecg(s.subjects, s.beats_per_subject, s.fs, config.synth_seed())?;
    // Records pass through the on-disk encoding so that in-process data
    // matches what `synth` followed by `preprocess` produces.
    let records = synth
        .records
        .iter()
        .map(|r| decode_record(&encode_record(r)))
        .collect::<ecgauth::Result<Vec<_>>>()?;
    let peaks = synth.peaks.clone();
    Ok((records, peaks, synth))
}

/// The synthetic image set implied by `config`, built without touching disk.
pub fn synthetic_imageset(config: &ExperimentConfig) -> Result<ImageSet> {
    let (records, _, _) = synthesize(config)?;
    let tagged: Vec<(EcgRecord, SplitTag)> = records.into_iter().map(|r| (r, SplitTag::Auto)).collect();
    Ok(build_imageset(&tagged, &config.pipeline, config.pipeline_seed())?.0)
}

fn load_data(spec: &RunSpec) -> Result<ImageSet> {
    match &spec.inputs.data {
        Some(path) => Ok(read_imageset(path)?),
        None if spec.config.profile == Profile::Synthetic => synthetic_imageset(&spec.config),
        None => Err(usage(format!(
            "profile {} has no built-in data; pass --data",
            spec.config.profile
        ))),
    }
}

fn model_for(config: &ExperimentConfig, data: &ImageSet) -> Result<ModelConfig> {
    let model = ModelConfig {
        n_classes: data.classes.len(),
        ..config.model.clone()
    };
    model.validate()?;
    Ok(model)
}

fn write_model(dir: &RunDir, model: &ModelConfig, classes: &[String], params: &ParameterSet) -> Result<()> {
    dir.write_bytes(CHECKPOINT_FILE, &encode_checkpoint(params))?;
    dir.write_json("model.json", model)?;
    dir.write_json("classes.json", &classes)
}

struct LoadedModel {
    config: ModelConfig,
    classes: Vec<String>,
    params: ParameterSet,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

fn load_model(dir: &Path) -> Result<LoadedModel> {
    let config: ModelConfig = read_json(&dir.join("model.json"))?;
    config.validate()?;
    let classes: Vec<String> = read_json(&dir.join("classes.json"))?;
    if classes.len() != config.n_classes {
        return Err(format_err(format!(
            "{}: {} class names for {} classes",
            dir.display(),
            classes.len(),
            config.n_classes
        )));
    }
    let params = load_checkpoint(&dir.join(CHECKPOINT_FILE), &config)?;
    Ok(LoadedModel {
        config,
        classes,
        params,
    })
}

fn model_and_data(spec: &RunSpec) -> Result<(LoadedModel, ImageSet)> {
    let dir = spec.inputs.model.as_ref().ok_or_else(|| usage("--model is required"))?;
    let model = load_model(dir)?;
    let data = load_data(spec)?;
    if data.classes != model.classes {
        return Err(format_err(format!(
            "data classes {:?} differ from the model's {:?}",
            data.classes, model.classes
        )));
    }
    Ok((model, data))
}

fn split_items(data: &ImageSet, split: Split) -> Result<(Vec<&Tensor>, Vec<usize>)> {
    let items: Vec<&LabeledImage> = data.split(split).collect();
    if items.is_empty() {
        bail!(Error::Domain(format!("the {} split is empty", split.as_str())));
    }
    Ok((
        items.iter().map(|i| &i.pixels).collect(),
        items.iter().map(|i| i.label).collect(),
    ))
}

#[derive(Serialize)]
struct PeakRow<'a> {
    subject: &'a str,
    sample: usize,
}

fn synth(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let config = &spec.config;
    let (records, peaks, synth) = synthesize(config)?;
    dir.subdir("records")?;
    let mut entries = Vec::with_capacity(records.len());
    let mut peak_rows = Vec::new();
    for (i, (rec, p)) in records.iter().zip(&peaks).enumerate() {
        let rel = PathBuf::from("records").join(format!("{}.ecgr", subject_label(i)));
        write_record(&dir.file(&rel.to_string_lossy()), rec)?;
        entries.push(ManifestEntry {
            path: rel,
            subject: rec.subject_id().to_string(),
            split: SplitTag::Auto,
        });
        peak_rows.extend(p.iter().map(|&sample| PeakRow {
            subject: rec.subject_id(),
            sample,
        }));
    }
    write_manifest(
        &dir.file("manifest.tsv"),
        &Manifest {
            profile: config.profile.name().into(),
            entries,
        },
    )?;
    dir.write_rows("peaks.csv", &peak_rows)?;
    dir.write_json("morphology.json", &synth.morphologies)?;
    eprintln!(
        "{} records, {} beats each",
        records.len(),
        config.synth.beats_per_subject
    );
    Ok(())
}

fn preprocess(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let config = &spec.config;
    let path = spec
        .inputs
        .manifest
        .as_ref()
        .ok_or_else(|| usage("--manifest is required"))?;
    let manifest = read_manifest(path)?;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let rec = read_record(&manifest.resolve(path, e))?;
        if rec.subject_id() != e.subject {
            return Err(format_err(format!(
                "{}: record subject {:?} but manifest says {:?}",
                e.path.display(),
                rec.subject_id(),
                e.subject
            )));
        }
        records.push((rec, e.split));
    }
    let (set, report) = build_imageset(&records, &config.pipeline, config.pipeline_seed())?;
    dir.write_bytes(IMAGESET_FILE, &encode_imageset(&set)?)?;
    dir.write_json("dataset.json", &report)?;
    dir.write_rows("records.csv", &report.records)?;
    if spec.inputs.png > 0 {
        let png_dir = dir.subdir("png")?;
        for (i, (rec, _)) in records.iter().enumerate() {
            let (coeffs, _) = beat_transforms(rec, &config.pipeline, record_seed(config.pipeline_seed(), i))?;
            for (k, c) in coeffs.iter().take(spec.inputs.png).enumerate() {
                let name = format!("{}_{k:03}.png", rec.subject_id());
                export_png(c, config.pipeline.scalogram.image_size, &png_dir.join(name))?;
            }
        }
    }
    eprintln!(
        "{} images over {} classes: {:?}",
        set.items.len(),
        set.classes.len(),
        report.split_counts
    );
    if !report.rejected_subjects.is_empty() {
        eprintln!("rejected subjects: {}", report.rejected_subjects.join(", "));
    }
    Ok(())
}

fn train_cmd(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let config = &spec.config;
    let data = load_data(spec)?;
    let model = model_for(config, &data)?;
    let outcome = train(&config.train, &model, &data, None)?;
    write_model(dir, &model, &data.classes, &outcome.best)?;
    dir.write_bytes("last.ecgb", &encode_checkpoint(&outcome.last))?;
    dir.write_json("history.json", &outcome.history)?;
    dir.write_rows("history.csv", &outcome.history.epochs)?;
    if let Some(last) = outcome.history.epochs.last() {
        eprintln!(
            "{} epochs, best epoch {:?}, final val acc {:.4}",
            outcome.history.epochs.len(),
            outcome.history.best_epoch,
            last.val_acc
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveRow<'a> {
    curve: String,
    label: &'a str,
    threshold: f64,
    far: f64,
    frr: f64,
}

fn eval(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let (model, data) = model_and_data(spec)?;
    let split = spec.inputs.split.unwrap_or(Split::Test);
    let (images, labels) = split_items(&data, split)?;
    let probs = predict(&model.params, &model.config, &images, EVAL_CHUNK)?;
    let loss = cross_entropy_value(&probs, &labels, None)?;
    let (report, eer) = metrics_report(&probs, &labels, &model.classes, loss)?;
    dir.write_json("metrics.json", &report)?;
    dir.write_rows("per_class.csv", &report.per_class)?;

    let mut header = vec!["true".to_string()];
    header.extend(model.classes.iter().cloned());
    let rows: Vec<Vec<String>> = report
        .confusion
        .iter()
        .zip(&model.classes)
        .map(|(row, name)| {
            std::iter::once(name.clone())
                .chain(row.iter().map(|c| c.to_string()))
                .collect()
        })
        .collect();
    dir.write_table("confusion.csv", &header, &rows)?;

    let mut curves = Vec::new();
    for (c, curve) in eer.curves.iter().enumerate() {
        if let Some(curve) = curve {
            for i in 0..curve.thresholds.len() {
                curves.push(CurveRow {
                    curve: c.to_string(),
                    label: &model.classes[c],
                    threshold: curve.thresholds[i],
                    far: curve.far[i],
                    frr: curve.frr[i],
                });
            }
        }
    }
    let pooled = eer_top5(&probs, &labels)?;
    for i in 0..pooled.thresholds.len() {
        curves.push(CurveRow {
            curve: "top5".into(),
            label: "top5",
            threshold: pooled.thresholds[i],
            far: pooled.far[i],
            frr: pooled.frr[i],
        });
    }
    dir.write_rows("far_frr.csv", &curves)?;
    eprintln!(
        "{} split: acc {:.4}, top5 {:.4}, macro F1 {:.4}, AUC {:.4}, EER {:.4}",
        split.as_str(),
        report.accuracy,
        report.top5_accuracy,
        report.macro_f1,
        report.roc_auc_macro,
        report.eer_macro
    );
    Ok(())
}

fn attack(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let (model, data) = model_and_data(spec)?;
    let (images, labels) = split_items(&data, spec.inputs.split.unwrap_or(Split::Test))?;
    let a = &spec.config.attack;
    let report = attack_sweep(
        &model.params,
        &model.config,
        &images,
        &labels,
        &a.epsilons,
        a.batch_size,
    )?;
    dir.write_json("attack.json", &report)?;
    dir.write_rows("attack.csv", &report.points)?;
    for p in &report.points {
        eprintln!("eps {:<8} acc {:.4} loss {:.4}", p.epsilon, p.accuracy, p.mean_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct FedSummary<'a> {
    partition_sizes: Vec<usize>,
    partition_classes: Vec<Vec<String>>,
    rounds: &'a [ecgauth::federated::RoundRecord],
}

fn fedsim(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    let config = &spec.config;
    let data = load_data(spec)?;
    let model = model_for(config, &data)?;
    let outcome = run_rounds(&config.federated, &config.train, &model, &data, None)?;
    write_model(dir, &model, &data.classes, &outcome.global)?;
    let partition_classes = outcome
        .partitions
        .iter()
        .map(|p| {
            let mut c: Vec<String> = p.iter().map(|&i| data.classes[data.items[i].label].clone()).collect();
            c.sort();
            c.dedup();
            c
        })
        .collect();
    dir.write_json(
        "rounds.json",
        &FedSummary {
            partition_sizes: outcome.partitions.iter().map(Vec::len).collect(),
            partition_classes,
            rounds: &outcome.rounds,
        },
    )?;
    let n = outcome.partitions.len();
    let mut header: Vec<String> = [
        "round",
        "global_val_accuracy_before",
        "global_val_accuracy_after",
        "global_val_loss_after",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..n).map(|k| format!("client{k}_val_accuracy")));
    header.extend((0..n).map(|k| format!("client{k}_weight")));
    let rows: Vec<Vec<String>> = outcome
        .rounds
        .iter()
        .map(|r| {
            let mut row = vec![
                (r.round + 1).to_string(),
                r.global_val_accuracy_before.to_string(),
                r.global_val_accuracy_after.to_string(),
                r.global_val_loss_after.to_string(),
            ];
            row.extend(
                r.client_val_accuracy
                    .iter()
                    .map(|a| a.map(|v| v.to_string()).unwrap_or_default()),
            );
            row.extend(r.weights.iter().map(|w| w.to_string()));
            row
        })
        .collect();
    dir.write_table("rounds.csv", &header, &rows)?;
    for r in &outcome.rounds {
        eprintln!(
            "round {:>3}: global val acc {:.4} -> {:.4}",
            r.round + 1,
            r.global_val_accuracy_before,
            r.global_val_accuracy_after
        );
    }
    Ok(())
}

fn report(spec: &RunSpec, dir: &RunDir) -> Result<()> {
    if spec.inputs.runs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    let mut rendered: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for run in &spec.inputs.runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .context("run path has no directory name")?;
        let out = dir.subdir(&name)?;
        let plots = plots::render_run(run, &out)?;
        if plots.is_empty() {
            return Err(format_err(format!("{}: no plottable outputs", run.display())));
        }
        for p in &plots {
            eprintln!("{}", out.join(p).display());
        }
        rendered.insert(name, plots);
    }
    dir.write_json("plots.json", &rendered)
}

/// Inputs pointing at a model run also inherit its data source.
pub fn inherit_data(model_dir: &Path, data: Option<PathBuf>) -> Result<(ExperimentConfig, Inputs)> {
    let parent = RunSpec::read_dir(model_dir)?;
    if parent.command != "train" && parent.command != "fedsim" {
        return Err(usage(format!(
            "{} is a {} run, not a model",
            model_dir.display(),
            parent.command
        )));
    }
    let inputs = Inputs {
        data: data.or(parent.inputs.data),
        model: Some(model_dir.to_path_buf()),
        ..Inputs::default()
    };
    Ok((parent.config, inputs))
}
