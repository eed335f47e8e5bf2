use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::report::{emit_report, Report, ReportRow, Significance};
use super::{hash_json, CheckpointChoice, ExperimentConfig};
use crate::data::{split_folds, write_atomic, FoldSplit, Frame, SliceSample};
use crate::error::{Error, Result};
use crate::losses::{AlphaMode, Supervision};
use crate::metrics::{aggregate, evaluate_case, paired_test, AggregateTable, CaseMetrics};
use crate::model::ModelParams;
use crate::train::{infer_volume, train, DecoderChoice, TrainOutcome, TrainOutput, ValidationVolume};

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.01, 0.1, 0.2, 0.3, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArm {
    Pce,
    Cr,
    Cps,
    PlsFixed,
    Pls,
}

pub const DEFAULT_STRATEGIES: [StrategyArm; 5] = [
    StrategyArm::Pce,
    StrategyArm::Cr,
    StrategyArm::Cps,
    StrategyArm::PlsFixed,
    StrategyArm::Pls,
];

impl StrategyArm {
    pub fn name(self) -> &'static str {
        match self {
            StrategyArm::Pce => "pce",
            StrategyArm::Cr => "cr",
            StrategyArm::Cps => "cps",
            StrategyArm::PlsFixed => "pls-fixed",
            StrategyArm::Pls => "pls",
        }
    }

    fn apply(self, config: &mut ExperimentConfig) {
        let t = &mut config.train;
        t.alpha_mode = AlphaMode::Random;
        t.supervision = match self {
            StrategyArm::Pce => Supervision::Pce,
            StrategyArm::Cr => Supervision::Cr,
            StrategyArm::Cps => Supervision::Cps,
            StrategyArm::PlsFixed => {
                t.alpha_mode = AlphaMode::Fixed;
                t.alpha_fixed = 0.5;
                Supervision::Pls
            }
            StrategyArm::Pls => Supervision::Pls,
        };
    }

    /// Pseudo-label arms report the main and the auxiliary decoder.
    fn decoders(self) -> Vec<DecoderChoice> {
        match self {
            StrategyArm::PlsFixed | StrategyArm::Pls => vec![DecoderChoice::Main, DecoderChoice::Aux],
            _ => vec![DecoderChoice::Main],
        }
    }
}

impl FromStr for StrategyArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DEFAULT_STRATEGIES
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown strategy '{s}'")))
    }
}

/// One trained configuration within an experiment.
#[derive(Debug, Clone)]
pub struct ArmSpec {
    pub name: String,
    pub config: ExperimentConfig,
    pub decoders: Vec<DecoderChoice>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderCases {
    pub decoder: DecoderChoice,
    pub cases: Vec<CaseMetrics>,
    pub aggregate: AggregateTable,
}

/// Outcome of one fold of one arm, persisted as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub fold: usize,
    pub config_hash: String,
    pub control_hash: String,
    pub fold_hash: String,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub results: Vec<DecoderCases>,
    pub wall_time_s: f64,
}

fn case_id(frame: &Frame) -> String {
    format!("{}_{}", frame.image.patient_id, frame.image.frame_id)
}

/// Segments every frame and scores it against its dense label.
pub fn evaluate_frames(
    params: &ModelParams<f32>,
    frames: &[&Frame],
    decoder: DecoderChoice,
    input_size: usize,
) -> Result<Vec<CaseMetrics>> {
    frames
        .iter()
        .map(|f| {
            let gt = f.dense.as_ref().ok_or_else(|| {
                Error::validation(format!("frame {} has no dense label to evaluate against", case_id(f)))
            })?;
            let pred = infer_volume(params, &f.image, decoder, input_size)?;
            evaluate_case(case_id(f), &pred, &gt.labels, f.image.spacing)
        })
        .collect()
}

fn training_slices(frames: &[&Frame]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for f in frames {
        out.extend(f.slices()?.into_iter().map(SliceSample::without_dense));
    }
    Ok(out)
}

fn validation_volumes(frames: &[&Frame]) -> Result<Vec<ValidationVolume>> {
    frames
        .iter()
        .map(|f| {
            let label = f.dense.as_ref().ok_or_else(|| {
                Error::validation(format!("validation frame {} has no dense label", case_id(f)))
            })?;
            Ok(ValidationVolume {
                image: f.image.clone(),
                label: label.labels.clone(),
            })
        })
        .collect()
}

fn frames_of<'a>(frames: &'a [Frame], patients: &[String]) -> Vec<&'a Frame> {
    frames
        .iter()
        .filter(|f| patients.binary_search(&f.image.patient_id).is_ok())
        .collect()
}

fn patient_ids(frames: &[Frame]) -> Vec<String> {
    let mut ids: Vec<String> = frames.iter().map(|f| f.image.patient_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn select_params(config: &ExperimentConfig, outcome: TrainOutcome) -> ModelParams<f32> {
    match (config.eval_checkpoint, outcome.best) {
        (CheckpointChoice::Best, Some((_, best))) => best,
        _ => outcome.final_params,
    }
}

fn run_fold(
    arm: &ArmSpec,
    frames: &[Frame],
    split: &FoldSplit,
    fold: usize,
    dir: &Path,
) -> Result<RunRecord> {
    let start = Instant::now();
    let config = &arm.config;
    let test_patients = split.patients_in(fold);
    let mut train_patients: Vec<String> = (0..split.k)
        .filter(|&k| k != fold)
        .flat_map(|k| split.patients_in(k))
        .collect();
    train_patients.sort();
    if config.val_patients >= train_patients.len() {
        return Err(Error::validation(format!(
            "val_patients {} leaves no training patients in fold {fold}",
            config.val_patients
        )));
    }
    let val_patients: Vec<String> = train_patients.drain(..config.val_patients).collect();
    let samples = training_slices(&frames_of(frames, &train_patients))?;
    let validation = validation_volumes(&frames_of(frames, &val_patients))?;
    let output = TrainOutput {
        dir: dir.to_path_buf(),
        config_hash: config.hash(),
    };
    info!(
        "arm {} fold {fold}: {} training slices, {} test patients",
        arm.name,
        samples.len(),
        test_patients.len()
    );
    let outcome = train(&config.train, &config.model, &samples, &validation, Some(&output))?;
    let params = select_params(config, outcome);
    let test_frames = frames_of(frames, &test_patients);
    let mut results = Vec::with_capacity(arm.decoders.len());
    for &decoder in &arm.decoders {
        let cases = evaluate_frames(&params, &test_frames, decoder, config.train.input_size)?;
        let aggregate = aggregate(&cases)?;
        results.push(DecoderCases {
            decoder,
            cases,
            aggregate,
        });
    }
    let record = RunRecord {
        arm: arm.name.clone(),
        fold,
        config_hash: config.hash(),
        control_hash: config.control_hash(),
        fold_hash: hash_json(split),
        train_patients,
        val_patients,
        test_patients,
        results,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("metrics.json"), &record)?;
    Ok(record)
}

fn decoder_label(decoder: DecoderChoice) -> &'static str {
    match decoder {
        DecoderChoice::Main => "d1",
        DecoderChoice::Aux => "d2",
    }
}

/// Trains and evaluates every arm over all folds, pools cases per arm and
/// decoder, and writes `config.json`, `runs/` and the report.
fn run_arms(kind: &str, base: &ExperimentConfig, arms: &[ArmSpec], baseline: Option<&str>) -> Result<Report> {
    base.validate()?;
    for arm in arms {
        arm.config.validate()?;
        if arm.config.control_hash() != base.control_hash() {
            return Err(Error::validation(format!(
                "arm {} differs from the base configuration beyond the ablated factor",
                arm.name
            )));
        }
    }
    let out = &base.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), base)?;
    let frames = base.load_frames()?;
    let split = split_folds(&patient_ids(&frames), base.folds, base.fold_seed)?;

    let mut rows = Vec::new();
    for arm in arms {
        let mut pooled: BTreeMap<usize, Vec<CaseMetrics>> = BTreeMap::new();
        for fold in 0..split.k {
            let dir: PathBuf = out.join("runs").join(&arm.name).join(format!("fold{fold}"));
            let record = run_fold(arm, &frames, &split, fold, &dir)?;
            for (i, r) in record.results.into_iter().enumerate() {
                pooled.entry(i).or_default().extend(r.cases);
            }
        }
        for (i, &decoder) in arm.decoders.iter().enumerate() {
            let mut cases = pooled.remove(&i).unwrap_or_default();
            cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            let method = if arm.decoders.len() > 1 {
                format!("{} {}", arm.name, decoder_label(decoder))
            } else {
                arm.name.clone()
            };
            rows.push(ReportRow {
                method,
                arm: arm.name.clone(),
                decoder,
                lambda: arm.lambda,
                config_hash: arm.config.hash(),
                aggregate: aggregate(&cases)?,
                vs_baseline: None,
                cases,
            });
        }
    }

    if let Some(name) = baseline {
        if let Some(base_row) = rows.iter().find(|r| r.method == name).cloned() {
            let reference: Vec<f64> = base_row.cases.iter().map(CaseMetrics::mean_dsc).collect();
            for row in rows.iter_mut().filter(|r| r.method != name) {
                let values: Vec<f64> = row.cases.iter().map(CaseMetrics::mean_dsc).collect();
                let test = paired_test(&values, &reference)?;
                row.vs_baseline = Some(Significance::new(name, test));
            }
        }
    }

    let report = Report::new(kind, base, hash_json(&split), split.k, rows);
    emit_report(&report, &base.report_formats, out)?;
    Ok(report)
}

/// K-fold cross-validation of the configured strategy.
pub fn run_cv(config: &ExperimentConfig) -> Result<Report> {
    let arm = ArmSpec {
        name: config.train.supervision.name().to_string(),
        config: config.clone(),
        decoders: vec![config.train.eval_decoder],
        lambda: Some(config.train.lambda_pls),
    };
    run_arms("cv", config, &[arm], None)
}

/// Cross-validates each weight of the auxiliary term, everything else fixed.
pub fn ablate_lambda(config: &ExperimentConfig, values: &[f64]) -> Result<Report> {
    if values.is_empty() {
        return Err(Error::validation("lambda sweep needs at least one value"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::validation(format!("lambda {v} must be finite and >= 0")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let arms: Vec<ArmSpec> = sorted
        .iter()
        .map(|&lambda| {
            let mut c = config.clone();
            c.train.lambda_pls = lambda;
            ArmSpec {
                name: format!("lambda={lambda}"),
                config: c,
                decoders: vec![config.train.eval_decoder],
                lambda: Some(lambda),
            }
        })
        .collect();
    run_arms("ablate-lambda", config, &arms, None)
}

/// Cross-validates each supervision strategy; pseudo-label arms get a row per decoder.
pub fn ablate_supervision(config: &ExperimentConfig, strategies: &[StrategyArm]) -> Result<Report> {
    if strategies.is_empty() {
        return Err(Error::validation("supervision ablation needs at least one strategy"));
    }
    let mut sorted = strategies.to_vec();
    sorted.sort();
    sorted.dedup();
    let arms: Vec<ArmSpec> = sorted
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            s.apply(&mut c);
            ArmSpec {
                name: s.name().to_string(),
                config: c,
                decoders: s.decoders(),
                lambda: Some(config.train.lambda_pls),
            }
        })
        .collect();
    run_arms("ablate-supervision", config, &arms, Some(StrategyArm::Pce.name()))
}

/// Trains one model on every patient (minus the validation patients).
pub fn train_single(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), config)?;
    let frames = config.load_frames()?;
    let mut patients = patient_ids(&frames);
    if config.val_patients >= patients.len() {
        return Err(Error::validation("val_patients leaves no training patients"));
    }
    let val: Vec<String> = patients.drain(..config.val_patients).collect();
    let samples = training_slices(&frames_of(&frames, &patients))?;
    let validation = validation_volumes(&frames_of(&frames, &val))?;
    let output = TrainOutput {
        dir: out.join("train"),
        config_hash: config.hash(),
    };
    train(&config.train, &config.model, &samples, &validation, Some(&output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.synth = SynthSpec::new(4, [2, 32, 32], 3);
        c.model.levels = 2;
        c.model.base_width = 4;
        c.train.max_iterations = 3;
        c.train.batch_size = 2;
        c.train.input_size = 32;
        c.folds = 2;
        c.output_dir = out.to_path_buf();
        c
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in DEFAULT_STRATEGIES {
            assert_eq!(s.name().parse::<StrategyArm>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), serde_json::Value::String(s.name().into()));
        }
        assert!("pls-random".parse::<StrategyArm>().is_err());
    }

    #[test]
    fn cv_evaluates_every_patient_once() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path());
        let report = run_cv(&config).unwrap();
        assert_eq!(report.rows.len(), 1);
        let ids: Vec<&str> = report.rows[0].cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["001_01", "001_02", "002_01", "002_02", "003_01", "003_02", "004_01", "004_02"]);
        let mut tested = Vec::new();
        for fold in 0..2 {
            let path = dir.path().join(format!("runs/pls/fold{fold}/metrics.json"));
            let rec: RunRecord = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
            assert_eq!(rec.results[0].cases.len(), 2 * rec.test_patients.len());
            assert!(rec.test_patients.iter().all(|p| !rec.train_patients.contains(p)));
            tested.extend(rec.test_patients);
            assert!(dir.path().join(format!("runs/pls/fold{fold}/history.jsonl")).exists());
            assert!(dir.path().join(format!("runs/pls/fold{fold}/checkpoint_final/manifest.json")).exists());
        }
        tested.sort();
        assert_eq!(tested, ["001", "002", "003", "004"]);
        for name in ["config.json", "report.json", "report.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
    }

    #[test]
    fn lambda_zero_reproduces_scribble_only_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(&dir.path().join("lambda"));
        let sweep = ablate_lambda(&config, &[0.0, 0.5]).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        assert_eq!(sweep.rows[0].lambda, Some(0.0));
        let pce = ablate_supervision(&tiny(&dir.path().join("sup")), &[StrategyArm::Pce]).unwrap();
        assert_eq!(pce.rows.len(), 1);
        assert_eq!(sweep.rows[0].cases, pce.rows[0].cases);
    }

    #[test]
    fn pseudo_label_arms_report_both_decoders() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path());
        let report = ablate_supervision(&config, &[StrategyArm::Pls, StrategyArm::Pce]).unwrap();
        let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["pce", "pls d1", "pls d2"]);
        assert!(report.rows[0].vs_baseline.is_none());
        assert!(report.rows[1].vs_baseline.is_some());
        assert!(ablate_supervision(&config, &[]).is_err());
        assert!(ablate_lambda(&config, &[]).is_err());
        assert!(ablate_lambda(&config, &[-1.0]).is_err());
    }
}
