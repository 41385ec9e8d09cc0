//! End-to-end flow: seed training, morphing, two-phase QAT, export and
//! reporting. Each stage reads the previous stage's checkpoint from an
//! output directory and writes its own, so stages can run as separate
//! processes.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::MacroConfig;
use crate::data::{load_cifar10_binary, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::mapper::{MappingPlan, PlanMetrics};
use crate::model::{load_checkpoint, save_checkpoint, ArchSpec, ForwardOptions, ModelGraph, Precision};
use crate::morph::{morph_iterate, MorphConfig, MorphReport};
use crate::qat::{
    attach_act_quant, calibrate_adc_step, clipping_rate, export_integer_model, phase1_train, phase2_train,
    quantized, save_integer_model,
};
use crate::train::{evaluate, train, EpochLog, TrainConfig};
use crate::{rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticConfig),
    /// CIFAR-10 binary batches, optionally reduced to a class subset,
    /// truncated and average-pooled for desk-scale runs.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        classes: Option<Vec<usize>>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "one")]
        downsample: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic(s) => s.generate(),
            DataConfig::Cifar10 {
                dir,
                classes,
                train_limit,
                test_limit,
                downsample,
            } => {
                let (mut tr, mut te) = load_cifar10_binary(dir)?;
                if let Some(c) = classes {
                    tr = tr.select_classes(c)?;
                    te = te.select_classes(c)?;
                }
                if let Some(n) = train_limit {
                    tr = tr.take(*n);
                }
                if let Some(n) = test_limit {
                    te = te.take(*n);
                }
                Ok((tr.downsample(*downsample)?, te.downsample(*downsample)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Training images (from the start of the set) used to pick ADC steps.
    pub batch: usize,
    pub percentile: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            percentile: 99.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphStageConfig {
    #[serde(flatten)]
    pub morph: MorphConfig,
    /// Budget as a fraction of the seed model's bitlines, used when `target_bl` is 0.
    pub target_fraction: f64,
}

impl Default for MorphStageConfig {
    fn default() -> Self {
        Self {
            morph: MorphConfig::default(),
            target_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "macro")]
    pub macro_cfg: MacroConfig,
    pub model: ArchSpec,
    pub data: DataConfig,
    pub seed: TrainConfig,
    pub morph: MorphStageConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub calibration: CalibrationConfig,
    /// Multiplies every epoch count (at least one epoch remains).
    pub scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let tc = |epochs, lr| TrainConfig {
            epochs,
            lr,
            ..TrainConfig::default()
        };
        Self {
            macro_cfg: MacroConfig::default(),
            model: ArchSpec::ToyCnn,
            data: DataConfig::default(),
            seed: tc(20, 0.01),
            morph: MorphStageConfig::default(),
            phase1: tc(10, 0.001),
            phase2: tc(10, 0.01),
            calibration: CalibrationConfig::default(),
            scale: 1.0,
        }
    }
}

fn scale_epochs(t: &mut TrainConfig, s: f64) {
    if t.epochs > 0 {
        t.epochs = ((t.epochs as f64 * s).round() as usize).max(1);
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Copy with every epoch count multiplied by `scale` (and `self.scale`).
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        let s = self.scale * scale;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("epoch scale must be positive, got {s}")));
        }
        let mut c = self.clone();
        for t in [
            &mut c.seed,
            &mut c.morph.morph.shrink,
            &mut c.morph.morph.finetune,
            &mut c.phase1,
            &mut c.phase2,
        ] {
            scale_epochs(t, s);
        }
        if c.morph.morph.ramp_epochs > 0 {
            c.morph.morph.ramp_epochs = ((c.morph.morph.ramp_epochs as f64 * s).round() as usize).max(1);
        }
        c.scale = 1.0;
        Ok(c)
    }
}

/// Stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainSeed,
    Morph,
    QatPhase1,
    QatPhase2,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::TrainSeed, Stage::Morph, Stage::QatPhase1, Stage::QatPhase2];

    pub fn command(self) -> &'static str {
        match self {
            Stage::TrainSeed => "train-seed",
            Stage::Morph => "morph",
            Stage::QatPhase1 => "qat-phase1",
            Stage::QatPhase2 => "qat-phase2",
        }
    }

    pub fn checkpoint(self) -> &'static str {
        match self {
            Stage::TrainSeed => "seed.ckpt",
            Stage::Morph => "morphed.ckpt",
            Stage::QatPhase1 => "phase1.ckpt",
            Stage::QatPhase2 => "phase2.ckpt",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Stage::TrainSeed => "seed.json",
            Stage::Morph => "morph_report.json",
            Stage::QatPhase1 => "phase1.json",
            Stage::QatPhase2 => "phase2.json",
        }
    }

    /// Independent RNG stream per stage so stages can run in separate processes.
    fn rng(self, seed: u64) -> Rng {
        rng(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self as u64 + 1)))
    }
}

pub const INTEGER_MODEL_FILE: &str = "model.cimint";

/// Checkpoint written by `stage`, or an error naming the command that produces it.
pub fn load_stage(out: &Path, stage: Stage) -> Result<ModelGraph> {
    let path = out.join(stage.checkpoint());
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: stage.command().to_string(),
            path: path.display().to_string(),
        });
    }
    load_checkpoint(path)
}

fn write_json<T: Serialize>(path: PathBuf, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn read_summary<T: for<'de> Deserialize<'de>>(out: &Path, stage: Stage) -> Result<T> {
    let path = out.join(stage.summary());
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: stage.command().to_string(),
            path: path.display().to_string(),
        });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Summary {
    pub epochs: Vec<EpochLog>,
    pub phase1_accuracy: f64,
    /// Phase-1 model evaluated with partial-sum quantization, before any Phase-2 training.
    pub psum_ptq_accuracy: f64,
    pub accuracy: f64,
    pub clipping_rate: f64,
    pub power_of_two: bool,
    pub scale_errors: Vec<(String, f64)>,
}

/// Everything a stage needs: configuration, data and where artifacts go.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub train: Dataset,
    pub test: Dataset,
}

impl Pipeline {
    /// `cfg` should already be scaled.
    pub fn new(cfg: PipelineConfig, seed: u64, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out)?;
        let (train, test) = cfg.data.load()?;
        Ok(Self {
            cfg,
            seed,
            out,
            train,
            test,
        })
    }

    fn eval_with(&self, model: &ModelGraph, fwd: &ForwardOptions) -> Result<f64> {
        evaluate(model, &self.test, fwd)
    }

    /// Accuracy with the activation quantizers (if attached) and float weights.
    pub fn float_accuracy(&self, model: &ModelGraph) -> Result<f64> {
        let fwd = ForwardOptions {
            act_quant: model.layers.iter().any(|l| l.quant.act.is_some()),
            macro_cfg: Some(&self.cfg.macro_cfg),
            ..Default::default()
        };
        self.eval_with(model, &fwd)
    }

    pub fn build_model(&self) -> Result<ModelGraph> {
        self.cfg.model.build(
            self.train.channels,
            self.train.resolution,
            self.train.num_classes,
            &mut Stage::TrainSeed.rng(self.seed),
        )
    }

    fn calibration_batch(&self) -> crate::tensor::Tensor {
        let n = self.cfg.calibration.batch.clamp(1, self.train.len());
        self.train.batch(&(0..n).collect::<Vec<_>>()).0
    }

    /// Train the seed model with activation quantizers attached from the start.
    pub fn train_seed(&self) -> Result<(ModelGraph, StageSummary)> {
        let mut rng = Stage::TrainSeed.rng(self.seed);
        let mut model = self.cfg.model.build(
            self.train.channels,
            self.train.resolution,
            self.train.num_classes,
            &mut rng,
        )?;
        let cfg = self.cfg.macro_cfg;
        attach_act_quant(&mut model, &cfg, &self.calibration_batch())?;
        let fwd = ForwardOptions {
            train_bn: true,
            act_quant: true,
            macro_cfg: Some(&cfg),
            ..Default::default()
        };
        let epochs = train(&mut model, &self.train, &self.cfg.seed, &fwd, &mut rng, None)?;
        let accuracy = self.float_accuracy(&model)?;
        info!("seed accuracy {accuracy:.4}");
        save_checkpoint(&model, self.out.join(Stage::TrainSeed.checkpoint()))?;
        let s = StageSummary {
            stage: Stage::TrainSeed,
            epochs,
            accuracy,
        };
        write_json(self.out.join(Stage::TrainSeed.summary()), &s)?;
        Ok((model, s))
    }

    pub fn morph_config(&self, seed_model: &ModelGraph) -> Result<MorphConfig> {
        let mut mc = self.cfg.morph.morph.clone();
        if mc.target_bl == 0 {
            let base = MappingPlan::build(seed_model, &self.cfg.macro_cfg)?.used_bitlines();
            mc.target_bl = (base as f64 * self.cfg.morph.target_fraction).floor() as usize;
        }
        Ok(mc)
    }

    pub fn morph(&self) -> Result<(ModelGraph, MorphReport)> {
        let seed_model = load_stage(&self.out, Stage::TrainSeed)?;
        let mc = self.morph_config(&seed_model)?;
        let mut rng = Stage::Morph.rng(self.seed);
        let (model, report) = morph_iterate(
            &seed_model,
            &mc,
            &self.cfg.macro_cfg,
            &self.train,
            &self.test,
            &mut rng,
            Some(&self.out),
        )?;
        save_checkpoint(&model, self.out.join(Stage::Morph.checkpoint()))?;
        write_json(self.out.join(Stage::Morph.summary()), &report)?;
        Ok((model, report))
    }

    pub fn phase1(&self) -> Result<(ModelGraph, StageSummary)> {
        let mut model = load_stage(&self.out, Stage::Morph)?;
        let cfg = self.cfg.macro_cfg;
        let mut rng = Stage::QatPhase1.rng(self.seed);
        let epochs = phase1_train(&mut model, &self.train, &cfg, &self.cfg.phase1, &mut rng)?;
        let accuracy = self.eval_with(&model, &quantized(&cfg, Precision::WeightQuant))?;
        info!("phase 1 accuracy {accuracy:.4}");
        save_checkpoint(&model, self.out.join(Stage::QatPhase1.checkpoint()))?;
        let s = StageSummary {
            stage: Stage::QatPhase1,
            epochs,
            accuracy,
        };
        write_json(self.out.join(Stage::QatPhase1.summary()), &s)?;
        Ok((model, s))
    }

    /// Calibrate ADC steps, train with partial-sum quantization, and export the integer model.
    pub fn phase2(&self, power_of_two: bool) -> Result<(ModelGraph, Phase2Summary)> {
        let mut model = load_stage(&self.out, Stage::QatPhase1)?;
        let cfg = self.cfg.macro_cfg;
        let phase1_accuracy = self.eval_with(&model, &quantized(&cfg, Precision::WeightQuant))?;
        let batch = self.calibration_batch();
        calibrate_adc_step(&mut model, &cfg, &batch, self.cfg.calibration.percentile)?;
        let psum = quantized(&cfg, Precision::PsumQuant);
        let psum_ptq_accuracy = self.eval_with(&model, &psum)?;
        let mut rng = Stage::QatPhase2.rng(self.seed);
        let epochs = phase2_train(&mut model, &self.train, &cfg, &self.cfg.phase2, &mut rng)?;
        let accuracy = self.eval_with(&model, &psum)?;
        info!("phase 2 accuracy {accuracy:.4} (post-training psum quantization {psum_ptq_accuracy:.4})");
        save_checkpoint(&model, self.out.join(Stage::QatPhase2.checkpoint()))?;
        let im = export_integer_model(&model, &cfg, power_of_two)?;
        save_integer_model(&im, self.out.join(INTEGER_MODEL_FILE))?;
        let s = Phase2Summary {
            epochs,
            phase1_accuracy,
            psum_ptq_accuracy,
            accuracy,
            clipping_rate: clipping_rate(&model, &cfg, &batch)?,
            power_of_two,
            scale_errors: im.scale_errors(),
        };
        write_json(self.out.join(Stage::QatPhase2.summary()), &s)?;
        Ok((model, s))
    }

    pub fn run_all(&self, power_of_two: bool) -> Result<PipelineReport> {
        self.train_seed()?;
        self.morph()?;
        self.phase1()?;
        self.phase2(power_of_two)?;
        self.report()
    }

    /// Hardware metrics and stage accuracies for the seed and final models.
    pub fn report(&self) -> Result<PipelineReport> {
        let cfg = &self.cfg.macro_cfg;
        let seed_model = load_stage(&self.out, Stage::TrainSeed)?;
        let seed: StageSummary = read_summary(&self.out, Stage::TrainSeed)?;
        let morph: MorphReport = read_summary(&self.out, Stage::Morph)?;
        let morphed = load_stage(&self.out, Stage::Morph)?;
        let p1: StageSummary = read_summary(&self.out, Stage::QatPhase1)?;
        let p2: Phase2Summary = read_summary(&self.out, Stage::QatPhase2)?;
        let target = morph.target_bl;
        let baseline = ReportRow::new(
            "baseline",
            &seed_model,
            cfg,
            Some(target),
            Accuracies {
                seed: Some(seed.accuracy),
                ..Accuracies::default()
            },
        )?;
        let adapted = ReportRow::new(
            "adapted",
            &morphed,
            cfg,
            Some(target),
            Accuracies {
                seed: Some(seed.accuracy),
                morph: Some(morph.final_snapshot().accuracy),
                phase1: Some(p1.accuracy),
                psum_ptq: Some(p2.psum_ptq_accuracy),
                phase2: Some(p2.accuracy),
            },
        )?;
        let report = PipelineReport {
            deltas: deltas(&baseline.metrics, &adapted.metrics),
            rows: vec![baseline, adapted],
        };
        write_json(self.out.join("report.json"), &report)?;
        fs::write(self.out.join("report.csv"), report.to_csv())?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    #[serde(rename = "Seed Acc", skip_serializing_if = "Option::is_none")]
    pub seed: Option<f64>,
    #[serde(rename = "Morph Acc", skip_serializing_if = "Option::is_none")]
    pub morph: Option<f64>,
    #[serde(rename = "Phase1 Acc", skip_serializing_if = "Option::is_none")]
    pub phase1: Option<f64>,
    #[serde(rename = "Psum PTQ Acc", skip_serializing_if = "Option::is_none")]
    pub psum_ptq: Option<f64>,
    #[serde(rename = "Phase2 Acc", skip_serializing_if = "Option::is_none")]
    pub phase2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    #[serde(flatten)]
    pub metrics: PlanMetrics,
    #[serde(flatten)]
    pub accuracies: Accuracies,
}

impl ReportRow {
    pub fn new(
        label: &str,
        model: &ModelGraph,
        cfg: &MacroConfig,
        target_bl: Option<usize>,
        accuracies: Accuracies,
    ) -> Result<Self> {
        let plan = MappingPlan::build(model, cfg)?;
        // a baseline above the budget has no usage against it
        let target = target_bl.filter(|&t| plan.macro_usage(t).is_ok());
        let metrics = plan.report(model, target, cfg.adc_bits())?.metrics;
        Ok(Self {
            model: label.to_string(),
            metrics,
            accuracies,
        })
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "Model",
    "Param (M)",
    "BLs",
    "MACs",
    "Macro Usage",
    "Seed Acc",
    "Morph Acc",
    "Phase1 Acc",
    "Psum PTQ Acc",
    "Phase2 Acc",
    "Partial sum Storage",
    "Load Weight Latency",
    "Computing Latency",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl ReportRow {
    pub fn csv_fields(&self) -> Vec<String> {
        let m = &self.metrics;
        let a = &self.accuracies;
        vec![
            self.model.clone(),
            format!("{:.4}", m.params_m),
            m.bls.to_string(),
            m.macs.to_string(),
            opt(m.macro_usage),
            opt(a.seed),
            opt(a.morph),
            opt(a.phase1),
            opt(a.psum_ptq),
            opt(a.phase2),
            m.partial_sum_storage.to_string(),
            m.load_weight_latency.to_string(),
            m.computing_latency.to_string(),
        ]
    }
}

/// Relative change from `base` to `new` as a whole percentage, e.g. `-79%`.
pub fn percent_delta(base: f64, new: f64) -> String {
    if base == 0.0 {
        return "n/a".into();
    }
    let d = crate::qat::round_half_away((new - base) / base * 100.0);
    if d > 0.0 {
        format!("+{d}%")
    } else {
        format!("{d}%").replace("-0%", "0%")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    #[serde(rename = "Param (M)")]
    pub params: String,
    #[serde(rename = "BLs")]
    pub bls: String,
    #[serde(rename = "MACs")]
    pub macs: String,
    #[serde(rename = "Partial sum Storage")]
    pub partial_sum_storage: String,
    #[serde(rename = "Load Weight Latency")]
    pub load_weight_latency: String,
    #[serde(rename = "Computing Latency")]
    pub computing_latency: String,
}

pub fn deltas(base: &PlanMetrics, new: &PlanMetrics) -> MetricDeltas {
    let f = |a: usize, b: usize| percent_delta(a as f64, b as f64);
    MetricDeltas {
        params: percent_delta(base.params_m, new.params_m),
        bls: f(base.bls, new.bls),
        macs: f(base.macs, new.macs),
        partial_sum_storage: f(base.partial_sum_storage, new.partial_sum_storage),
        load_weight_latency: f(base.load_weight_latency, new.load_weight_latency),
        computing_latency: f(base.computing_latency, new.computing_latency),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub rows: Vec<ReportRow>,
    /// Adapted relative to baseline.
    pub deltas: MetricDeltas,
}

impl PipelineReport {
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_fields().join(","));
            s.push('\n');
        }
        let d = &self.deltas;
        let delta_row = [
            "delta",
            &d.params,
            &d.bls,
            &d.macs,
            "",
            "",
            "",
            "",
            "",
            "",
            &d.partial_sum_storage,
            &d.load_weight_latency,
            &d.computing_latency,
        ];
        s.push_str(&delta_row.join(","));
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_formatting() {
        assert_eq!(percent_delta(100.0, 21.0), "-79%");
        assert_eq!(percent_delta(100.0, 150.0), "+50%");
        assert_eq!(percent_delta(3.0, 3.0), "0%");
        assert_eq!(percent_delta(1000.0, 999.9), "0%");
        assert_eq!(percent_delta(0.0, 1.0), "n/a");
    }

    #[test]
    fn config_defaults_and_scaling() {
        let c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.seed.lr, 0.01);
        assert_eq!(c.morph.morph.shrink.lr, 0.05);
        assert_eq!(c.morph.morph.finetune.lr, 0.01);
        assert_eq!(c.phase1.lr, 0.001);
        assert_eq!(c.phase2.lr, 0.01);
        let s = c.scaled(0.05).unwrap();
        assert_eq!(s.seed.epochs, 1);
        assert_eq!(s.morph.morph.shrink.epochs, 1);
        assert_eq!(s.morph.morph.ramp_epochs, 1);
        let s = c.scaled(0.5).unwrap();
        assert_eq!((s.morph.morph.shrink.epochs, s.morph.morph.finetune.epochs), (8, 5));
        assert!(c.scaled(0.0).is_err());
        let j = r#"{"macro":{"adc_bits":10},"model":{"arch":"vgg9"},"morph":{"target_bl":100,"iterations":1},"scale":0.5}"#;
        let c = PipelineConfig::from_json(j).unwrap();
        assert_eq!(c.macro_cfg.adc_bits(), 10);
        assert_eq!(c.morph.morph.target_bl, 100);
        assert_eq!(c.scaled(1.0).unwrap().seed.epochs, 10);
        assert!(PipelineConfig::from_json(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn missing_checkpoint_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_stage(dir.path(), Stage::Morph).unwrap_err();
        assert!(e.to_string().contains("morph"), "{e}");
    }
}
