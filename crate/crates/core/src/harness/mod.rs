//! Experiment driver: guarded cohorts, paired variant comparisons across
//! seeds, sample-size sweeps and the threshold calibration study.

mod report;
pub mod svg;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cohort::{load_cohort, split_cohort, Cohort, PatientRecord, Schema, Task};
use crate::error::{Error, Result};
use crate::fusion::{fusionformer_forward, train_fusionformer, FusionFormerParams, TrainingCurves};
use crate::guards::{guard_cohort, GuardAudit, GuardConfig, Lexicon, Lexicons, DEFAULT_BUFFER_HOURS};
use crate::metrics::{auc_for, auprc, calibrate_threshold, macro_ovr_auc, roc_auc, roc_points, BinaryCounts, ThresholdPolicy, DEFAULT_THRESHOLD};
use crate::moe::{
    ensemble_from_stack, ensemble_predict, fit_late_concat, late_concat_fuse, late_concat_predict, oof_stack, restrict_stack, LateConcatParams,
    MetaLayout, MoeParams, Stacked,
};
use crate::nn::{expert_predict, ExpertConfigs, ExpertKind};
use crate::rng;
use crate::synth::{generate_cohort, GenSpec};
use crate::ProbVector;

pub use report::{emit_report, Format, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    StaticOnly,
    TemporalOnly,
    NlpOnly,
    LateConcat,
    MoeTrimodal,
    MoeQuadmodal,
    Fusionformer,
}

const TRIMODAL: [ExpertKind; 3] = [ExpertKind::Historian, ExpertKind::Monitor, ExpertKind::Reader];

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::StaticOnly,
        Variant::TemporalOnly,
        Variant::NlpOnly,
        Variant::LateConcat,
        Variant::MoeTrimodal,
        Variant::MoeQuadmodal,
        Variant::Fusionformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StaticOnly => "STATIC_ONLY",
            Variant::TemporalOnly => "TEMPORAL_ONLY",
            Variant::NlpOnly => "NLP_ONLY",
            Variant::LateConcat => "LATE_CONCAT",
            Variant::MoeTrimodal => "MOE_TRIMODAL",
            Variant::MoeQuadmodal => "MOE_QUADMODAL",
            Variant::Fusionformer => "FUSIONFORMER",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    fn experts(self) -> &'static [ExpertKind] {
        match self {
            Variant::StaticOnly => &[ExpertKind::Historian],
            Variant::TemporalOnly => &[ExpertKind::Monitor],
            Variant::NlpOnly => &[ExpertKind::Reader],
            Variant::LateConcat | Variant::MoeTrimodal => &TRIMODAL,
            Variant::MoeQuadmodal => &ExpertKind::ALL,
            Variant::Fusionformer => &[],
        }
    }

    pub fn is_moe(self) -> bool {
        matches!(self, Variant::MoeTrimodal | Variant::MoeQuadmodal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardSettings {
    pub buffer_hours: f64,
    pub drug_lexicon: Option<PathBuf>,
    pub pathogen_lexicon: Option<PathBuf>,
}

impl Default for GuardSettings {
    fn default() -> Self {
        GuardSettings {
            buffer_hours: DEFAULT_BUFFER_HOURS,
            drug_lexicon: None,
            pathogen_lexicon: None,
        }
    }
}

impl GuardSettings {
    pub fn to_config(&self, seed: u64) -> Result<GuardConfig> {
        let drug = match &self.drug_lexicon {
            Some(p) => Lexicon::from_file(p)?,
            None => Lexicon::default_drugs(),
        };
        let pathogen = match &self.pathogen_lexicon {
            Some(p) => Lexicon::from_file(p)?,
            None => Lexicon::default_pathogens(),
        };
        Ok(GuardConfig {
            buffer_hours: self.buffer_hours,
            lexicons: Lexicons::new(drug, pathogen)?,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Preset name or path of a generator spec JSON file.
    pub genspec: Option<String>,
    /// Merged into the generator spec before validation.
    pub genspec_overrides: Value,
    /// Use a stored cohort instead of generating one per seed.
    pub cohort: Option<PathBuf>,
    /// Records to generate; the task's desk-scale size when unset.
    pub n: Option<usize>,
    pub task: Task,
    pub variants: Vec<Variant>,
    pub split: [f64; 3],
    pub seeds: Vec<u64>,
    pub guard: GuardSettings,
    pub experts: ExpertConfigs,
    pub moe: MoeParams,
    pub late_concat: LateConcatParams,
    pub fusionformer: FusionFormerParams,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            genspec: None,
            genspec_overrides: Value::Null,
            cohort: None,
            n: None,
            task: Task::Detection,
            variants: vec![Variant::MoeTrimodal],
            split: [0.7, 0.15, 0.15],
            seeds: vec![0],
            guard: GuardSettings::default(),
            experts: ExpertConfigs::default(),
            moe: MoeParams::default(),
            late_concat: LateConcatParams::default(),
            fusionformer: FusionFormerParams::desk(),
            out_dir: PathBuf::from("results"),
        }
    }
}

/// Desk-scale cohort size per task.
pub fn default_cohort_size(task: Task) -> usize {
    match task {
        Task::Detection => 8000,
        Task::Mortality => 1200,
        Task::Antibiotic => 2100,
    }
}

fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("config lists no variants".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("config lists no seeds".into()));
        }
        if self.split.iter().any(|&f| !(f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be positive and sum to 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name must be a non-empty file stem".into()));
        }
        if self.cohort.is_some() && self.genspec.is_some() {
            return Err(Error::Config("set either genspec or cohort, not both".into()));
        }
        if self.n == Some(0) {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if !(self.guard.buffer_hours >= 0.0) {
            return Err(Error::Config("guard.buffer_hours must be >= 0".into()));
        }
        self.moe.gate.validate().map_err(config_error)?;
        self.fusionformer.validate().map_err(config_error)?;
        self.experts.historian.validate().map_err(config_error)?;
        self.experts.monitor.validate().map_err(config_error)?;
        self.experts.reader.validate().map_err(config_error)?;
        self.experts.visionary.validate().map_err(config_error)?;
        if self.cohort.is_none() {
            self.genspec()?;
        }
        Ok(())
    }

    pub fn cohort_size(&self) -> usize {
        self.n.unwrap_or_else(|| default_cohort_size(self.task))
    }

    /// Resolved generator spec with overrides applied.
    pub fn genspec(&self) -> Result<GenSpec> {
        let base = match &self.genspec {
            None => GenSpec::preset(match self.task {
                Task::Detection => "detection_default",
                Task::Mortality => "mortality_default",
                Task::Antibiotic => "abx_default",
            })
            .expect("built-in preset"),
            Some(name) => match GenSpec::preset(name) {
                Some(s) => s,
                None => {
                    let text = std::fs::read_to_string(name)
                        .map_err(|e| Error::Config(format!("genspec '{name}' is neither a preset nor readable: {e}")))?;
                    GenSpec::from_json(&text).map_err(config_error)?
                }
            },
        };
        if self.genspec_overrides.is_null() {
            return Ok(base);
        }
        let mut value = serde_json::to_value(&base)?;
        merge_json(&mut value, &self.genspec_overrides);
        let spec: GenSpec =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("genspec_overrides: {e}")))?;
        spec.validate().map_err(config_error)?;
        Ok(spec)
    }

    fn moe_variant(&self) -> Variant {
        if self.variants.contains(&Variant::MoeQuadmodal) {
            Variant::MoeQuadmodal
        } else {
            Variant::MoeTrimodal
        }
    }
}

fn config_error(e: Error) -> Error {
    if e.is_config() {
        e
    } else {
        Error::Config(e.to_string())
    }
}

/// Guarded train/validation/test parts for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub schema: Schema,
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
    pub audit: GuardAudit,
    pub excluded: usize,
}

impl PreparedData {
    pub fn labels(&self, task: Task) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        Ok((self.train.labels(task)?, self.val.labels(task)?, self.test.labels(task)?))
    }
}

/// Generate (or load), guard and split the cohort for `seed`. Every variant
/// of that seed consumes the same output.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let cohort = match &config.cohort {
        Some(path) => load_cohort(path)?,
        None => generate_cohort(&config.genspec()?, config.cohort_size(), seed)?,
    };
    let guarded = guard_cohort(&cohort, config.task, &config.guard.to_config(seed)?)?;
    let labelled: Vec<usize> = (0..guarded.cohort.len())
        .filter(|&i| config.task.label(&guarded.cohort.records[i]).is_some())
        .collect();
    let cohort = guarded.cohort.subset(&labelled);
    let [a, b, c] = config.split;
    let (train, val, test) = split_cohort(&cohort, (a, b, c), config.task, seed)?;
    Ok(PreparedData {
        schema: cohort.schema.clone(),
        train,
        val,
        test,
        audit: guarded.audit,
        excluded: guarded.excluded.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub seed: u64,
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_auc: Option<f64>,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_macro_auc: Option<f64>,
    pub test_auprc: Option<f64>,
    pub overfit_gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds_ok: usize,
    pub train_auc: Option<MeanStd>,
    pub val_auc: Option<MeanStd>,
    pub test_auc: Option<MeanStd>,
    pub test_macro_auc: Option<MeanStd>,
    pub test_auprc: Option<MeanStd>,
    pub overfit_gap: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurves {
    pub seed: u64,
    pub curves: TrainingCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub task: Task,
    pub cells: Vec<CellResult>,
    pub summary: Vec<VariantSummary>,
    pub fusionformer_curves: Vec<SeedCurves>,
}

impl AblationReport {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }

    pub fn summary_of(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

struct Predictions {
    train: Vec<ProbVector>,
    val: Vec<ProbVector>,
    test: Vec<ProbVector>,
}

fn predict_parts(data: &PreparedData, f: impl Fn(&PatientRecord) -> Result<ProbVector> + Sync) -> Result<Predictions> {
    let run = |c: &Cohort| c.records.par_iter().map(&f).collect::<Result<Vec<_>>>();
    Ok(Predictions {
        train: run(&data.train)?,
        val: run(&data.val)?,
        test: run(&data.test)?,
    })
}

fn mean_ovr_auprc(probs: &[ProbVector], y: &[usize]) -> Result<f64> {
    let k = probs.first().map_or(0, Vec::len);
    if k == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        return auprc(&s, &y.iter().map(|&c| c == 1).collect::<Vec<_>>());
    }
    let present: Vec<usize> = (0..k).filter(|c| y.contains(c)).collect();
    let mut total = 0.0;
    for &c in &present {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += auprc(&s, &y.iter().map(|&l| l == c).collect::<Vec<_>>())?;
    }
    Ok(total / present.len() as f64)
}

fn score_cell(cell: &mut CellResult, p: &Predictions, y: &(Vec<usize>, Vec<usize>, Vec<usize>)) -> Result<()> {
    let train = auc_for(&p.train, &y.0)?;
    let val = auc_for(&p.val, &y.1)?;
    cell.train_auc = Some(train);
    cell.val_auc = Some(val);
    cell.test_auc = Some(auc_for(&p.test, &y.2)?);
    cell.test_macro_auc = Some(macro_ovr_auc(&p.test, &y.2)?);
    cell.test_auprc = Some(mean_ovr_auprc(&p.test, &y.2)?);
    cell.overfit_gap = Some(train - val);
    Ok(())
}

fn stack_for(config: &ExperimentConfig, data: &PreparedData, y: &[usize], seed: u64) -> Result<Option<Stacked>> {
    let mut kinds: Vec<ExpertKind> = config.variants.iter().flat_map(|v| v.experts().iter().copied()).collect();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        return Ok(None);
    }
    let layout = MetaLayout::new(&kinds, config.task.n_classes(), &data.schema, config.moe.context.as_deref())?;
    let refs: Vec<&PatientRecord> = data.train.records.iter().collect();
    let stacked = oof_stack(
        &refs,
        y,
        &layout,
        &data.schema,
        &config.experts,
        config.moe.folds,
        rng::derive_seed(seed, rng::streams::CELL),
    )?;
    Ok(Some(stacked))
}

fn run_variant(
    variant: Variant,
    config: &ExperimentConfig,
    data: &PreparedData,
    y: &(Vec<usize>, Vec<usize>, Vec<usize>),
    stacked: Option<&Stacked>,
    seed: u64,
) -> Result<(Predictions, Option<TrainingCurves>)> {
    let k = config.task.n_classes();
    let refs: Vec<&PatientRecord> = data.train.records.iter().collect();
    let need_stack = || stacked.ok_or_else(|| Error::InvalidInput("expert stack missing".into()));
    match variant {
        Variant::StaticOnly | Variant::TemporalOnly | Variant::NlpOnly => {
            let kind = variant.experts()[0];
            let s = need_stack()?;
            let model = s.experts.iter().find(|m| m.kind == kind).expect("stack covers variant");
            Ok((predict_parts(data, |r| expert_predict(model, r))?, None))
        }
        Variant::MoeTrimodal | Variant::MoeQuadmodal => {
            let layout = MetaLayout::new(variant.experts(), k, &data.schema, config.moe.context.as_deref())?;
            let sub = restrict_stack(need_stack()?, &refs, &layout)?;
            let (model, meta) = ensemble_from_stack(sub, &config.moe, rng::derive_seed(seed, rng::streams::CELL))?;
            let mut pred = predict_parts(data, |r| ensemble_predict(&model, r))?;
            // The gate's training input is the out-of-fold meta rows.
            pred.train = meta.rows.iter().map(|row| model.gate.predict(row)).collect::<Result<_>>()?;
            Ok((pred, None))
        }
        Variant::LateConcat => {
            let layout = MetaLayout::new(variant.experts(), k, &data.schema, Some(&[]))?;
            let sub = restrict_stack(need_stack()?, &refs, &layout)?;
            let oof = sub.meta.expert_probs.clone();
            let model = fit_late_concat(sub, &config.late_concat);
            let mut pred = predict_parts(data, |r| late_concat_predict(&model, r))?;
            pred.train = oof.iter().map(|p| late_concat_fuse(&model, p)).collect();
            Ok((pred, None))
        }
        Variant::Fusionformer => {
            let params = FusionFormerParams {
                seed: rng::derive_seed(seed, 0xff),
                ..config.fusionformer.clone()
            };
            let val: Vec<&PatientRecord> = data.val.records.iter().collect();
            let (model, curves) = train_fusionformer(&refs, &y.0, &val, &y.1, k, &data.schema, &params)?;
            Ok((predict_parts(data, |r| fusionformer_forward(&model, r))?, Some(curves)))
        }
    }
}

fn empty_cell(variant: Variant, seed: u64, task: Task) -> CellResult {
    CellResult {
        variant,
        seed,
        task,
        n_train: 0,
        n_val: 0,
        n_test: 0,
        train_auc: None,
        val_auc: None,
        test_auc: None,
        test_macro_auc: None,
        test_auprc: None,
        overfit_gap: None,
        error: None,
    }
}

fn context_message(variant: Variant, seed: u64, e: &Error) -> String {
    format!("{} seed {seed}: {e}", variant.name())
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> (Vec<CellResult>, Option<SeedCurves>) {
    let fail_all = |e: Error| {
        let cells = config
            .variants
            .iter()
            .map(|&v| CellResult {
                error: Some(context_message(v, seed, &e)),
                ..empty_cell(v, seed, config.task)
            })
            .collect();
        (cells, None)
    };
    let data = match prepare_data(config, seed) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let y = match data.labels(config.task) {
        Ok(y) => y,
        Err(e) => return fail_all(e),
    };
    let stack = stack_for(config, &data, &y.0, seed);
    let mut curves = None;
    let cells = config
        .variants
        .iter()
        .map(|&v| {
            let mut cell = CellResult {
                n_train: data.train.len(),
                n_val: data.val.len(),
                n_test: data.test.len(),
                ..empty_cell(v, seed, config.task)
            };
            let outcome = match (&stack, v) {
                (Err(e), v) if v != Variant::Fusionformer => Err(Error::InvalidInput(format!("expert stacking failed: {e}"))),
                (s, v) => run_variant(v, config, &data, &y, s.as_ref().ok().and_then(Option::as_ref), seed),
            }
            .and_then(|(pred, c)| {
                score_cell(&mut cell, &pred, &y)?;
                Ok(c)
            });
            match outcome {
                Ok(Some(c)) => curves = Some(SeedCurves { seed, curves: c }),
                Ok(None) => {}
                Err(e) => cell.error = Some(context_message(v, seed, &e)),
            }
            cell
        })
        .collect();
    (cells, curves)
}

fn summarize(variants: &[Variant], cells: &[CellResult]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&v| {
            let ok: Vec<&CellResult> = cells.iter().filter(|c| c.variant == v && c.error.is_none()).collect();
            let stat = |f: fn(&CellResult) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            VariantSummary {
                variant: v,
                seeds_ok: ok.len(),
                train_auc: stat(|c| c.train_auc),
                val_auc: stat(|c| c.val_auc),
                test_auc: stat(|c| c.test_auc),
                test_macro_auc: stat(|c| c.test_macro_auc),
                test_auprc: stat(|c| c.test_auprc),
                overfit_gap: stat(|c| c.overfit_gap),
            }
        })
        .collect()
}

/// Every variant for every seed on paired, guarded splits.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let per_seed: Vec<(Vec<CellResult>, Option<SeedCurves>)> =
        config.seeds.par_iter().map(|&s| run_seed(config, s)).collect();
    let mut cells = Vec::new();
    let mut curves = Vec::new();
    for (c, fc) in per_seed {
        cells.extend(c);
        curves.extend(fc);
    }
    // Fixed (variant, seed) order.
    cells.sort_by_key(|c| {
        (
            config.variants.iter().position(|&v| v == c.variant),
            config.seeds.iter().position(|&s| s == c.seed),
        )
    });
    let summary = summarize(&config.variants, &cells);
    Ok(AblationReport {
        name: config.name.clone(),
        task: config.task,
        cells,
        summary,
        fusionformer_curves: curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub seed: Option<u64>,
    pub moe_test_auc: Option<f64>,
    pub fusionformer_test_auc: Option<f64>,
    pub moe_gap: Option<f64>,
    pub fusionformer_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub task: Task,
    pub moe_variant: Variant,
    /// Per-seed rows followed by one aggregate row (`seed = None`) per size.
    pub rows: Vec<SweepRow>,
    pub errors: Vec<String>,
}

impl SweepReport {
    pub fn aggregates(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }
}

/// Paired deep-fusion versus stacking comparison at each cohort size.
pub fn sample_size_sweep(config: &ExperimentConfig, sizes: &[usize]) -> Result<SweepReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Config("sweep sizes must be positive and strictly ascending".into()));
    }
    let moe = config.moe_variant();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for &n in sizes {
        let cfg = ExperimentConfig {
            n: Some(n),
            variants: vec![moe, Variant::Fusionformer],
            ..config.clone()
        };
        let report = run_ablation(&cfg)?;
        errors.extend(report.cells.iter().filter_map(|c| c.error.clone()));
        for &seed in &config.seeds {
            let m = report.cell(moe, seed);
            let f = report.cell(Variant::Fusionformer, seed);
            rows.push(SweepRow {
                n,
                seed: Some(seed),
                moe_test_auc: m.and_then(|c| c.test_auc),
                fusionformer_test_auc: f.and_then(|c| c.test_auc),
                moe_gap: m.and_then(|c| c.overfit_gap),
                fusionformer_gap: f.and_then(|c| c.overfit_gap),
            });
        }
        let (ms, fs) = (report.summary_of(moe), report.summary_of(Variant::Fusionformer));
        rows.push(SweepRow {
            n,
            seed: None,
            moe_test_auc: ms.and_then(|s| s.test_auc).map(|m| m.mean),
            fusionformer_test_auc: fs.and_then(|s| s.test_auc).map(|m| m.mean),
            moe_gap: ms.and_then(|s| s.overfit_gap).map(|m| m.mean),
            fusionformer_gap: fs.and_then(|s| s.overfit_gap).map(|m| m.mean),
        });
    }
    Ok(SweepReport {
        name: config.name.clone(),
        task: config.task,
        moe_variant: moe,
        rows,
        errors,
    })
}

/// Published reference for the calibration study, shown next to the
/// measured reduction and never asserted.
pub const REFERENCE_FN_BEFORE: u64 = 1025;
pub const REFERENCE_FN_AFTER: u64 = 536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub counts: BinaryCounts,
    pub sensitivity: f64,
    pub specificity: f64,
    pub fpr: f64,
}

impl OperatingPoint {
    fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let counts = BinaryCounts::at(scores, labels, threshold);
        OperatingPoint {
            threshold,
            sensitivity: counts.sensitivity(),
            specificity: counts.specificity(),
            fpr: 1.0 - counts.specificity(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub name: String,
    pub task: Task,
    pub seed: u64,
    pub variant: Variant,
    pub target_sensitivity: f64,
    /// Fitted on the validation split.
    pub policy: ThresholdPolicy,
    pub test_default: OperatingPoint,
    pub test_calibrated: OperatingPoint,
    pub test_fn_reduction_pct: f64,
    pub test_auc: f64,
    pub test_roc: Vec<(f64, f64)>,
    pub reference_fn_before: u64,
    pub reference_fn_after: u64,
    pub reference_reduction_pct: f64,
    pub class_names: Vec<String>,
}

impl CalibrationReport {
    pub fn summary(&self) -> String {
        format!(
            "threshold {:.4} (target sensitivity {:.2}, validation sensitivity {:.4})\n\
             test FN at 0.50: {}  test FN at threshold: {}  reduction {:.1}%\n\
             test sensitivity {:.4} -> {:.4}, specificity {:.4} -> {:.4}\n\
             reference: FN {} -> {} ({:.0}% reduction)",
            self.policy.threshold,
            self.target_sensitivity,
            self.policy.sensitivity,
            self.test_default.counts.fn_,
            self.test_calibrated.counts.fn_,
            self.test_fn_reduction_pct,
            self.test_default.sensitivity,
            self.test_calibrated.sensitivity,
            self.test_default.specificity,
            self.test_calibrated.specificity,
            thousands(self.reference_fn_before),
            thousands(self.reference_fn_after),
            self.reference_reduction_pct,
        )
    }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Train the ensemble on the first seed, calibrate the threshold on
/// validation and report both operating points on test.
pub fn run_calibration_study(config: &ExperimentConfig, target_sensitivity: f64) -> Result<CalibrationReport> {
    config.validate()?;
    if config.task.n_classes() != 2 {
        return Err(Error::Config("calibration needs a binary task".into()));
    }
    if !(0.0..=1.0).contains(&target_sensitivity) {
        return Err(Error::Config("target sensitivity must lie in [0, 1]".into()));
    }
    let seed = config.seeds[0];
    let variant = config.moe_variant();
    let data = prepare_data(config, seed)?;
    let y = data.labels(config.task)?;
    let cfg = ExperimentConfig {
        variants: vec![variant],
        ..config.clone()
    };
    let stacked = stack_for(&cfg, &data, &y.0, seed)?;
    let (pred, _) = run_variant(variant, &cfg, &data, &y, stacked.as_ref(), seed)?;
    let score = |p: &[ProbVector]| p.iter().map(|v| v[1]).collect::<Vec<f64>>();
    let pos = |l: &[usize]| l.iter().map(|&c| c == 1).collect::<Vec<bool>>();
    let (val_s, val_y) = (score(&pred.val), pos(&y.1));
    let (test_s, test_y) = (score(&pred.test), pos(&y.2));
    let policy = calibrate_threshold(&val_s, &val_y, target_sensitivity)?;
    let test_default = OperatingPoint::at(&test_s, &test_y, DEFAULT_THRESHOLD);
    let test_calibrated = OperatingPoint::at(&test_s, &test_y, policy.threshold);
    Ok(CalibrationReport {
        name: config.name.clone(),
        task: config.task,
        seed,
        variant,
        target_sensitivity,
        test_fn_reduction_pct: crate::metrics::reduction_pct(test_default.counts.fn_, test_calibrated.counts.fn_),
        policy,
        test_default,
        test_calibrated,
        test_auc: roc_auc(&test_s, &test_y)?,
        test_roc: roc_points(&test_s, &test_y)?,
        reference_fn_before: REFERENCE_FN_BEFORE,
        reference_fn_after: REFERENCE_FN_AFTER,
        reference_reduction_pct: crate::metrics::reduction_pct(REFERENCE_FN_BEFORE, REFERENCE_FN_AFTER),
        class_names: config.task.class_names().iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tiny(variants: Vec<Variant>) -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            n: Some(240),
            variants,
            seeds: vec![1],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn empty_variant_list_is_a_config_error() {
        let err = tiny(vec![]).validate().unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn bad_fields_are_config_errors() {
        let mut c = tiny(vec![Variant::StaticOnly]);
        c.seeds.clear();
        assert!(c.validate().unwrap_err().is_config());
        let mut c = tiny(vec![Variant::StaticOnly]);
        c.split = [0.5, 0.5, 0.0];
        assert!(c.validate().unwrap_err().is_config());
        let mut c = tiny(vec![Variant::StaticOnly]);
        c.moe.gate.rounds = 0;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = tiny(vec![Variant::StaticOnly]);
        c.genspec_overrides = json!({ "redundancy": 1.5 });
        assert!(c.validate().unwrap_err().is_config());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"no_such_field": 1}"#).is_err());
    }

    #[test]
    fn overrides_merge_recursively() {
        let mut base = json!({ "a": { "b": 1, "c": 2 }, "d": [1, 2] });
        merge_json(&mut base, &json!({ "a": { "c": 5 }, "d": [3] }));
        assert_eq!(base, json!({ "a": { "b": 1, "c": 5 }, "d": [3] }));
        let mut c = tiny(vec![Variant::StaticOnly]);
        c.genspec_overrides = json!({ "redundancy": 0.0, "image": { "loading": 2.0 } });
        let spec = c.genspec().unwrap();
        assert_eq!(spec.redundancy, 0.0);
        assert_eq!(spec.image.loading, 2.0);
        assert_eq!(spec.image.noise, GenSpec::detection_default().image.noise);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(Variant::parse(&v.name().to_lowercase()).unwrap(), v);
        }
        assert!(Variant::parse("MOE").unwrap_err().is_config());
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(536), "536");
        assert_eq!(thousands(1025), "1,025");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn report_covers_variants_by_seeds() {
        let mut c = tiny(vec![Variant::StaticOnly, Variant::LateConcat]);
        c.seeds = vec![1, 2];
        let r = run_ablation(&c).unwrap();
        assert_eq!(r.cells.len(), 4);
        for v in &c.variants {
            for &s in &c.seeds {
                let cell = r.cell(*v, s).unwrap();
                assert!(cell.error.is_none(), "{:?}", cell.error);
                assert!(cell.test_auc.is_some_and(|a| (0.0..=1.0).contains(&a)));
            }
            assert_eq!(r.summary_of(*v).unwrap().seeds_ok, 2);
        }
    }

    #[test]
    fn single_size_sweep_has_seed_rows_and_an_aggregate() {
        let mut c = tiny(vec![Variant::MoeTrimodal, Variant::Fusionformer]);
        c.seeds = vec![1, 2];
        let s = sample_size_sweep(&c, &[240]).unwrap();
        assert_eq!(s.rows.len(), 3);
        assert_eq!(s.aggregates().count(), 1);
        assert!(sample_size_sweep(&c, &[400, 300]).unwrap_err().is_config());
    }

    #[test]
    fn csv_only_gives_one_file_per_table_and_reruns_match() {
        let r = run_ablation(&tiny(vec![Variant::StaticOnly, Variant::Fusionformer])).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = emit_report(&Report::Ablation(r.clone()), &[Format::Csv], a.path()).unwrap();
        assert!(files.iter().all(|f| f.extension().unwrap() == "csv"));
        let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_owned()).collect();
        assert_eq!(names.len(), 3);
        let again = run_ablation(&tiny(vec![Variant::StaticOnly, Variant::Fusionformer])).unwrap();
        emit_report(&Report::Ablation(again), &[Format::Csv], b.path()).unwrap();
        for n in names {
            assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
        }
        let first = std::fs::read_to_string(&files[0]).unwrap();
        assert!(first.starts_with("# columns:"));
    }
}
