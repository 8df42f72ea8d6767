use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stackfusion::cohort::{load_cohort, save_cohort};
use stackfusion::fusion::{fusionformer_forward, train_fusionformer};
use stackfusion::guards::guard_cohort;
use stackfusion::harness::{
    emit_report, prepare_data, run_ablation, run_calibration_study, sample_size_sweep, ExperimentConfig, Format, Report,
    Variant,
};
use stackfusion::metrics::auc_for;
use stackfusion::moe::{ensemble_predict, fit_ensemble, save_bundle};
use stackfusion::nn::{expert_predict, fit_expert, ExpertKind};
use stackfusion::synth::generate_cohort;
use stackfusion::{Error, PatientRecord, Result, Task};

/// Leakage-guarded multimodal stacking and fusion experiments on synthetic
/// clinical cohorts.
#[derive(Parser, Debug)]
#[command(name = "stackfusion", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ExperimentArgs {
    /// Override the config's task.
    #[arg(long)]
    task: Option<String>,
    /// Override the cohort size.
    #[arg(long)]
    n: Option<usize>,
    /// Generator preset or spec file.
    #[arg(long)]
    genspec: Option<String>,
    /// Use a stored cohort instead of generating one.
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long, default_value = "detection_default")]
        genspec: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Output file; defaults to <out>/cohort.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply the leakage guards to a stored cohort.
    Guard {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "detection")]
        task: String,
        #[arg(long)]
        buffer_hours: Option<f64>,
    },
    /// Train one model on the training split and save it.
    Train {
        #[arg(long, value_enum)]
        model: ModelChoice,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run every configured variant across seeds.
    Ablate {
        /// Comma-separated variant list overriding the config.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Compare stacking and deep fusion across cohort sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 2000, 4000, 8000])]
        sizes: Vec<usize>,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Calibrate the decision threshold for a target sensitivity.
    Calibrate {
        #[arg(long, default_value_t = 0.95)]
        target: f64,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Re-render a stored JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ["json".to_string(), "csv".to_string(), "svg".to_string()])]
        format: Vec<String>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModelChoice {
    Historian,
    Monitor,
    Reader,
    Visionary,
    MoeTrimodal,
    MoeQuadmodal,
    Fusionformer,
}

fn load_config(cli: &Cli, exp: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = &exp.task {
        cfg.task = Task::parse(t).map_err(as_config)?;
    }
    if exp.n.is_some() {
        cfg.n = exp.n;
    }
    if exp.genspec.is_some() {
        cfg.genspec = exp.genspec.clone();
        cfg.cohort = None;
    }
    if exp.cohort.is_some() {
        cfg.cohort = exp.cohort.clone();
        cfg.genspec = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn as_config(e: Error) -> Error {
    if e.is_config() {
        e
    } else {
        Error::Config(e.to_string())
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn write_report(report: &Report, dir: &Path, formats: &[Format]) -> Result<()> {
    for p in emit_report(report, formats, dir)? {
        println!("wrote {}", p.display());
    }
    print!("{}", report.summary());
    Ok(())
}

fn refs(c: &stackfusion::Cohort) -> Vec<&PatientRecord> {
    c.records.iter().collect()
}

fn train(cli: &Cli, model: ModelChoice, exp: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(cli, exp)?;
    let seed = cfg.seeds[0];
    let data = prepare_data(&cfg, seed)?;
    let (y_train, y_val, y_test) = data.labels(cfg.task)?;
    let k = cfg.task.n_classes();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let configs = cfg.experts.reseeded(seed);
    let train = refs(&data.train);
    let scored: Vec<(&str, &stackfusion::Cohort, &[usize])> =
        vec![("validation", &data.val, &y_val), ("test", &data.test, &y_test)];
    let report = |predict: &dyn Fn(&PatientRecord) -> Result<Vec<f64>>| -> Result<()> {
        for (part, cohort, y) in &scored {
            let (mut probs, mut ys) = (Vec::new(), Vec::new());
            for (r, &label) in cohort.records.iter().zip(y.iter()) {
                match predict(r) {
                    Ok(p) => {
                        probs.push(p);
                        ys.push(label);
                    }
                    Err(Error::ModalityAbsent(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            println!("{part} AUC {:.4} ({} records)", auc_for(&probs, &ys)?, ys.len());
        }
        Ok(())
    };
    let expert = |kind: ExpertKind| -> Result<()> {
        let m = fit_expert(kind, &train, &y_train, k, &data.schema, &configs)?;
        let path = cfg.out_dir.join(format!("{}_{}.json", cfg.name, kind.name().to_ascii_lowercase()));
        m.save(&path)?;
        println!("wrote {}", path.display());
        report(&|r| expert_predict(&m, r))
    };
    match model {
        ModelChoice::Historian => expert(ExpertKind::Historian),
        ModelChoice::Monitor => expert(ExpertKind::Monitor),
        ModelChoice::Reader => expert(ExpertKind::Reader),
        ModelChoice::Visionary => expert(ExpertKind::Visionary),
        ModelChoice::MoeTrimodal | ModelChoice::MoeQuadmodal => {
            let kinds: &[ExpertKind] = if matches!(model, ModelChoice::MoeQuadmodal) {
                &ExpertKind::ALL
            } else {
                &[ExpertKind::Historian, ExpertKind::Monitor, ExpertKind::Reader]
            };
            let (m, _) = fit_ensemble(&train, &y_train, k, &data.schema, kinds, &configs, &cfg.moe, seed)?;
            let dir = cfg.out_dir.join(format!("{}_moe", cfg.name));
            let provenance = format!("task={} seed={seed} n_train={}", cfg.task.name(), train.len());
            save_bundle(&m, &dir, &provenance)?;
            println!("wrote {}", dir.display());
            report(&|r| ensemble_predict(&m, r))
        }
        ModelChoice::Fusionformer => {
            let params = stackfusion::fusion::FusionFormerParams {
                seed,
                ..cfg.fusionformer.clone()
            };
            let (m, curves) = train_fusionformer(&train, &y_train, &refs(&data.val), &y_val, k, &data.schema, &params)?;
            let path = cfg.out_dir.join(format!("{}_fusionformer.json", cfg.name));
            m.save(&path)?;
            let curves_path = cfg.out_dir.join(format!("{}_fusionformer_curves.csv", cfg.name));
            std::fs::write(&curves_path, curves.to_csv()).map_err(|e| Error::io(&curves_path, e))?;
            println!("wrote {}\nwrote {}", path.display(), curves_path.display());
            report(&|r| fusionformer_forward(&m, r))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { genspec, n, output } => {
            let cfg = ExperimentConfig {
                genspec: Some(genspec.clone()),
                ..ExperimentConfig::default()
            };
            let spec = cfg.genspec()?;
            if *n == 0 {
                return Err(Error::Config("n must be >= 1".into()));
            }
            let cohort = generate_cohort(&spec, *n, cli.seed.unwrap_or(0))?;
            let path = match output {
                Some(p) => p.clone(),
                None => {
                    let dir = out_dir(cli);
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    dir.join("cohort.jsonl")
                }
            };
            save_cohort(&cohort, &path)?;
            println!("wrote {} ({} records, spec {})", path.display(), cohort.len(), spec.hash());
            Ok(())
        }
        Command::Guard {
            cohort,
            task,
            buffer_hours,
        } => {
            let task = Task::parse(task).map_err(as_config)?;
            let mut settings = match &cli.config {
                Some(p) => ExperimentConfig::load(p)?.guard,
                None => Default::default(),
            };
            if let Some(b) = buffer_hours {
                settings.buffer_hours = *b;
            }
            if !(settings.buffer_hours >= 0.0) {
                return Err(Error::Config("buffer_hours must be >= 0".into()));
            }
            let input = load_cohort(cohort)?;
            let guarded = guard_cohort(&input, task, &settings.to_config(cli.seed.unwrap_or(0))?)?;
            let dir = out_dir(cli);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let stem = cohort.file_stem().and_then(|s| s.to_str()).unwrap_or("cohort");
            let path = dir.join(format!("{stem}_guarded.jsonl"));
            save_cohort(&guarded.cohort, &path)?;
            let audit_path = dir.join(format!("{stem}_guard_audit.json"));
            let audit = serde_json::json!({
                "task": task.name(),
                "kept": guarded.cohort.len(),
                "excluded": guarded.excluded,
                "audit": guarded.audit,
            });
            std::fs::write(&audit_path, serde_json::to_string_pretty(&audit)? + "\n")
                .map_err(|e| Error::io(&audit_path, e))?;
            println!(
                "wrote {} ({} kept, {} excluded, {} notes purged, {} tokens masked)",
                path.display(),
                guarded.cohort.len(),
                guarded.excluded.len(),
                guarded.audit.notes_purged,
                guarded.audit.tokens_masked
            );
            Ok(())
        }
        Command::Train { model, exp } => train(cli, *model, exp),
        Command::Ablate { variants, exp } => {
            let mut cfg = load_config(cli, exp)?;
            if !variants.is_empty() {
                cfg.variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?;
            }
            let t = Instant::now();
            let report = Report::Ablation(run_ablation(&cfg)?);
            eprintln!("ablation finished in {:.1}s", t.elapsed().as_secs_f64());
            write_report(&report, &cfg.out_dir, &Format::ALL)
        }
        Command::Sweep { sizes, exp } => {
            let cfg = load_config(cli, exp)?;
            let t = Instant::now();
            let report = Report::Sweep(sample_size_sweep(&cfg, sizes)?);
            eprintln!("sweep finished in {:.1}s", t.elapsed().as_secs_f64());
            write_report(&report, &cfg.out_dir, &Format::ALL)
        }
        Command::Calibrate { target, exp } => {
            let cfg = load_config(cli, exp)?;
            let report = Report::Calibration(run_calibration_study(&cfg, *target)?);
            write_report(&report, &cfg.out_dir, &Format::ALL)
        }
        Command::Report { input, format } => {
            let formats: Vec<Format> = format.iter().map(|f| Format::parse(f)).collect::<Result<_>>()?;
            let report = Report::load(input)?;
            let dir = cli
                .out
                .clone()
                .unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            write_report(&report, &dir, &formats)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
