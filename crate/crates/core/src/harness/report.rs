use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{BarChart, LineChart, Marker, Series};
use super::{AblationReport, CalibrationReport, MeanStd, SweepReport};
use crate::error::{Error, Result};
use crate::metrics::trapezoid_area;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Ablation(AblationReport),
    Sweep(SweepReport),
    Calibration(CalibrationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Svg,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Svg];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

impl Report {
    pub fn name(&self) -> &str {
        match self {
            Report::Ablation(r) => &r.name,
            Report::Sweep(r) => &r.name,
            Report::Calibration(r) => &r.name,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("report {}: {e}", path.display())))
    }

    /// Plain-text overview for the terminal.
    pub fn summary(&self) -> String {
        match self {
            Report::Ablation(r) => {
                let mut s = format!("{} ({})\n", r.name, r.task.name());
                let _ = writeln!(s, "{:<16} {:>6} {:>16} {:>16} {:>16}", "variant", "seeds", "test AUC", "test AUPRC", "gap");
                for v in &r.summary {
                    let _ = writeln!(
                        s,
                        "{:<16} {:>6} {:>16} {:>16} {:>16}",
                        v.variant.name(),
                        v.seeds_ok,
                        mean_std(v.test_auc),
                        mean_std(v.test_auprc),
                        mean_std(v.overfit_gap)
                    );
                }
                for c in r.cells.iter().filter_map(|c| c.error.as_deref()) {
                    let _ = writeln!(s, "error: {c}");
                }
                s
            }
            Report::Sweep(r) => {
                let mut s = format!("{} ({}, {} vs FUSIONFORMER)\n", r.name, r.task.name(), r.moe_variant.name());
                let _ = writeln!(s, "{:>8} {:>12} {:>12} {:>12} {:>12}", "n", "moe AUC", "ff AUC", "moe gap", "ff gap");
                for row in r.aggregates() {
                    let _ = writeln!(
                        s,
                        "{:>8} {:>12} {:>12} {:>12} {:>12}",
                        row.n,
                        opt(row.moe_test_auc),
                        opt(row.fusionformer_test_auc),
                        opt(row.moe_gap),
                        opt(row.fusionformer_gap)
                    );
                }
                for e in &r.errors {
                    let _ = writeln!(s, "error: {e}");
                }
                s
            }
            Report::Calibration(r) => format!("{} ({})\n{}\n", r.name, r.task.name(), r.summary()),
        }
    }
}

fn mean_std(m: Option<MeanStd>) -> String {
    m.map_or_else(|| "-".into(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

struct Table {
    columns: Vec<(&'static str, &'static str)>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[(&'static str, &'static str)]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn to_csv(&self) -> String {
        let doc: Vec<String> = self.columns.iter().map(|(n, d)| format!("{n} = {d}")).collect();
        let mut s = format!("# columns: {}\n", doc.join("; "));
        let names: Vec<&str> = self.columns.iter().map(|c| c.0).collect();
        s.push_str(&names.join(","));
        s.push('\n');
        for r in &self.rows {
            let fields: Vec<String> = r.iter().map(|f| quote(f)).collect();
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn ms_fields(m: Option<MeanStd>) -> [String; 2] {
    [cell(m.map(|m| m.mean)), cell(m.map(|m| m.std))]
}

fn ablation_tables(r: &AblationReport) -> Vec<(&'static str, Table)> {
    let mut cells = Table::new(&[
        ("variant", "model variant"),
        ("seed", "run seed"),
        ("n_train", "training records"),
        ("n_val", "validation records"),
        ("n_test", "test records"),
        ("train_auc", "AUC on training records"),
        ("val_auc", "AUC on validation records"),
        ("test_auc", "AUC on test records (macro one-vs-rest for multiclass)"),
        ("test_macro_auc", "macro one-vs-rest AUC on test"),
        ("test_auprc", "average precision on test (mean one-vs-rest for multiclass)"),
        ("overfit_gap", "train_auc minus val_auc"),
        ("error", "failure message when the cell did not run"),
    ]);
    for c in &r.cells {
        cells.push(vec![
            c.variant.name().into(),
            c.seed.to_string(),
            c.n_train.to_string(),
            c.n_val.to_string(),
            c.n_test.to_string(),
            cell(c.train_auc),
            cell(c.val_auc),
            cell(c.test_auc),
            cell(c.test_macro_auc),
            cell(c.test_auprc),
            cell(c.overfit_gap),
            c.error.clone().unwrap_or_default(),
        ]);
    }
    let mut summary = Table::new(&[
        ("variant", "model variant"),
        ("seeds_ok", "seeds that completed"),
        ("train_auc_mean", "mean training AUC"),
        ("train_auc_std", "sample standard deviation of training AUC"),
        ("val_auc_mean", "mean validation AUC"),
        ("val_auc_std", "sample standard deviation of validation AUC"),
        ("test_auc_mean", "mean test AUC"),
        ("test_auc_std", "sample standard deviation of test AUC"),
        ("test_auprc_mean", "mean test average precision"),
        ("test_auprc_std", "sample standard deviation of test average precision"),
        ("overfit_gap_mean", "mean train minus validation AUC"),
        ("overfit_gap_std", "sample standard deviation of the gap"),
    ]);
    for s in &r.summary {
        let mut row = vec![s.variant.name().to_string(), s.seeds_ok.to_string()];
        for m in [s.train_auc, s.val_auc, s.test_auc, s.test_auprc, s.overfit_gap] {
            row.extend(ms_fields(m));
        }
        summary.push(row);
    }
    let mut out = vec![("ablation", cells), ("summary", summary)];
    if !r.fusionformer_curves.is_empty() {
        let mut curves = Table::new(&[
            ("seed", "run seed"),
            ("epoch", "training epoch"),
            ("train_auc", "AUC on training records"),
            ("val_auc", "AUC on validation records"),
            ("train_loss", "mean training cross-entropy"),
            ("val_loss", "mean validation cross-entropy"),
            ("best", "1 on the epoch whose weights were kept"),
        ]);
        for sc in &r.fusionformer_curves {
            for p in &sc.curves.points {
                curves.push(vec![
                    sc.seed.to_string(),
                    p.epoch.to_string(),
                    p.train_auc.to_string(),
                    p.val_auc.to_string(),
                    p.train_loss.to_string(),
                    p.val_loss.to_string(),
                    u8::from(p.epoch == sc.curves.best_epoch).to_string(),
                ]);
            }
        }
        out.push(("fusionformer_curves", curves));
    }
    out
}

fn sweep_table(r: &SweepReport) -> Table {
    let mut t = Table::new(&[
        ("n", "cohort size before guarding"),
        ("seed", "run seed, or 'mean' for the aggregate row"),
        ("moe_test_auc", "stacked ensemble test AUC"),
        ("fusionformer_test_auc", "deep fusion test AUC"),
        ("moe_gap", "stacked ensemble train minus validation AUC"),
        ("fusionformer_gap", "deep fusion train minus validation AUC"),
    ]);
    for row in &r.rows {
        t.push(vec![
            row.n.to_string(),
            row.seed.map_or_else(|| "mean".into(), |s| s.to_string()),
            cell(row.moe_test_auc),
            cell(row.fusionformer_test_auc),
            cell(row.moe_gap),
            cell(row.fusionformer_gap),
        ]);
    }
    t
}

fn calibration_table(r: &CalibrationReport) -> Table {
    let mut t = Table::new(&[
        ("operating_point", "default (0.5) or calibrated threshold"),
        ("threshold", "decision threshold"),
        ("tp", "true positives on test"),
        ("fn", "false negatives on test"),
        ("fp", "false positives on test"),
        ("tn", "true negatives on test"),
        ("sensitivity", "TP / (TP + FN)"),
        ("specificity", "TN / (TN + FP)"),
        ("fn_reduction_pct", "percentage of default-threshold misses recovered"),
    ]);
    for (name, p, red) in [
        ("default", &r.test_default, 0.0),
        ("calibrated", &r.test_calibrated, r.test_fn_reduction_pct),
    ] {
        t.push(vec![
            name.into(),
            p.threshold.to_string(),
            p.counts.tp.to_string(),
            p.counts.fn_.to_string(),
            p.counts.fp.to_string(),
            p.counts.tn.to_string(),
            p.sensitivity.to_string(),
            p.specificity.to_string(),
            red.to_string(),
        ]);
    }
    t
}

fn ablation_svgs(r: &AblationReport) -> Vec<(&'static str, String)> {
    let bars: Vec<(String, f64, Option<f64>)> = r
        .summary
        .iter()
        .filter_map(|s| s.test_auc.map(|m| (s.variant.name().to_string(), m.mean, Some(m.std))))
        .collect();
    let lo = bars.iter().map(|b| b.1).fold(1.0_f64, f64::min);
    let chart = BarChart {
        title: format!("{}: mean test AUC", r.name),
        y_label: "AUC".into(),
        y_range: (lo.floor_to(0.1).clamp(0.0, 0.5), 1.0),
        bars,
    };
    let mut out = vec![("ablation", chart.render())];
    if let Some(sc) = r.fusionformer_curves.first() {
        let pts = &sc.curves.points;
        let max_epoch = pts.iter().map(|p| p.epoch).max().unwrap_or(1).max(1) as f64;
        let lo = pts
            .iter()
            .flat_map(|p| [p.train_auc, p.val_auc])
            .fold(1.0_f64, f64::min)
            .floor_to(0.1)
            .min(0.5);
        let series = vec![
            Series {
                name: "train AUC".into(),
                points: pts.iter().map(|p| (p.epoch as f64, p.train_auc)).collect(),
            },
            Series {
                name: "validation AUC".into(),
                points: pts.iter().map(|p| (p.epoch as f64, p.val_auc)).collect(),
            },
        ];
        let chart = LineChart {
            title: format!("{}: fusion training curves (seed {})", r.name, sc.seed),
            x_label: "epoch".into(),
            y_label: "AUC".into(),
            x_range: (0.0, max_epoch),
            y_range: (lo, 1.0),
            series,
            markers: vec![],
            annotations: vec![format!("best epoch {}", sc.curves.best_epoch)],
            diagonal: false,
        };
        out.push(("fusionformer_curves", chart.render()));
    }
    out
}

trait FloorTo {
    fn floor_to(self, step: f64) -> f64;
}

impl FloorTo for f64 {
    fn floor_to(self, step: f64) -> f64 {
        (self / step).floor() * step
    }
}

fn sweep_svg(r: &SweepReport) -> String {
    let agg: Vec<_> = r.aggregates().collect();
    // Sizes on an index axis so small and large cohorts stay readable.
    let pick = |f: fn(&super::SweepRow) -> Option<f64>| -> Vec<(f64, f64)> {
        agg.iter().enumerate().filter_map(|(i, row)| f(row).map(|v| (i as f64, v))).collect()
    };
    let series = vec![
        Series { name: format!("{} test AUC", r.moe_variant.name()), points: pick(|r| r.moe_test_auc) },
        Series { name: "FUSIONFORMER test AUC".into(), points: pick(|r| r.fusionformer_test_auc) },
        Series { name: format!("{} gap", r.moe_variant.name()), points: pick(|r| r.moe_gap) },
        Series { name: "FUSIONFORMER gap".into(), points: pick(|r| r.fusionformer_gap) },
    ];
    let sizes: Vec<String> = agg.iter().map(|r| r.n.to_string()).collect();
    LineChart {
        title: format!("{}: sample-size sweep", r.name),
        x_label: format!("cohort size index (n = {})", sizes.join(", ")),
        y_label: "AUC / gap".into(),
        x_range: (0.0, agg.len().saturating_sub(1).max(1) as f64),
        y_range: (0.0, 1.0),
        series,
        markers: vec![],
        annotations: vec![],
        diagonal: false,
    }
    .render()
}

fn roc_svg(r: &CalibrationReport) -> String {
    let area = trapezoid_area(&r.test_roc);
    LineChart {
        title: format!("{}: test ROC", r.name),
        x_label: "false positive rate".into(),
        y_label: "sensitivity".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series: vec![Series { name: r.variant.name().into(), points: r.test_roc.clone() }],
        markers: vec![
            Marker {
                label: format!("threshold 0.50 (FN {})", r.test_default.counts.fn_),
                x: r.test_default.fpr,
                y: r.test_default.sensitivity,
            },
            Marker {
                label: format!("threshold {:.4} (FN {})", r.test_calibrated.threshold, r.test_calibrated.counts.fn_),
                x: r.test_calibrated.fpr,
                y: r.test_calibrated.sensitivity,
            },
        ],
        annotations: vec![
            format!("AUC = {area:.6}"),
            format!("missed cases -{:.1}%", r.test_fn_reduction_pct),
        ],
        diagonal: true,
    }
    .render()
}

/// Write the report as `<experiment>_<table>.<ext>` files in `dir` and
/// return their paths in write order.
pub fn emit_report(report: &Report, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = report.name();
    let mut written = Vec::new();
    let mut write = |table: &str, ext: &str, body: &str| -> Result<()> {
        let path = dir.join(format!("{name}_{table}.{ext}"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    let table_name = match report {
        Report::Ablation(_) => "ablation",
        Report::Sweep(_) => "sweep",
        Report::Calibration(_) => "calibration",
    };
    for &fmt in formats {
        match fmt {
            Format::Json => {
                let mut body = serde_json::to_string_pretty(report)?;
                body.push('\n');
                write(table_name, "json", &body)?;
            }
            Format::Csv => match report {
                Report::Ablation(r) => {
                    for (t, table) in ablation_tables(r) {
                        write(t, "csv", &table.to_csv())?;
                    }
                }
                Report::Sweep(r) => write("sweep", "csv", &sweep_table(r).to_csv())?,
                Report::Calibration(r) => write("calibration", "csv", &calibration_table(r).to_csv())?,
            },
            Format::Svg => match report {
                Report::Ablation(r) => {
                    for (t, body) in ablation_svgs(r) {
                        write(t, "svg", &body)?;
                    }
                }
                Report::Sweep(r) => write("sweep", "svg", &sweep_svg(r))?,
                Report::Calibration(r) => write("roc", "svg", &roc_svg(r))?,
            },
        }
    }
    Ok(written)
}
