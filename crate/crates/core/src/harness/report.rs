use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::task::TaskMetrics;
use crate::trainer::{csv_err, CodecEval, Scheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize },
    Failed { error: String },
}

/// One trained `(scheme, r, seed)` model and its validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: Scheme,
    pub r: usize,
    pub k: usize,
    pub seed: u64,
    pub params_count: usize,
    pub outcome: RunStatus,
    pub eval: Option<CodecEval>,
    pub checkpoint_digest: Option<String>,
}

/// Mean over the seeds of one `(scheme, r)` cell; diverged or failed seeds
/// are counted but excluded from the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub r: usize,
    pub k: usize,
    pub params_count: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub payload_bytes: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub kib: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub fixed_payload_bytes: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub miou: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub accuracy: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mse: f64,
    pub perceptual: Option<f64>,
    pub seeds: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub miou_std: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub miou_min: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub miou_max: f64,
    pub divergences: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub scheme: Scheme,
    /// One Pearson coefficient per seed, over that run's fine-tuning epochs.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub teacher_digest: String,
    pub teacher_validation: Option<TaskMetrics>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
    pub correlation: Option<CorrelationRecord>,
}

/// JSON has no NaN; `serde_json` writes it as `null`.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups runs by `(scheme, r)` in first-seen order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<ReportRow> {
    let mut keys: Vec<(Scheme, usize)> = Vec::new();
    for r in runs {
        if !keys.contains(&(r.scheme, r.r)) {
            keys.push((r.scheme, r.r));
        }
    }
    keys.into_iter()
        .map(|(scheme, r)| {
            let cell: Vec<&RunRecord> = runs.iter().filter(|x| x.scheme == scheme && x.r == r).collect();
            let evals: Vec<&CodecEval> = cell.iter().filter_map(|x| x.eval.as_ref()).collect();
            let pick = |f: &dyn Fn(&CodecEval) -> f64| evals.iter().map(|e| f(e)).collect::<Vec<f64>>();
            let mious = pick(&|e| e.metrics.miou);
            let payload = mean(&pick(&|e| e.payload_bytes));
            let perceptual: Vec<f64> = evals.iter().filter_map(|e| e.perceptual).collect();
            ReportRow {
                scheme,
                r,
                k: cell[0].k,
                params_count: cell[0].params_count,
                payload_bytes: payload,
                kib: payload / 1024.0,
                fixed_payload_bytes: mean(&pick(&|e| e.fixed_payload_bytes)),
                miou: mean(&mious),
                accuracy: mean(&pick(&|e| e.metrics.accuracy)),
                mse: mean(&pick(&|e| e.mse)),
                perceptual: (!perceptual.is_empty()).then(|| mean(&perceptual)),
                seeds: evals.len(),
                miou_std: std_dev(&mious),
                miou_min: mious.iter().copied().fold(f64::NAN, f64::min),
                miou_max: mious.iter().copied().fold(f64::NAN, f64::max),
                divergences: cell.iter().filter(|x| matches!(x.outcome, RunStatus::Diverged { .. })).count(),
                failures: cell.iter().filter(|x| matches!(x.outcome, RunStatus::Failed { .. })).count(),
            }
        })
        .collect()
}

const ROW_HEADER: [&str; 17] = [
    "scheme",
    "r",
    "K",
    "params_count",
    "payload_bytes",
    "kib",
    "fixed_payload_bytes",
    "miou",
    "accuracy",
    "mse",
    "perceptual",
    "seeds",
    "miou_std",
    "miou_min",
    "miou_max",
    "divergences",
    "failures",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn row(&self, scheme: Scheme, r: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|x| x.scheme == scheme && x.r == r)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ROW_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.scheme.name().to_string(),
                r.r.to_string(),
                r.k.to_string(),
                r.params_count.to_string(),
                r.payload_bytes.to_string(),
                r.kib.to_string(),
                r.fixed_payload_bytes.to_string(),
                r.miou.to_string(),
                r.accuracy.to_string(),
                r.mse.to_string(),
                opt(r.perceptual),
                r.seeds.to_string(),
                r.miou_std.to_string(),
                r.miou_min.to_string(),
                r.miou_max.to_string(),
                r.divergences.to_string(),
                r.failures.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_runs_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scheme", "r", "K", "seed", "status", "miou", "accuracy", "mse", "perceptual", "payload_bytes", "checkpoint_digest"])
            .map_err(csv_err)?;
        for r in &self.runs {
            let status = match &r.outcome {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
                RunStatus::Failed { .. } => "failed".to_string(),
            };
            let e = r.eval.as_ref();
            out.write_record([
                r.scheme.name().to_string(),
                r.r.to_string(),
                r.k.to_string(),
                r.seed.to_string(),
                status,
                opt(e.map(|e| e.metrics.miou)),
                opt(e.map(|e| e.metrics.accuracy)),
                opt(e.map(|e| e.mse)),
                opt(e.and_then(|e| e.perceptual)),
                opt(e.map(|e| e.payload_bytes)),
                r.checkpoint_digest.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `report.csv`, `runs.csv` and `report.json` under `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(dir.join("report.csv"))?)?;
        self.write_runs_csv(fs::File::create(dir.join("runs.csv"))?)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| crate::Error::Format(e.to_string()))?;
        fs::write(dir.join("report.json"), json + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))
    }

    /// Plain-text table of the aggregated rows.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>3} {:>4} {:>8} {:>10} {:>8} {:>8} {:>9} {:>6} {:>5}\n",
            "scheme", "r", "K", "params", "payload_B", "mIoU", "acc", "mse", "std", "div"
        );
        for r in &self.rows {
            s += &format!(
                "{:<14} {:>3} {:>4} {:>8} {:>10.1} {:>8.3} {:>8.3} {:>9.5} {:>6.3} {:>5}\n",
                r.scheme.name(),
                r.r,
                r.k,
                r.params_count,
                r.payload_bytes,
                r.miou,
                r.accuracy,
                r.mse,
                r.miou_std,
                r.divergences
            );
        }
        if let Some(c) = &self.correlation {
            s += &format!("correlation(jsd, perceptual) for {}: {:.4}\n", c.scheme, c.mean);
        }
        s
    }
}
