//! Experiment orchestration: dataset and teacher preparation, grids of
//! training runs, the compression-ratio sweep, the objective ablation and
//! the CSV/JSON reports.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, OPTIONAL_METRICS};
pub use report::{aggregate, CorrelationRecord, Report, ReportRow, RunRecord, RunStatus};

use crate::autodiff::Real;
use crate::datagen::make_dataset;
use crate::error::{Error, Result};
use crate::nets::build_feature_extractor;
use crate::objectives::Term;
use crate::task::{pretrain_segmenter, FrozenSegmenter};
use crate::trainer::{curve_correlation, evaluate, finetune_from, train, Phase, Scheme, TrainContext, TrainRun};
use crate::Precision;

pub const SWEEP_RATIOS: [usize; 5] = [2, 4, 8, 16, 32];

/// The six objective variants compared in the ablation, all trained from
/// scratch. GOS-VAE is the JSD+perceptual row.
pub const ABLATION_SCHEMES: [Scheme; 6] =
    [Scheme::AblCe, Scheme::AblKld, Scheme::AblVqKld, Scheme::AblVqLpips, Scheme::AblKldLpips, Scheme::Gosvae];

/// Generates the dataset and pre-trains the frozen segmenter, or loads it
/// from `cfg.teacher_checkpoint`.
pub fn prepare<T: Real>(cfg: &ExperimentConfig) -> Result<TrainContext<T>> {
    if let Some(path) = &cfg.teacher_checkpoint {
        return prepare_with_teacher(cfg, &fs::read(path)?);
    }
    let (train_set, val_set) = make_dataset(&cfg.dataset)?;
    let segmenter = pretrain_segmenter::<T>(&train_set, &val_set, cfg.dataset.classes, &cfg.teacher)?;
    TrainContext::new(train_set, val_set, segmenter, build_feature_extractor())
}

/// Like [`prepare`], but reuses a saved segmenter checkpoint.
pub fn prepare_with_teacher<T: Real>(cfg: &ExperimentConfig, teacher_checkpoint: &[u8]) -> Result<TrainContext<T>> {
    let (train_set, val_set) = make_dataset(&cfg.dataset)?;
    let segmenter = FrozenSegmenter::from_checkpoint(teacher_checkpoint, cfg.dataset.classes)?;
    TrainContext::new(train_set, val_set, segmenter, build_feature_extractor())
}

fn run_name(scheme: Scheme, r: usize, seed: u64) -> String {
    format!("{}_r{r}_s{seed}", scheme.name())
}

/// Trains and evaluates `(scheme, r, seed)` cells on one shared context.
/// Pre-training phases are shared: a two-phase run reuses the matching
/// VQ-VAE run, and vice versa.
pub struct Runner<T> {
    cfg: ExperimentConfig,
    ctx: TrainContext<T>,
    extractor_digest: String,
    first_phase: BTreeMap<String, std::result::Result<TrainRun<T>, RunStatus>>,
    runs: BTreeMap<(Scheme, usize, u64), (RunRecord, Option<TrainRun<T>>)>,
    order: Vec<(Scheme, usize, u64)>,
    out_dir: Option<PathBuf>,
}

fn status_of(e: &Error) -> RunStatus {
    match e {
        Error::Divergence { epoch } => RunStatus::Diverged { epoch: *epoch },
        other => RunStatus::Failed { error: other.to_string() },
    }
}

impl<T: Real> Runner<T> {
    pub fn new(cfg: ExperimentConfig, ctx: TrainContext<T>) -> Self {
        let extractor_digest = ctx.extractor.digest();
        Self { cfg, ctx, extractor_digest, first_phase: BTreeMap::new(), runs: BTreeMap::new(), order: Vec::new(), out_dir: None }
    }

    /// Also write per-run checkpoints, configs and curves under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn context(&self) -> &TrainContext<T> {
        &self.ctx
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn extractor_digest(&self) -> &str {
        &self.extractor_digest
    }

    fn first_phase_run(&mut self, scheme: Scheme, r: usize, seed: u64) -> std::result::Result<TrainRun<T>, RunStatus> {
        let cfg = self.cfg.run_config(scheme, r, seed).pretrain_config();
        let key = serde_json::to_string(&cfg).expect("train config serializes");
        if let Some(hit) = self.first_phase.get(&key) {
            return hit.clone();
        }
        let result = train(&cfg, &self.ctx).map_err(|e| status_of(&e));
        self.first_phase.insert(key, result.clone());
        result
    }

    fn train_cell(&mut self, scheme: Scheme, r: usize, seed: u64) -> std::result::Result<TrainRun<T>, RunStatus> {
        let cfg = self.cfg.run_config(scheme, r, seed);
        cfg.validate().map_err(|e| status_of(&e))?;
        if scheme == scheme.pretrain_scheme() {
            self.first_phase_run(scheme, r, seed)
        } else if scheme.two_phase() {
            let pre = self.first_phase_run(scheme, r, seed)?;
            finetune_from(&cfg, &self.ctx, pre).map_err(|e| status_of(&e))
        } else {
            train(&cfg, &self.ctx).map_err(|e| status_of(&e))
        }
    }

    /// Trains (or recalls) one cell and returns its record.
    pub fn run(&mut self, scheme: Scheme, r: usize, seed: u64) -> Result<&RunRecord> {
        let key = (scheme, r, seed);
        if !self.runs.contains_key(&key) {
            let cfg = self.cfg.run_config(scheme, r, seed);
            let result = self.train_cell(scheme, r, seed);
            self.ctx.verify_frozen(&self.extractor_digest)?;
            let mut record = RunRecord {
                scheme,
                r,
                k: cfg.k,
                seed,
                params_count: 0,
                outcome: RunStatus::Ok,
                eval: None,
                checkpoint_digest: None,
            };
            let run = match result {
                Ok(run) => {
                    let ext = self.cfg.wants("perceptual").then_some(&self.ctx.extractor);
                    match evaluate(&run.model, &self.ctx.val, &self.ctx.segmenter, ext) {
                        Ok(eval) => record.eval = Some(eval),
                        Err(e) => record.outcome = status_of(&e),
                    }
                    record.params_count = run.model.param_count();
                    record.checkpoint_digest = Some(run.model.digest());
                    self.write_run(&record, &run)?;
                    Some(run)
                }
                Err(status) => {
                    record.outcome = status;
                    None
                }
            };
            self.runs.insert(key, (record, run));
            self.order.push(key);
        }
        Ok(&self.runs[&key].0)
    }

    fn write_run(&self, record: &RunRecord, run: &TrainRun<T>) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let name = run_name(record.scheme, record.r, record.seed);
        let ckpt = dir.join("checkpoints");
        let curves = dir.join("curves");
        fs::create_dir_all(&ckpt)?;
        fs::create_dir_all(&curves)?;
        fs::write(ckpt.join(format!("{name}.gosw")), run.model.checkpoint())?;
        let cfg = self.cfg.run_config(record.scheme, record.r, record.seed);
        let json = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(ckpt.join(format!("{name}.json")), json + "\n")?;
        run.curves.write_csv(fs::File::create(curves.join(format!("{name}.csv")))?)?;
        Ok(())
    }

    /// The trained model of a finished cell.
    pub fn trained(&self, scheme: Scheme, r: usize, seed: u64) -> Option<&TrainRun<T>> {
        self.runs.get(&(scheme, r, seed)).and_then(|(_, run)| run.as_ref())
    }

    /// Runs every `(scheme, r, seed)` combination, schemes outermost.
    pub fn run_grid(&mut self, schemes: &[Scheme], ratios: &[usize], seeds: &[u64]) -> Result<()> {
        for &s in schemes {
            for &r in ratios {
                for &seed in seeds {
                    self.run(s, r, seed)?;
                }
            }
        }
        Ok(())
    }

    /// Pearson correlation of the JSD and perceptual training curves over
    /// each seed's task-driven epochs, averaged over seeds.
    pub fn correlation(&self, scheme: Scheme, r: usize, seeds: &[u64]) -> Option<CorrelationRecord> {
        let per_seed: Vec<f64> = seeds
            .iter()
            .filter_map(|&seed| {
                let run = self.trained(scheme, r, seed)?;
                let rows: Vec<_> = run.curves.rows.iter().filter(|x| x.phase != Phase::Pretrain).collect();
                let jsd: Vec<f64> = rows.iter().filter_map(|x| x.losses.get(Term::Jsd)).collect();
                let perc: Vec<f64> = rows.iter().filter_map(|x| x.losses.get(Term::Perceptual)).collect();
                curve_correlation(&jsd, &perc).ok()
            })
            .collect();
        if per_seed.is_empty() {
            return None;
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        Some(CorrelationRecord { scheme, per_seed, mean })
    }

    /// Report over the given cells, in the given order.
    pub fn report(&self, cells: &[(Scheme, usize, u64)], correlation: Option<CorrelationRecord>) -> Report {
        let runs: Vec<RunRecord> = cells.iter().filter_map(|k| self.runs.get(k).map(|(r, _)| r.clone())).collect();
        Report {
            teacher_digest: self.ctx.segmenter.digest().to_owned(),
            teacher_validation: self.ctx.segmenter.validation().cloned(),
            rows: aggregate(&runs),
            runs,
            correlation,
        }
    }

    /// Every cell run so far, in run order.
    pub fn report_all(&self) -> Report {
        self.report(&self.order, None)
    }
}

fn cells(schemes: &[Scheme], ratios: &[usize], seeds: &[u64]) -> Vec<(Scheme, usize, u64)> {
    let mut v = Vec::new();
    for &s in schemes {
        for &r in ratios {
            for &seed in seeds {
                v.push((s, r, seed));
            }
        }
    }
    v
}

fn write_report(report: &Report, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    report.write_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    Ok(())
}

fn grid<T: Real>(
    cfg: &ExperimentConfig,
    schemes: &[Scheme],
    ratios: &[usize],
    correlate: Option<Scheme>,
) -> Result<Report> {
    let ctx = prepare::<T>(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("teacher.gosw"), ctx.segmenter.checkpoint())?;
    let mut runner = Runner::new(cfg.clone(), ctx).with_output(&cfg.out_dir);
    runner.run_grid(schemes, ratios, &cfg.seeds)?;
    let corr = correlate.and_then(|s| runner.correlation(s, ratios[0], &cfg.seeds));
    let report = runner.report(&cells(schemes, ratios, &cfg.seeds), corr);
    write_report(&report, &cfg.out_dir, cfg)?;
    Ok(report)
}

fn dispatch(cfg: &ExperimentConfig, schemes: &[Scheme], ratios: &[usize], correlate: Option<Scheme>) -> Result<Report> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => grid::<f32>(cfg, schemes, ratios, correlate),
        Precision::Double => grid::<f64>(cfg, schemes, ratios, correlate),
    }
}

/// Trains every configured scheme at every configured ratio and seed, then
/// writes `report.csv`, `report.json`, `runs.csv`, checkpoints and curves
/// under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    dispatch(cfg, &cfg.schemes, &cfg.ratios, None)
}

/// The configured schemes across `ratios`.
pub fn sweep_r(cfg: &ExperimentConfig, ratios: &[usize]) -> Result<Report> {
    let max = ratios.iter().copied().max().unwrap_or(1);
    if cfg.dataset.height % max != 0 || cfg.dataset.width % max != 0 {
        return Err(Error::Config(format!("image size not divisible by r={max}")));
    }
    dispatch(cfg, &cfg.schemes, ratios, None)
}

/// The six ablation schemes at the first configured ratio, plus the
/// JSD/perceptual curve correlation of the GOS-VAE runs.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<Report> {
    dispatch(cfg, &ABLATION_SCHEMES, &cfg.ratios[..1], Some(Scheme::Gosvae))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        let text = format!(
            "n_train = 24\nn_val = 4\nheight = 32\nwidth = 32\nclasses = 2\nteacher_epochs = 8\n\
             epochs = 1\nfinetune_epochs = 1\nseeds = 1\nprecision = double\nk = 8\nwidths = 4,8\n\
             dagger_k = 16\ndagger_widths = 4,8\nout_dir = {}\n",
            dir.display()
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn runner_shares_pretraining_and_reevaluates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ctx = prepare::<f64>(&cfg).unwrap();
        let mut runner = Runner::new(cfg.clone(), ctx).with_output(dir.path());
        runner.run_grid(&[Scheme::Vqvae, Scheme::GosvaeStar], &[4], &[1]).unwrap();
        let star = runner.trained(Scheme::GosvaeStar, 4, 1).unwrap();
        let pre_rows: Vec<_> = star.curves.rows.iter().filter(|r| r.phase == Phase::Pretrain).cloned().collect();
        assert_eq!(pre_rows.len(), 1);
        assert_eq!(pre_rows[0].losses, runner.trained(Scheme::Vqvae, 4, 1).unwrap().curves.rows[0].losses);

        // Re-evaluate the VQ-VAE row from its checkpoint on disk.
        let report = runner.report_all();
        let row = report.row(Scheme::Vqvae, 4).unwrap();
        let bytes = fs::read(dir.path().join("checkpoints/VQVAE_r4_s1.gosw")).unwrap();
        let run_cfg = cfg.run_config(Scheme::Vqvae, 4, 1);
        let model = crate::trainer::CodecModel::<f64>::from_checkpoint(run_cfg.codec_config(), run_cfg.k, &bytes).unwrap();
        let ctx = runner.context();
        let again = evaluate(&model, &ctx.val, &ctx.segmenter, Some(&ctx.extractor)).unwrap();
        assert!((again.metrics.miou - row.miou).abs() <= 1e-9 * row.miou.abs().max(1.0));
        assert!(dir.path().join("curves/GOSVAE_STAR_r4_s1.csv").exists());
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ctx = prepare::<f64>(&cfg).unwrap();
        let mut runner = Runner::new(cfg, ctx);
        let rec = runner.run(Scheme::Gosvae, 3, 1).unwrap().clone();
        assert!(matches!(rec.outcome, RunStatus::Failed { .. }), "{rec:?}");
        let report = runner.report_all();
        assert_eq!(report.rows[0].seeds + report.rows[0].divergences + report.rows[0].failures, 1);
    }

    #[test]
    fn empty_scheme_list_gives_header_only_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.schemes.clear();
        let report = run_experiment(&cfg).unwrap();
        assert!(report.rows.is_empty());
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }
}
