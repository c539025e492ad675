//! End-to-end runs shared by the CLI and the acceptance suite: corpus setup,
//! teacher training, distillation, checkpoints, the ablation grid and the
//! `lambda_p` sweep.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ensure_same, ConfigError, RunConfig};
use crate::data::{assign_splits, synth_corpus, synth_utterance, DataError, Manifest, SpecPair, SynthConfig, Split, Utterance};
use crate::distill::{distill, DistillConfig, DistillContext, DistillState};
use crate::inference::{bench_rtf, evaluate, Enhancer, InferenceError, RtfReport, StudentEnhancer, TeacherEnhancer};
use crate::metrics::{EvalReport, EvalSummary, MetricError};
use crate::model::{DenoiserModel, ModelError};
use crate::teacher::{train_teacher, StepRecord, TeacherModel, TrainError};
use crate::tensor::{Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Artifact(String),
}

impl PipelineError {
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::Train(e) => e.is_numeric(),
            PipelineError::Inference(InferenceError::Train(e)) => e.is_numeric(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_)) || matches!(self, PipelineError::Train(TrainError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training and evaluation utterances.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    /// Generates the synthetic corpus in memory.
    pub fn synth(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let utts = synth_corpus(&cfg.data)?;
        let splits = assign_splits(utts.len(), cfg.data.valid_fraction, cfg.data.test_fraction, cfg.data.seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (u, s) in utts.into_iter().zip(splits) {
            match s {
                Split::Train => train.push(u),
                Split::Test => test.push(u),
                Split::Valid => {}
            }
        }
        Ok(Self { train, test })
    }

    /// Reads a WAV corpus described by a manifest.
    pub fn from_manifest(manifest_path: &Path) -> Result<Self, PipelineError> {
        let m = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            train: m.load_split(root, Split::Train)?,
            test: m.load_split(root, Split::Test)?,
        })
    }

    pub fn train_pairs(&self, cfg: &RunConfig) -> Result<Vec<SpecPair>, PipelineError> {
        Ok(self
            .train
            .iter()
            .map(|u| SpecPair::from_utterance(u, &cfg.stft, cfg.norm_rms))
            .collect::<Result<_, _>>()?)
    }

    pub fn eval_set<'a>(&'a self, cfg: &RunConfig) -> &'a [Utterance] {
        let n = cfg.eval.max_utterances.unwrap_or(self.test.len()).min(self.test.len());
        &self.test[..n]
    }
}

/// Appends one JSON object per line; with no path it only forwards to `log`.
pub struct JsonlLog {
    out: Option<(PathBuf, BufWriter<File>)>,
    label: String,
}

impl JsonlLog {
    pub fn new(path: Option<&Path>, label: &str) -> Result<Self, PipelineError> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                Some((p.to_path_buf(), BufWriter::new(File::create(p).map_err(io_err(p))?)))
            }
            None => None,
        };
        Ok(Self {
            out,
            label: label.to_string(),
        })
    }

    pub fn record(&mut self, rec: &StepRecord) {
        log::info!(
            "{} step {} loss {:.5} mse {:.5}{}",
            self.label,
            rec.step,
            rec.loss,
            rec.terms.mse,
            rec.lambda_dsm.map(|l| format!(" lambda_dsm {l:.3e}")).unwrap_or_default()
        );
        if let Some((path, w)) = &mut self.out {
            let line = serde_json::to_string(rec).expect("record serialises");
            if let Err(e) = writeln!(w, "{line}") {
                log::warn!("cannot append to {}: {e}", path.display());
            }
        }
    }

    pub fn finish(mut self) -> Result<(), PipelineError> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(io_err(path))?;
        }
        Ok(())
    }
}

/// Trains the teacher and returns it with its EMA weights installed.
pub fn run_teacher(cfg: &RunConfig, corpus: &Corpus, log_path: Option<&Path>) -> Result<TeacherModel<f32>, PipelineError> {
    let pairs = corpus.train_pairs(cfg)?;
    let grid = cfg.time_grid()?;
    let loss = cfg.spec_loss()?;
    let mut log = JsonlLog::new(log_path, "teacher")?;
    let out = train_teacher(DenoiserModel::new(cfg.model.clone()), &pairs, &cfg.schedule, &grid, &loss, &cfg.teacher, |r| {
        log.record(r)
    })?;
    log.finish()?;
    let mut teacher = out.teacher;
    teacher.model.params = out.ema.params;
    Ok(teacher)
}

/// Distills a student; returns the EMA network used for inference.
pub fn run_distill(
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    teacher: &TeacherModel<f32>,
    corpus: &Corpus,
    log_path: Option<&Path>,
    mut observe: impl FnMut(&StepRecord),
) -> Result<DenoiserModel<f32>, PipelineError> {
    let pairs = corpus.train_pairs(cfg)?;
    let grid = cfg.time_grid()?;
    let loss = cfg.spec_loss()?;
    let ctx = DistillContext {
        teacher,
        schedule: &cfg.schedule,
        grid: &grid,
        loss: &loss,
    };
    let mut log = JsonlLog::new(log_path, if dcfg.cm_mode { "cm" } else { "ctm" })?;
    let state: DistillState<f32> = distill(&ctx, &pairs, dcfg, |r| {
        observe(r);
        log.record(r)
    })?;
    log.finish()?;
    Ok(state.ema_model())
}

pub fn evaluate_student(cfg: &RunConfig, label: &str, model: &DenoiserModel<f32>, utts: &[Utterance], nfes: &[usize]) -> Result<EvalReport, PipelineError> {
    let grid = cfg.time_grid()?;
    let e = StudentEnhancer {
        model,
        grid: &grid,
        front: cfg.front_end(),
    };
    Ok(evaluate(label, &cfg.hash(), utts, &e, nfes, cfg.stft.sample_rate)?)
}

pub fn evaluate_teacher(cfg: &RunConfig, label: &str, teacher: &TeacherModel<f32>, utts: &[Utterance], nfes: &[usize]) -> Result<EvalReport, PipelineError> {
    let grid = cfg.time_grid()?;
    let e = TeacherEnhancer {
        teacher,
        schedule: &cfg.schedule,
        grid: &grid,
        front: cfg.front_end(),
    };
    Ok(evaluate(label, &cfg.hash(), utts, &e, nfes, cfg.stft.sample_rate)?)
}

/// Checkpoint role recorded under `kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
    }
}

/// A model read back from disk with the run config it was trained under.
pub struct LoadedModel {
    pub model: DenoiserModel<f32>,
    pub kind: ModelKind,
    pub config: RunConfig,
}

pub fn save_model(path: &Path, model: &DenoiserModel<f32>, kind: ModelKind, cfg: &RunConfig) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    model
        .to_checkpoint(cfg.metadata(kind.as_str()))
        .save(path)
        .map_err(|source| PipelineError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_model(path: &Path) -> Result<LoadedModel, PipelineError> {
    let ck = Checkpoint::load(path).map_err(|source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: &str| PipelineError::Artifact(format!("{}: {msg}", path.display()));
    let kind = match ck.metadata.get("kind").and_then(|k| k.as_str()) {
        Some("teacher") => ModelKind::Teacher,
        Some("student") => ModelKind::Student,
        _ => return Err(bad("metadata lacks a teacher/student kind")),
    };
    let config: RunConfig = serde_json::from_value(ck.metadata.get("config").cloned().ok_or_else(|| bad("metadata lacks the run config"))?)
        .map_err(|e| bad(&e.to_string()))?;
    if let Some(h) = ck.metadata.get("signal_hash").and_then(|h| h.as_str()) {
        ensure_same("signal", &config.signal_hash(), h)?;
    }
    Ok(LoadedModel {
        model: DenoiserModel::from_checkpoint(&ck)?,
        kind,
        config,
    })
}

/// Largest magnitude each auxiliary term reached over a run's logged steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermMaxima {
    pub ctm_td: f64,
    pub ctm_perceptual: f64,
    pub dsm_td: f64,
    pub dsm_perceptual: f64,
    pub steps: usize,
}

impl TermMaxima {
    pub fn observe(&mut self, r: &StepRecord) {
        if r.skipped {
            return;
        }
        self.steps += 1;
        self.ctm_td = self.ctm_td.max(r.terms.td.abs());
        self.ctm_perceptual = self.ctm_perceptual.max(r.terms.perceptual.abs());
        if let Some(d) = r.dsm_terms {
            self.dsm_td = self.dsm_td.max(d.td.abs());
            self.dsm_perceptual = self.dsm_perceptual.max(d.perceptual.abs());
        }
    }
}

/// The ablation grid: full objective first, then rows a) to e).
pub fn ablation_variants(base: &DistillConfig) -> Vec<(&'static str, &'static str, DistillConfig)> {
    let with = |f: fn(&mut DistillConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", "full objective", base.clone()),
        ("a", "w/o CTM auxiliary loss", with(|c| c.disable_ctm_aux = true)),
        ("b", "w/o DSM auxiliary loss", with(|c| c.disable_dsm_aux = true)),
        (
            "c",
            "w/o both auxiliary losses",
            with(|c| {
                c.disable_ctm_aux = true;
                c.disable_dsm_aux = true
            }),
        ),
        ("d", "w/o TD loss", with(|c| c.disable_td = true)),
        ("e", "w/o perceptual loss", with(|c| c.disable_pesq = true)),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub description: String,
    pub nfe: usize,
    pub si_sdr_db: f64,
    pub proxy: f64,
    pub terms: TermMaxima,
    /// Every term switched off by the row's flags stayed exactly zero.
    pub disabled_terms_zero: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "method,description,nfe,si_sdr_db,proxy,ctm_td_max,ctm_p_max,dsm_td_max,dsm_p_max,disabled_terms_zero")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.4},{:.4},{:e},{:e},{:e},{:e},{}",
                r.method,
                r.description,
                r.nfe,
                r.si_sdr_db,
                r.proxy,
                r.terms.ctm_td,
                r.terms.ctm_perceptual,
                r.terms.dsm_td,
                r.terms.dsm_perceptual,
                r.disabled_terms_zero
            )?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("ablation.csv");
        let mut f = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        self.write_csv(&mut f).map_err(io_err(&p))?;
        f.flush().map_err(io_err(&p))?;
        let j = dir.join("ablation.json");
        std::fs::write(&j, serde_json::to_string_pretty(self).expect("report serialises")).map_err(io_err(&j))
    }
}

fn disabled_terms_zero(c: &DistillConfig, t: &TermMaxima) -> bool {
    let ctm = c.ctm_weights();
    let dsm = c.dsm_weights();
    let off = |w: f64, v: f64| w > 0.0 || v == 0.0;
    off(ctm.lambda_td, t.ctm_td) && off(ctm.lambda_p, t.ctm_perceptual) && off(dsm.lambda_td, t.dsm_td) && off(dsm.lambda_p, t.dsm_perceptual)
}

/// Trains the six ablation students for `cfg.experiments.ablation_epochs`
/// epochs each and scores them at NFE 1. Every step is logged.
pub fn ablate(cfg: &RunConfig, teacher: &TeacherModel<f32>, corpus: &Corpus, out_dir: Option<&Path>) -> Result<AblationReport, PipelineError> {
    let base = DistillConfig {
        epochs: cfg.experiments.ablation_epochs,
        log_every: 1,
        ..cfg.distill.clone()
    };
    let utts = corpus.eval_set(cfg);
    let mut rows = Vec::new();
    for (method, description, dcfg) in ablation_variants(&base) {
        log::info!("ablation {method}: {description}");
        let mut terms = TermMaxima::default();
        let log_path = out_dir.map(|d| d.join(format!("ablation_{method}.jsonl")));
        let student = run_distill(cfg, &dcfg, teacher, corpus, log_path.as_deref(), |r| terms.observe(r))?;
        let report = evaluate_student(cfg, method, &student, utts, &[1])?;
        let s = &report.summaries()[0];
        rows.push(AblationRow {
            method: method.to_string(),
            description: description.to_string(),
            nfe: 1,
            si_sdr_db: s.mean_si_sdr_db,
            proxy: s.mean_proxy,
            disabled_terms_zero: disabled_terms_zero(&dcfg, &terms),
            terms,
        });
    }
    let report = AblationReport {
        config_hash: cfg.hash(),
        epochs: base.epochs,
        rows,
    };
    if let Some(d) = out_dir {
        report.save(d)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub values: Vec<f64>,
    /// One summary per (value, NFE), values outermost.
    pub students: Vec<(f64, EvalSummary)>,
    pub teacher: Vec<EvalSummary>,
}

impl SweepReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "series,lambda_p,nfe,si_sdr_db,proxy")?;
        for (v, s) in &self.students {
            writeln!(w, "student,{v:e},{},{:.4},{:.4}", s.nfe, s.mean_si_sdr_db, s.mean_proxy)?;
        }
        for s in &self.teacher {
            writeln!(w, "teacher,,{},{:.4},{:.4}", s.nfe, s.mean_si_sdr_db, s.mean_proxy)?;
        }
        Ok(())
    }

    /// Two panels (proxy, SI-SDR) against NFE on a log2 axis.
    pub fn render_svg(&self) -> String {
        let mut series: Vec<(String, Vec<&EvalSummary>)> = self
            .values
            .iter()
            .map(|&v| {
                (
                    format!("lambda_p = {v:.1e}"),
                    self.students.iter().filter(|(x, _)| *x == v).map(|(_, s)| s).collect(),
                )
            })
            .collect();
        series.push(("teacher".to_string(), self.teacher.iter().collect()));
        let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
        let (pw, ph, margin) = (360.0, 240.0, 50.0);
        let width = 2.0 * (pw + 2.0 * margin);
        let height = ph + 2.0 * margin + 20.0 * series.len() as f64;
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
        let panels: [(&str, fn(&EvalSummary) -> f64); 2] = [("perceptual proxy (lower is better)", |s| s.mean_proxy), ("SI-SDR [dB]", |s| s.mean_si_sdr_db)];
        let all: Vec<&EvalSummary> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let max_nfe = all.iter().map(|s| s.nfe).max().unwrap_or(1).max(2) as f64;
        for (k, (title, metric)) in panels.iter().enumerate() {
            let x0 = k as f64 * (pw + 2.0 * margin) + margin;
            let y0 = margin;
            let vals: Vec<f64> = all.iter().map(|s| metric(s)).filter(|v| v.is_finite()).collect();
            let (mut lo, mut hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !(hi > lo) {
                lo -= 1.0;
                hi += 1.0;
            }
            let pad = 0.05 * (hi - lo);
            let (lo, hi) = (lo - pad, hi + pad);
            let px = |nfe: usize| x0 + (nfe as f64).log2() / max_nfe.log2() * pw;
            let py = |v: f64| y0 + (hi - v) / (hi - lo) * ph;
            let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, x0 + pw / 2.0, y0 - 10.0);
            let mut nfes: Vec<usize> = all.iter().map(|s| s.nfe).collect();
            nfes.sort_unstable();
            nfes.dedup();
            for n in nfes {
                let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{n}</text>"#, px(n), y0 + ph + 15.0);
            }
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">NFE</text>"#, x0 + pw / 2.0, y0 + ph + 30.0);
            for v in [lo + pad, (lo + hi) / 2.0, hi - pad] {
                let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, py(v) + 4.0);
            }
            for (i, (_, pts)) in series.iter().enumerate() {
                let c = colours[i % colours.len()];
                let dash = if i + 1 == series.len() { r#" stroke-dasharray="5,3""# } else { "" };
                let coords: Vec<String> = pts.iter().map(|s| format!("{:.1},{:.1}", px(s.nfe), py(metric(s)))).collect();
                let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"{dash}/>"#, coords.join(" "));
                for s in pts {
                    let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(s.nfe), py(metric(s)));
                }
            }
        }
        for (i, (name, _)) in series.iter().enumerate() {
            let y = ph + 2.0 * margin + 20.0 * i as f64;
            let c = colours[i % colours.len()];
            let _ = writeln!(svg, r#"<line x1="{margin}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, margin + 25.0);
            let _ = writeln!(svg, r#"<text x="{}" y="{}">{name}</text>"#, margin + 32.0, y + 4.0);
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("sweep_lambda_p.csv");
        let mut f = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        self.write_csv(&mut f).map_err(io_err(&p))?;
        f.flush().map_err(io_err(&p))?;
        let s = dir.join("sweep_lambda_p.svg");
        std::fs::write(&s, self.render_svg()).map_err(io_err(&s))
    }
}

/// One full-budget student per `lambda_p` value, each scored at every
/// configured NFE, plus the teacher as a reference series.
pub fn sweep_lambda_p(cfg: &RunConfig, teacher: &TeacherModel<f32>, corpus: &Corpus, values: &[f64], out_dir: Option<&Path>) -> Result<SweepReport, PipelineError> {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0)) {
        return Err(ConfigError::Invalid("lambda_p values must be non-empty and > 0".into()).into());
    }
    let utts = corpus.eval_set(cfg);
    let nfes = &cfg.eval.nfe;
    let mut students = Vec::new();
    for &v in values {
        let dcfg = DistillConfig {
            lambda_p: v,
            ..cfg.distill.clone()
        };
        let log_path = out_dir.map(|d| d.join(format!("sweep_{v:e}.jsonl")));
        let student = run_distill(cfg, &dcfg, teacher, corpus, log_path.as_deref(), |_| {})?;
        let report = evaluate_student(cfg, &format!("lambda_p={v:e}"), &student, utts, nfes)?;
        students.extend(report.summaries().into_iter().map(|s| (v, s)));
    }
    let teacher_report = evaluate_teacher(cfg, "teacher", teacher, utts, nfes)?;
    let report = SweepReport {
        config_hash: cfg.hash(),
        values: values.to_vec(),
        students,
        teacher: teacher_report.summaries(),
    };
    if let Some(d) = out_dir {
        report.save(d)?;
    }
    Ok(report)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return if syy == 0.0 { 1.0 } else { 0.0 };
    }
    sxy * sxy / (sxx * syy)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub rows: Vec<RtfReport>,
    /// Linearity of mean wall-clock time in NFE.
    pub r_squared: f64,
}

impl BenchReport {
    pub fn rtf(&self, nfe: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.nfe == nfe).map(|r| r.rtf)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "nfe,duration_s,mean_s,rtf,runs_s,hardware")?;
        for r in &self.rows {
            let runs: Vec<String> = r.runs.iter().map(|t| format!("{t:.5}")).collect();
            writeln!(w, "{},{},{:.5},{:.5},{},\"{}\"", r.nfe, r.duration_s, r.mean_s, r.rtf, runs.join(";"), r.hardware)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "NFE {:>2}: {:.3} s per {:.1} s of audio, RTF {:.4}", r.nfe, r.mean_s, r.duration_s, r.rtf);
        }
        let _ = write!(s, "R^2 of time vs NFE: {:.4}", self.r_squared);
        if let Some(h) = self.rows.first().map(|r| &r.hardware) {
            let _ = write!(s, "\n{h}");
        }
        s
    }
}

/// Times `enhancer` on a synthetic input of `duration_s` seconds at each NFE.
pub fn bench(cfg: &RunConfig, enhancer: &dyn Enhancer, nfes: &[usize], duration_s: f64, runs: usize) -> Result<BenchReport, PipelineError> {
    if nfes.is_empty() || runs == 0 {
        return Err(ConfigError::Invalid("bench needs at least one NFE and one run".into()).into());
    }
    let input = synth_utterance(
        &SynthConfig {
            duration_s,
            ..cfg.data.clone()
        },
        0,
    )?
    .noisy;
    let rows = nfes
        .iter()
        .map(|&nfe| bench_rtf(enhancer, &input, cfg.stft.sample_rate, nfe, runs))
        .collect::<Result<Vec<_>, _>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.nfe as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_s).collect();
    Ok(BenchReport {
        config_hash: cfg.hash(),
        r_squared: linear_r_squared(&x, &y),
        rows,
    })
}
