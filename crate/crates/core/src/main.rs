use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sbctm::config::{ensure_same, ConfigError, RunConfig};
use sbctm::data::write_corpus;
use sbctm::inference::{Enhancer, StudentEnhancer, TeacherEnhancer};
use sbctm::metrics::EvalReport;
use sbctm::pipeline::{
    ablate, bench, evaluate_student, evaluate_teacher, load_model, run_distill, run_teacher, save_model, sweep_lambda_p, Corpus, LoadedModel,
    ModelKind, PipelineError,
};
use sbctm::signal::wav::{read_wav, write_wav, WavFormat};
use sbctm::teacher::TeacherModel;

#[derive(Parser)]
#[command(name = "sbctm", version, about = "Bridge consistency-trajectory speech enhancement")]
struct Cli {
    /// Root directory for every artifact written by a verb.
    #[arg(long, env = "SBCTM_OUTPUT_ROOT", default_value = "runs", global = true)]
    out_root: PathBuf,
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Train/test corpus manifest; the synthetic corpus is generated in memory when omitted.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Write the synthetic corpus as WAV files plus a manifest.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the bridge teacher.
    TrainTeacher {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Consistency-model mode: always jump to s = 0.
        #[arg(long)]
        cm: bool,
        #[arg(long)]
        disable_ctm_aux: bool,
        #[arg(long)]
        disable_dsm_aux: bool,
        #[arg(long)]
        disable_td: bool,
        #[arg(long)]
        disable_pesq: bool,
    },
    /// Enhance a WAV file or every WAV in a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
    },
    /// Score checkpoints on the test split at every configured NFE.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        nfe: Option<Vec<usize>>,
    },
    /// Real-time-factor benchmark.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        nfe: Option<Vec<usize>>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train and score the six auxiliary-loss ablation students.
    Ablate {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train one student per perceptual-loss weight and chart quality vs NFE.
    Sweep {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn corpus(cli: &Cli, cfg: &RunConfig) -> Result<Corpus> {
    Ok(match &cli.data {
        Some(m) => Corpus::from_manifest(m)?,
        None => Corpus::synth(cfg)?,
    })
}

/// Loads a checkpoint and resolves the config to use with it: the one passed
/// on the command line must agree on the signal hash, otherwise the
/// checkpoint's own config is used.
fn checkpoint_with_config(cli: &Cli, path: &Path) -> Result<(LoadedModel, RunConfig)> {
    let loaded = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = match &cli.config {
        Some(_) => {
            let cfg = run_config(cli)?;
            ensure_same("signal", &cfg.signal_hash(), &loaded.config.signal_hash())?;
            cfg
        }
        None => loaded.config.clone(),
    };
    Ok((loaded, cfg))
}

fn load_teacher(cli: &Cli, path: &Path) -> Result<(TeacherModel<f32>, RunConfig)> {
    let (loaded, cfg) = checkpoint_with_config(cli, path)?;
    if loaded.kind != ModelKind::Teacher {
        bail!("{} is a {} checkpoint, expected a teacher", path.display(), loaded.kind.as_str());
    }
    Ok((TeacherModel::new(loaded.model), cfg))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn save_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    report.save(dir, stem)?;
    for s in report.summaries() {
        println!("{:<12} NFE {:>2}  SI-SDR {:>7.3} dB  proxy {:.4}  (n = {})", s.label, s.nfe, s.mean_si_sdr_db, s.mean_proxy, s.count);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root.clone();
    match &cli.cmd {
        Command::Config => println!("{}", run_config(&cli)?.to_json()),
        Command::SynthData { out } => {
            let cfg = run_config(&cli)?;
            let dir = out.clone().unwrap_or_else(|| root.join("data"));
            let m = write_corpus(&dir, &cfg.data)?;
            println!("wrote {} utterance pairs to {}", m.entries.len(), dir.display());
        }
        Command::TrainTeacher { out } => {
            let cfg = run_config(&cli)?;
            let corpus = corpus(&cli, &cfg)?;
            let teacher = run_teacher(&cfg, &corpus, Some(&root.join("teacher.jsonl")))?;
            let path = out.clone().unwrap_or_else(|| root.join("teacher.ckpt"));
            save_model(&path, &teacher.model, ModelKind::Teacher, &cfg)?;
            println!("teacher saved to {}", path.display());
        }
        Command::Distill {
            teacher,
            out,
            cm,
            disable_ctm_aux,
            disable_dsm_aux,
            disable_td,
            disable_pesq,
        } => {
            let (teacher, mut cfg) = load_teacher(&cli, teacher)?;
            let d = &mut cfg.distill;
            d.cm_mode |= cm;
            d.disable_ctm_aux |= disable_ctm_aux;
            d.disable_dsm_aux |= disable_dsm_aux;
            d.disable_td |= disable_td;
            d.disable_pesq |= disable_pesq;
            cfg.validate()?;
            let corpus = corpus(&cli, &cfg)?;
            let name = if cfg.distill.cm_mode { "student_cm" } else { "student" };
            let student = run_distill(&cfg, &cfg.distill, &teacher, &corpus, Some(&root.join(format!("{name}.jsonl"))), |_| {})?;
            let path = out.clone().unwrap_or_else(|| root.join(format!("{name}.ckpt")));
            save_model(&path, &student, ModelKind::Student, &cfg)?;
            println!("student saved to {}", path.display());
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
            nfe,
        } => {
            let (loaded, cfg) = checkpoint_with_config(&cli, checkpoint)?;
            let grid = cfg.time_grid()?;
            if *nfe == 0 || *nfe > grid.len() {
                return Err(ConfigError::Invalid(format!("nfe must lie in 1..={}", grid.len())).into());
            }
            let teacher = TeacherModel::new(loaded.model.clone());
            let student = StudentEnhancer {
                model: &loaded.model,
                grid: &grid,
                front: cfg.front_end(),
            };
            let teacher_enh = TeacherEnhancer {
                teacher: &teacher,
                schedule: &cfg.schedule,
                grid: &grid,
                front: cfg.front_end(),
            };
            let enhancer: &dyn Enhancer = match loaded.kind {
                ModelKind::Student => &student,
                ModelKind::Teacher => {
                    log::warn!("teacher checkpoint: its s-embedding is untrained, sampling with the bridge solver instead of jumps");
                    &teacher_enh
                }
            };
            let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
                wav_files(input)?
                    .into_iter()
                    .map(|p| {
                        let o = output.join(p.file_name().expect("listed file"));
                        (p, o)
                    })
                    .collect()
            } else {
                vec![(input.clone(), output.clone())]
            };
            for (i, o) in jobs {
                let noisy = read_wav(&i)?;
                let est = enhancer.enhance_wave(&noisy, *nfe).with_context(|| format!("enhancing {}", i.display()))?;
                write_wav(&o, &est, WavFormat::Float32)?;
                println!("{} -> {}", i.display(), o.display());
            }
        }
        Command::Eval { checkpoints, nfe } => {
            let mut reference: Option<String> = None;
            for path in checkpoints {
                let (loaded, cfg) = checkpoint_with_config(&cli, path)?;
                let sig = cfg.signal_hash();
                match &reference {
                    Some(r) => ensure_same("signal", r, &sig)?,
                    None => reference = Some(sig),
                }
                let corpus = corpus(&cli, &cfg)?;
                let utts = corpus.eval_set(&cfg);
                let nfes = nfe.clone().unwrap_or_else(|| cfg.eval.nfe.clone());
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                let report = match loaded.kind {
                    ModelKind::Student => evaluate_student(&cfg, &stem, &loaded.model, utts, &nfes)?,
                    ModelKind::Teacher => evaluate_teacher(&cfg, &stem, &TeacherModel::new(loaded.model), utts, &nfes)?,
                };
                save_report(&report, &root.join("eval"), &stem)?;
                let input = sbctm::inference::evaluate_input(&cfg.hash(), utts, cfg.stft.sample_rate)?;
                save_report(&input, &root.join("eval"), "input")?;
            }
        }
        Command::Bench {
            checkpoint,
            nfe,
            duration,
            runs,
        } => {
            let (loaded, cfg) = checkpoint_with_config(&cli, checkpoint)?;
            if loaded.kind != ModelKind::Student {
                bail!("bench expects a student checkpoint");
            }
            let grid = cfg.time_grid()?;
            let e = StudentEnhancer {
                model: &loaded.model,
                grid: &grid,
                front: cfg.front_end(),
            };
            let nfes = nfe.clone().unwrap_or_else(|| cfg.eval.nfe.clone());
            let report = bench(&cfg, &e, &nfes, duration.unwrap_or(cfg.eval.rtf_duration_s), runs.unwrap_or(cfg.eval.rtf_runs))?;
            std::fs::create_dir_all(&root)?;
            let path = root.join("bench.csv");
            let mut f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            report.write_csv(&mut f)?;
            println!("{}", report.summary());
        }
        Command::Ablate { teacher } => {
            let (teacher, cfg) = load_teacher(&cli, teacher)?;
            let corpus = corpus(&cli, &cfg)?;
            let report = ablate(&cfg, &teacher, &corpus, Some(&root.join("ablation")))?;
            println!("method  SI-SDR [dB]  proxy   disabled terms zero");
            for r in &report.rows {
                println!("{:<6} {:>11.3} {:>7.4}   {}", r.method, r.si_sdr_db, r.proxy, r.disabled_terms_zero);
            }
        }
        Command::Sweep { teacher, values } => {
            let (teacher, cfg) = load_teacher(&cli, teacher)?;
            let values = values.clone().unwrap_or_else(|| cfg.experiments.lambda_p_sweep.clone());
            let corpus = corpus(&cli, &cfg)?;
            let report = sweep_lambda_p(&cfg, &teacher, &corpus, &values, Some(&root.join("sweep")))?;
            let mut out = Vec::new();
            report.write_csv(&mut out)?;
            print!("{}", String::from_utf8_lossy(&out));
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            if p.is_config() {
                return 2;
            }
            if p.is_numeric() {
                return 3;
            }
        }
        if let Some(t) = cause.downcast_ref::<sbctm::teacher::TrainError>() {
            if t.is_numeric() {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
