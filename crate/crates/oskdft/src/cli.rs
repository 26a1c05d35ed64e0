//! Command-line surface: synthetic data generation, teacher pretraining,
//! training in every mode, checkpoint evaluation, inference-latency
//! benchmarking, and cross-run comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::Rng;

use crate::data::corpus::{export_corpus, load_corpus, synth_corpus, SynthSpec};
use crate::data::trials::{gen_trials, load_trials, save_trials};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, render_eer_report, score_trials, write_scores};
use crate::head::store_has_adapters;
use crate::model::{cnn_forward, forward_path, param_count, AdapterWeights};
use crate::rng::{derive_seed, rng_from, stream};
use crate::store::{Checkpoint, Role};
use crate::trainer::config::{Mode, RunConfig};
use crate::trainer::{
    resolve_path, resolve_speakers, run_all_seeds, run_pretrain, run_training, RunPaths,
};

#[derive(Parser)]
#[command(
    name = "oskdft",
    version,
    about = "Joint distillation and speaker-verification fine-tuning workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize train/eval corpora and a trial list under <workdir>/data.
    GenData(GenDataArgs),
    /// Pretrain the teacher by masked-frame reconstruction; writes teacher.ckpt.
    PretrainTeacher(PretrainArgs),
    /// Train one mode end to end (every seed in the config, or just --seed).
    Train(TrainArgs),
    /// Score the trial list with a trained checkpoint and report its EER.
    Evaluate(EvaluateArgs),
    /// Time the encoder forward pass (batch 1) for teacher and student.
    Benchmark(BenchmarkArgs),
    /// Summarize completed runs into a comparison table and a plot-data CSV.
    Compare(CompareArgs),
}

pub fn run_cli() -> Result<()> {
    match Cli::parse().command {
        Cmd::GenData(a) => cmd_gen_data(&a),
        Cmd::PretrainTeacher(a) => cmd_pretrain_teacher(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Benchmark(a) => cmd_benchmark(&a),
        Cmd::Compare(a) => cmd_compare(&a),
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    RunConfig::parse(&text)
}

/// Print the fully resolved config and the learning-rate schedule CSV.
/// When the training manifest already exists, the speaker count is resolved
/// exactly as a real run would resolve it.
fn print_dry_run(rc: &RunConfig, workdir: &Path) -> Result<()> {
    let manifest = resolve_path(workdir, &rc.train_manifest);
    let rc = if manifest.exists() {
        let train = load_corpus(&manifest)?;
        resolve_speakers(rc, &train)?
    } else {
        rc.validate()?;
        rc.clone()
    };
    print!("{}", rc.render());
    println!();
    print!("{}", rc.schedule.to_csv()?);
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Root directory; corpora land in <workdir>/data/{train,eval}.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Master seed for corpus and trial synthesis.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    train_speakers: usize,
    /// Utterances per training speaker.
    #[arg(long, default_value_t = 8)]
    train_utts: usize,
    #[arg(long, default_value_t = 10)]
    eval_speakers: usize,
    /// Utterances per evaluation speaker.
    #[arg(long, default_value_t = 4)]
    eval_utts: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 4.0)]
    seconds: f64,
    #[arg(long, default_value_t = 4000)]
    sample_rate: u32,
    /// Same-speaker trials to draw from the evaluation corpus.
    #[arg(long, default_value_t = 100)]
    targets: usize,
    /// Different-speaker trials to draw from the evaluation corpus.
    #[arg(long, default_value_t = 100)]
    nontargets: usize,
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let data = a.workdir.join("data");
    let train = synth_corpus(
        &SynthSpec {
            n_speakers: a.train_speakers,
            utts_per_speaker: a.train_utts,
            seconds: a.seconds,
            sample_rate: a.sample_rate,
        },
        derive_seed(a.seed, &[1]),
    )?;
    let eval = synth_corpus(
        &SynthSpec {
            n_speakers: a.eval_speakers,
            utts_per_speaker: a.eval_utts,
            seconds: a.seconds,
            sample_rate: a.sample_rate,
        },
        derive_seed(a.seed, &[2]),
    )?;
    let train_manifest = export_corpus(&train, &data.join("train"))?;
    let eval_manifest = export_corpus(&eval, &data.join("eval"))?;
    let trials = gen_trials(&eval, a.targets, a.nontargets, derive_seed(a.seed, &[3]))?;
    let trials_path = data.join("trials.txt");
    save_trials(&trials, &trials_path)?;
    println!(
        "train {} ({} speakers x {} utterances)",
        train_manifest.display(),
        a.train_speakers,
        a.train_utts
    );
    println!(
        "eval {} ({} speakers x {} utterances)",
        eval_manifest.display(),
        a.eval_speakers,
        a.eval_utts
    );
    println!("trials {} ({} trials)", trials_path.display(), trials.len());
    Ok(())
}

// -------------------------------------------------------- pretrain-teacher

#[derive(Args)]
struct PretrainArgs {
    /// Run-config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Seed to pretrain with (default: first seed in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved config and schedule, then exit without training.
    #[arg(long)]
    dry_run: bool,
}

fn cmd_pretrain_teacher(a: &PretrainArgs) -> Result<()> {
    let mut rc = read_config(&a.config)?;
    if rc.mode != Mode::TeacherPretrain {
        // Divert into a mode-named run directory so an existing training
        // run's directory is never touched.
        rc.mode = Mode::TeacherPretrain;
        rc.run_name = String::new();
    }
    if a.dry_run {
        return print_dry_run(&rc, &a.workdir);
    }
    let seed = a.seed.or_else(|| rc.seeds.first().copied()).unwrap_or(0);
    let paths = run_pretrain(&rc, seed, &a.workdir)?;
    println!("run {}", paths.dir.display());
    println!(
        "teacher {}",
        resolve_path(&a.workdir, &rc.teacher_ckpt).display()
    );
    Ok(())
}

// -------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Run-config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the training mode; the run is then named after the new mode
    /// unless the config pins run_name.
    #[arg(long)]
    mode: Option<String>,
    /// Train only this seed instead of every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Resume each run from its newest epoch checkpoint.
    #[arg(long)]
    resume: bool,
    /// Print the resolved config and schedule, then exit without training.
    #[arg(long)]
    dry_run: bool,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut rc = read_config(&a.config)?;
    if let Some(m) = &a.mode {
        let mode = Mode::parse(m)?;
        if mode != rc.mode {
            rc.mode = mode;
            rc.run_name = String::new();
        }
    }
    if a.dry_run {
        return print_dry_run(&rc, &a.workdir);
    }
    let outcomes = match a.seed {
        Some(seed) => vec![run_training(&rc, seed, &a.workdir, a.resume)?],
        None => run_all_seeds(&rc, &a.workdir, a.resume)?,
    };
    for o in &outcomes {
        match o.final_eer {
            Some(eer) => println!("{} eer {eer:.6}", o.run_dir.display()),
            None => println!("{} done", o.run_dir.display()),
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Run-config file naming the evaluation manifest and trial list.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Checkpoint to score (default: the run's student.ckpt).
    #[arg(long)]
    ckpt: Option<String>,
    /// Seed selecting the run directory (default: first seed in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write scores.txt and eer.txt into this directory.
    #[arg(long)]
    out: Option<String>,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let rc = read_config(&a.config)?;
    let seed = a.seed.or_else(|| rc.seeds.first().copied()).unwrap_or(0);
    let ckpt_path = match &a.ckpt {
        Some(p) => resolve_path(&a.workdir, p),
        None => RunPaths::new(&a.workdir, rc.name(), seed).student(),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if ckpt.role == Role::TrainState {
        return Err(Error::Config(format!(
            "`{}` is a mid-training state checkpoint, not an evaluable model",
            ckpt_path.display()
        )));
    }
    let head = ckpt.head.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "`{}` carries no classifier head, so it cannot produce embeddings",
            ckpt_path.display()
        ))
    })?;
    let eval = load_corpus(&resolve_path(&a.workdir, &rc.eval_manifest))?;
    let trials = load_trials(&resolve_path(&a.workdir, &rc.trials_path))?;
    let set = score_trials(&eval, &trials, &ckpt.store, &ckpt.model, head)?;
    let eer = compute_eer(&set)?;
    let report = render_eer_report(eer, &set);
    print!("{report}");
    if let Some(out) = &a.out {
        let dir = resolve_path(&a.workdir, out);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_scores(&trials, &set, &dir.join("scores.txt"))?;
        let eer_path = dir.join("eer.txt");
        fs::write(&eer_path, &report)
            .map_err(|e| Error::io(eer_path.display().to_string(), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- benchmark

#[derive(Args)]
struct BenchmarkArgs {
    /// Teacher checkpoint (resolved against --workdir).
    #[arg(long, default_value = "teacher.ckpt")]
    teacher: String,
    /// Student checkpoint (resolved against --workdir).
    #[arg(long, default_value = "student.ckpt")]
    student: String,
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Fixed input length in samples; the batch size is always one.
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    /// Timed repetitions per model.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Untimed warmup repetitions per model.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Seed for the synthetic input waveform.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file (resolved against --workdir).
    #[arg(long)]
    out: Option<String>,
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

/// Time the encoder forward (CNN + transformer stack at the checkpoint's
/// depth, adapters included when the store has them). Returns latency mean
/// and standard deviation in milliseconds.
fn time_encoder(
    ckpt: &Checkpoint,
    wave: &Array1<f64>,
    warmup: usize,
    reps: usize,
) -> Result<(f64, f64)> {
    let cfg = &ckpt.model;
    let (depth, adapters) = match ckpt.role {
        Role::Teacher | Role::TunedTeacher => (cfg.n_layers_teacher, None),
        Role::Student => (
            cfg.n_layers_student,
            if store_has_adapters(&ckpt.store) {
                Some(AdapterWeights::all_from_store(&ckpt.store, cfg.n_layers_student)?)
            } else {
                None
            },
        ),
        Role::TrainState => {
            return Err(Error::Config(
                "cannot benchmark a mid-training state checkpoint".into(),
            ))
        }
    };
    let run = || -> Result<()> {
        let (feats, _) = cnn_forward(wave.view(), &ckpt.store, cfg)?;
        forward_path(&feats, &ckpt.store, cfg, depth, adapters.as_deref())?;
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        run()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(mean_std(&ms))
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(Error::Config("benchmark needs at least one repetition".into()));
    }
    let teacher = Checkpoint::load(&resolve_path(&a.workdir, &a.teacher))?;
    let student = Checkpoint::load(&resolve_path(&a.workdir, &a.student))?;
    if !matches!(teacher.role, Role::Teacher | Role::TunedTeacher) {
        return Err(Error::Config(format!(
            "`{}` is not a teacher checkpoint (role {:?})",
            a.teacher, teacher.role
        )));
    }
    if student.role != Role::Student {
        return Err(Error::Config(format!(
            "`{}` is not a student checkpoint (role {:?})",
            a.student, student.role
        )));
    }
    if teacher.model != student.model {
        return Err(Error::Config(
            "teacher and student checkpoints disagree on the model configuration".into(),
        ));
    }
    let mut rng = rng_from(a.seed, &[stream::NOISE]);
    let wave = Array1::from_shape_fn(a.samples, |_| rng.gen_range(-1.0..1.0));
    let (t_mean, t_std) = time_encoder(&teacher, &wave, a.warmup, a.reps)?;
    let (s_mean, s_std) = time_encoder(&student, &wave, a.warmup, a.reps)?;
    let s_total = student.store.total_params();
    let s_adapter = student.store.params_with_prefix("adapter.");
    let report = format!(
        "samples {}\nwarmup {}\nreps {}\n\
         teacher.params {}\nteacher.latency_mean_ms {:.6}\nteacher.latency_std_ms {:.6}\n\
         student.params {}\nstudent.params_adapter {}\nstudent.params_core {}\n\
         student.latency_mean_ms {:.6}\nstudent.latency_std_ms {:.6}\n\
         latency_ratio {:.6}\n",
        a.samples,
        a.warmup,
        a.reps,
        teacher.store.total_params(),
        t_mean,
        t_std,
        s_total,
        s_adapter,
        s_total - s_adapter,
        s_mean,
        s_std,
        s_mean / t_mean,
    );
    print!("{report}");
    if let Some(out) = &a.out {
        let path = resolve_path(&a.workdir, out);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, &report).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

// ------------------------------------------------------------------ compare

#[derive(Args)]
struct CompareArgs {
    /// Root directory holding the run directories.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Run names to include (default: every directory under the workdir
    /// that contains an s<seed> subdirectory).
    #[arg(long, value_delimiter = ',')]
    runs: Vec<String>,
    /// Benchmark report file; fills the latency column from its
    /// student.latency_mean_ms line.
    #[arg(long)]
    benchmark: Option<String>,
    /// Output basename under the workdir; writes <out>.txt and <out>.csv.
    #[arg(long, default_value = "compare")]
    out: String,
}

/// Training-strategy label and its table rank, derived from a resolved
/// run config. Joint-training variants are ranked in ablation order.
fn arm_label(rc: &RunConfig) -> (u8, String) {
    match rc.mode {
        Mode::OsKdft => match (rc.adapters_enabled(), rc.split_paths, rc.per_module_lr) {
            (false, _, _) => (0, "KDFT".to_string()),
            (true, false, _) => (1, "KDFT (AS param)".to_string()),
            (true, true, false) => (2, "OS-KDFT (AS)".to_string()),
            (true, true, true) => (3, "OS-KDFT (AS, LR)".to_string()),
        },
        Mode::KdftSequential => (
            4,
            format!("KD->FT {}:{}", rc.kd_ft_ratio.0, rc.kd_ft_ratio.1),
        ),
        Mode::KdThenFreeze => (
            5,
            format!("KD->frozen FT {}:{}", rc.kd_ft_ratio.0, rc.kd_ft_ratio.1),
        ),
        Mode::TunedTeacherKl => (6, "Tuned-teacher KL".to_string()),
        Mode::FtOnly => (7, "FT only".to_string()),
        Mode::TeacherPretrain => (8, "Teacher pretrain".to_string()),
    }
}

/// One completed seed of a run: its resolved config and final EER.
fn read_seed_dir(dir: &Path) -> Result<Option<(RunConfig, f64)>> {
    let config_path = dir.join("config.txt");
    let text = fs::read_to_string(&config_path)
        .map_err(|_| Error::MissingArtifact(format!("{} (incomplete run)", config_path.display())))?;
    let rc = RunConfig::parse(&text)?;
    if rc.mode == Mode::TeacherPretrain {
        return Ok(None);
    }
    let eer_path = dir.join("eer.txt");
    let eer_text = fs::read_to_string(&eer_path)
        .map_err(|_| Error::MissingArtifact(format!("{} (incomplete run)", eer_path.display())))?;
    let eer = eer_text
        .lines()
        .find_map(|l| l.strip_prefix("eer "))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| {
            Error::Data(format!("{}: no parseable `eer` line", eer_path.display()))
        })?;
    Ok(Some((rc, eer)))
}

/// Directories under `dir` named s<seed>, sorted by seed.
fn seed_dirs(dir: &Path) -> Vec<(u64, PathBuf)> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix('s').and_then(|s| s.parse::<u64>().ok()) {
                if entry.path().is_dir() {
                    out.push((seed, entry.path()));
                }
            }
        }
    }
    out.sort_by_key(|(seed, _)| *seed);
    out
}

/// Run names under the workdir: directories holding at least one s<seed>
/// subdirectory, in name order.
fn scan_run_names(workdir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(workdir)
        .map_err(|e| Error::io(workdir.display().to_string(), e))?;
    let mut names = Vec::new();
    for entry in entries.flatten() {
        if entry.path().is_dir() && !seed_dirs(&entry.path()).is_empty() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

struct CompareRow {
    arm: String,
    run: String,
    params: usize,
    seeds: Vec<u64>,
    eers: Vec<f64>,
}

fn render_table(rows: &[CompareRow], latency: Option<f64>, footer: &[String]) -> String {
    let header = ["arm", "run", "seeds", "params", "eer% (mean +/- std)", "latency_ms"];
    let mut cells: Vec<[String; 6]> = Vec::with_capacity(rows.len());
    for r in rows {
        let (mean, std) = mean_std(&r.eers);
        cells.push([
            r.arm.clone(),
            r.run.clone(),
            r.seeds.len().to_string(),
            r.params.to_string(),
            format!("{:.2} +/- {:.2}", 100.0 * mean, 100.0 * std),
            latency.map_or("-".to_string(), |l| format!("{l:.3}")),
        ]);
    }
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let fmt_row = |cols: [&str; 6]| -> String {
        let mut line = String::new();
        for (i, (cell, w)) in cols.iter().zip(widths.iter()).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<w$}"));
        }
        line.trim_end().to_string() + "\n"
    };
    let mut out = fmt_row(header);
    for row in &cells {
        out.push_str(&fmt_row([
            &row[0], &row[1], &row[2], &row[3], &row[4], &row[5],
        ]));
    }
    for note in footer {
        out.push_str(&format!("# {note}\n"));
    }
    out
}

fn render_plot_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("arm,run,seed,eer,params\n");
    for r in rows {
        for (seed, eer) in r.seeds.iter().zip(r.eers.iter()) {
            out.push_str(&format!("{},{},{},{},{}\n", r.arm, r.run, seed, eer, r.params));
        }
    }
    out
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let run_names = if a.runs.is_empty() {
        scan_run_names(&a.workdir)?
    } else {
        a.runs.clone()
    };
    let mut grouped: BTreeMap<(u8, String, String), CompareRow> = BTreeMap::new();
    let mut skipped: Vec<String> = Vec::new();
    for name in &run_names {
        let dirs = seed_dirs(&a.workdir.join(name));
        if dirs.is_empty() {
            skipped.push(format!("skipped {name}: no seed directories"));
            continue;
        }
        for (seed, sdir) in dirs {
            match read_seed_dir(&sdir) {
                Ok(None) => {} // teacher pretraining is not a comparison arm
                Ok(Some((rc, eer))) => {
                    let (rank, arm) = arm_label(&rc);
                    let params = param_count(
                        &rc.model,
                        Some(&rc.head),
                        rc.model.n_layers_student,
                        rc.adapters_enabled(),
                    );
                    let row = grouped
                        .entry((rank, arm.clone(), name.clone()))
                        .or_insert_with(|| CompareRow {
                            arm,
                            run: name.clone(),
                            params,
                            seeds: Vec::new(),
                            eers: Vec::new(),
                        });
                    row.seeds.push(seed);
                    row.eers.push(eer);
                }
                Err(e) => skipped.push(format!("skipped {name}/s{seed}: {e}")),
            }
        }
    }
    let rows: Vec<CompareRow> = grouped.into_values().collect();
    if rows.is_empty() && skipped.is_empty() {
        return Err(Error::Data(format!(
            "no completed runs under `{}`",
            a.workdir.display()
        )));
    }
    let mut footer = Vec::new();
    let latency = match &a.benchmark {
        Some(p) => {
            let path = resolve_path(&a.workdir, p);
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let value = text
                .lines()
                .find_map(|l| l.strip_prefix("student.latency_mean_ms "))
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}: no parseable `student.latency_mean_ms` line",
                        path.display()
                    ))
                })?;
            footer.push(format!("latency: student mean from {p}"));
            Some(value)
        }
        None => None,
    };
    footer.extend(skipped);
    let table = render_table(&rows, latency, &footer);
    let csv = render_plot_csv(&rows);
    let table_path = a.workdir.join(format!("{}.txt", a.out));
    let csv_path = a.workdir.join(format!("{}.csv", a.out));
    fs::write(&table_path, &table)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    fs::write(&csv_path, &csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    print!("{table}");
    println!("table {}", table_path.display());
    println!("plot-data {}", csv_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_declaration_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn mean_std_handles_short_inputs() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn arm_labels_follow_ablation_order() {
        let mut rc = RunConfig::default();
        rc.mode = Mode::OsKdft;
        rc.use_adapters = Some(false);
        assert_eq!(arm_label(&rc), (0, "KDFT".to_string()));
        rc.use_adapters = Some(true);
        rc.split_paths = false;
        assert_eq!(arm_label(&rc), (1, "KDFT (AS param)".to_string()));
        rc.split_paths = true;
        rc.per_module_lr = false;
        assert_eq!(arm_label(&rc), (2, "OS-KDFT (AS)".to_string()));
        rc.per_module_lr = true;
        assert_eq!(arm_label(&rc), (3, "OS-KDFT (AS, LR)".to_string()));
        rc.mode = Mode::TunedTeacherKl;
        assert_eq!(arm_label(&rc).0, 6);
    }

    #[test]
    fn comparison_table_is_deterministic_and_aligned() {
        let rows = vec![
            CompareRow {
                arm: "KDFT".into(),
                run: "kdft".into(),
                params: 1200,
                seeds: vec![0, 1],
                eers: vec![0.10, 0.14],
            },
            CompareRow {
                arm: "OS-KDFT (AS, LR)".into(),
                run: "os_kdft".into(),
                params: 1456,
                seeds: vec![0, 1],
                eers: vec![0.08, 0.10],
            },
        ];
        let a = render_table(&rows, Some(1.25), &["latency: student mean from b.txt".into()]);
        let b = render_table(&rows, Some(1.25), &["latency: student mean from b.txt".into()]);
        assert_eq!(a, b);
        assert!(a.contains("12.00 +/- 2.83"));
        assert!(a.contains("1.250"));
        assert!(a.ends_with("# latency: student mean from b.txt\n"));
        let csv = render_plot_csv(&rows);
        assert!(csv.starts_with("arm,run,seed,eer,params\n"));
        assert!(csv.contains("KDFT,kdft,0,0.1,1200\n"));
    }
}
