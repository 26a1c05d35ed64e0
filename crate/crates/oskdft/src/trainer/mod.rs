//! Training driver: mode dispatch, the epoch loop, run-directory artifacts,
//! and crash-safe resume.
//!
//! Every run writes into `workdir/<run_name>/s<seed>/`:
//!
//! - `config.txt` — the fully resolved configuration (re-parseable)
//! - `schedule.csv` — per-epoch learning-rate curves
//! - `metrics.csv` — one row per epoch (losses, accuracy, gradient norms, EER)
//! - `ckpt/epoch_<k>.ckpt` — full training state per epoch
//! - `student.ckpt`, `scores.txt`, `eer.txt` — final artifacts
//! - `timing.txt` — wall-clock summary (the only nondeterministic file)

pub mod adam;
pub mod config;
pub mod pretrain;
pub mod step;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::corpus::{load_corpus, Corpus};
use crate::data::epoch_order;
use crate::data::trials::load_trials;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, render_eer_report, score_trials, write_scores, ScoreSet};
use crate::init::{init_student_from_teacher, init_tuned_teacher_from_teacher};
use crate::model::{build_store, topology, validate_store};
use crate::schedule::ScheduleParams;
use crate::store::{Checkpoint, ParameterStore, Role};
use adam::{Adam, GroupLrs};
use config::{KeepCheckpoints, Mode, RunConfig};
use step::{run_batch, BatchItem, KdKind, StepSpec, TeacherRef};

pub const METRICS_HEADER: &str = "epoch,lr_classifier,lr_backbone,lr_adapter,kd_loss,sv_loss,joint_loss,train_acc,grad_norm_classifier,grad_norm_backbone,grad_norm_adapter,eer";

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(workdir: &Path, run_name: &str, seed: u64) -> Self {
        Self { dir: workdir.join(run_name).join(format!("s{seed}")) }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn schedule(&self) -> PathBuf {
        self.dir.join("schedule.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn ckpt_dir(&self) -> PathBuf {
        self.dir.join("ckpt")
    }
    pub fn epoch_ckpt(&self, epoch: u64) -> PathBuf {
        self.ckpt_dir().join(format!("epoch_{epoch}.ckpt"))
    }
    pub fn student(&self) -> PathBuf {
        self.dir.join("student.ckpt")
    }
    pub fn tuned_teacher(&self) -> PathBuf {
        self.dir.join("tuned_teacher.ckpt")
    }
    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.txt")
    }
    pub fn eer(&self) -> PathBuf {
        self.dir.join("eer.txt")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.txt")
    }
    pub fn pretrain_metrics(&self) -> PathBuf {
        self.dir.join("pretrain_metrics.csv")
    }
}

/// What one invocation of the driver did.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub final_eer: Option<f64>,
    /// Epochs processed by this invocation (not counting resumed ones).
    pub epochs_run: u64,
    pub resumed_from: Option<u64>,
    /// Set when `stop_after` ended the run before the final artifacts.
    pub stopped_after: Option<u64>,
}

/// Resolve a config-file path relative to the working directory.
pub fn resolve_path(workdir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Adopt the training corpus' speaker count when the config left the
/// default in place; reject an explicit mismatch.
pub(crate) fn resolve_speakers(rc: &RunConfig, train: &Corpus) -> Result<RunConfig> {
    let spk = train.speakers().len();
    let mut rc = rc.clone();
    if rc.head.n_speakers != spk {
        if rc.head.n_speakers == 2 {
            rc.head.n_speakers = spk;
        } else {
            return Err(Error::Config(format!(
                "head.n_speakers is {} but the training corpus has {spk} speakers",
                rc.head.n_speakers
            )));
        }
    }
    rc.validate()?;
    Ok(rc)
}

/// The training phases of a mode: inclusive global-epoch ranges plus the
/// step recipe active inside each.
fn phases(rc: &RunConfig) -> Result<Vec<(u64, u64, StepSpec)>> {
    let adapters = rc.adapters_enabled();
    let depth = rc.model.n_layers_student;
    let all = |spec: StepSpec| vec![(1, rc.epochs, spec)];
    let split = |first: StepSpec, second: StepSpec| {
        let kd_e = rc.kd_epochs();
        let mut v = Vec::new();
        if kd_e >= 1 {
            v.push((1, kd_e.min(rc.epochs), first));
        }
        if kd_e < rc.epochs {
            v.push((kd_e + 1, rc.epochs, second));
        }
        v
    };
    Ok(match rc.mode {
        Mode::OsKdft => all(StepSpec {
            kd: KdKind::Mse,
            sv: true,
            dual_path: adapters && rc.split_paths,
            adapters,
            head_only: false,
            n_layers: depth,
        }),
        Mode::KdftSequential => split(
            StepSpec {
                kd: KdKind::Mse,
                sv: false,
                dual_path: false,
                adapters,
                head_only: false,
                n_layers: depth,
            },
            StepSpec {
                kd: KdKind::None,
                sv: true,
                dual_path: false,
                adapters,
                head_only: false,
                n_layers: depth,
            },
        ),
        Mode::KdThenFreeze => split(
            StepSpec {
                kd: KdKind::Mse,
                sv: false,
                dual_path: false,
                adapters,
                head_only: false,
                n_layers: depth,
            },
            StepSpec {
                kd: KdKind::None,
                sv: true,
                dual_path: false,
                adapters,
                head_only: true,
                n_layers: depth,
            },
        ),
        Mode::TunedTeacherKl => all(StepSpec {
            kd: KdKind::Kl,
            sv: false,
            dual_path: false,
            adapters,
            head_only: false,
            n_layers: depth,
        }),
        Mode::FtOnly => all(StepSpec {
            kd: KdKind::None,
            sv: true,
            dual_path: false,
            adapters,
            head_only: false,
            n_layers: depth,
        }),
        Mode::TeacherPretrain => {
            return Err(Error::Config(
                "teacher_pretrain has no speaker-training phases; use the pretraining entry point"
                    .into(),
            ))
        }
    })
}

fn spec_for_epoch(phases: &[(u64, u64, StepSpec)], epoch: u64) -> Result<StepSpec> {
    phases
        .iter()
        .find(|(a, b, _)| (*a..=*b).contains(&epoch))
        .map(|(_, _, s)| *s)
        .ok_or_else(|| Error::Config(format!("no phase covers epoch {epoch}")))
}

/// Load the pretrained teacher, insisting on an exact model match.
fn load_teacher(path: &Path, rc: &RunConfig) -> Result<ParameterStore> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing teacher checkpoint `{}` — run the pretraining step first (it writes teacher.ckpt)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.role != Role::Teacher {
        return Err(Error::Config(format!(
            "`{}` holds a {} checkpoint, expected a teacher",
            path.display(),
            ckpt.role.as_str()
        )));
    }
    if ckpt.model != rc.model {
        return Err(Error::Config(format!(
            "teacher checkpoint `{}` was built for a different model configuration",
            path.display()
        )));
    }
    validate_store(&ckpt.store, &rc.model, None, Role::Teacher)?;
    Ok(ckpt.store)
}

fn initial_student(rc: &RunConfig, teacher: Option<&ParameterStore>, seed: u64) -> Result<ParameterStore> {
    let adapters = rc.adapters_enabled();
    match teacher {
        Some(t) => init_student_from_teacher(t, &rc.model, &rc.head, seed, adapters),
        None => {
            let entries =
                topology(&rc.model, Some(&rc.head), rc.model.n_layers_student, adapters, false);
            let store = build_store(&entries, &rc.model, seed);
            validate_store(&store, &rc.model, Some(&rc.head), Role::Student)?;
            Ok(store)
        }
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean-accumulated batch statistics for one epoch.
#[derive(Debug, Default)]
struct EpochAccum {
    n: u64,
    kd: f64,
    kd_n: u64,
    sv: f64,
    sv_n: u64,
    joint: f64,
    acc: f64,
    acc_n: u64,
    gc: f64,
    gb: f64,
    ga: f64,
}

impl EpochAccum {
    fn add(&mut self, o: &step::StepOutcome) {
        self.n += 1;
        self.joint += o.joint_loss;
        self.gc += o.grad_classifier;
        self.gb += o.grad_backbone;
        self.ga += o.grad_adapter;
        if let Some(k) = o.kd_loss {
            self.kd += k;
            self.kd_n += 1;
        }
        if let Some(s) = o.sv_loss {
            self.sv += s;
            self.sv_n += 1;
        }
        if let Some(a) = o.train_acc {
            self.acc += a;
            self.acc_n += 1;
        }
    }
    fn mean(sum: f64, n: u64) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
    fn row(&self, epoch: u64, lrs: &GroupLrs, eer: Option<f64>) -> String {
        let n = self.n as f64;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            epoch,
            lrs.classifier,
            lrs.backbone,
            lrs.adapter,
            opt_cell(Self::mean(self.kd, self.kd_n)),
            opt_cell(Self::mean(self.sv, self.sv_n)),
            self.joint / n,
            opt_cell(Self::mean(self.acc, self.acc_n)),
            self.gc / n,
            self.gb / n,
            self.ga / n,
            opt_cell(eer),
        )
    }
}

/// Keep only metric rows for epochs `<= last`; called on resume so replayed
/// epochs re-append their rows to a clean tail.
fn truncate_metrics(path: &Path, last: u64) -> Result<()> {
    if !path.exists() {
        return write_file(path, &format!("{METRICS_HEADER}\n"));
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = String::with_capacity(text.len());
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let epoch: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("bad metrics row `{line}`") })?;
        if epoch <= last {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_file(path, &out)
}

/// Highest `epoch_<k>.ckpt` present, if any.
fn latest_checkpoint(paths: &RunPaths) -> Option<u64> {
    let dir = paths.ckpt_dir();
    let mut best = None;
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name();
            let name = name.to_string_lossy();
            if let Some(k) = name
                .strip_prefix("epoch_")
                .and_then(|r| r.strip_suffix(".ckpt"))
                .and_then(|r| r.parse::<u64>().ok())
            {
                best = Some(best.map_or(k, |b: u64| b.max(k)));
            }
        }
    }
    best
}

fn save_train_state(
    paths: &RunPaths,
    rc: &RunConfig,
    store: &ParameterStore,
    adam: &Adam,
    epoch: u64,
) -> Result<()> {
    let mut with_moments = store.clone();
    adam.save_into(&mut with_moments);
    let ckpt = Checkpoint {
        role: Role::TrainState,
        model: rc.model.clone(),
        head: Some(rc.head.clone()),
        meta: vec![
            ("epoch".into(), epoch.to_string()),
            ("step".into(), adam.step_count().to_string()),
            ("source".into(), rc.mode.as_str().into()),
        ],
        store: with_moments,
    };
    let dir = paths.ckpt_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    ckpt.save(&paths.epoch_ckpt(epoch))?;
    if rc.keep_checkpoints == KeepCheckpoints::Last {
        // drop every older state file
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                let name = e.file_name();
                let name = name.to_string_lossy().to_string();
                if let Some(k) = name
                    .strip_prefix("epoch_")
                    .and_then(|r| r.strip_suffix(".ckpt"))
                    .and_then(|r| r.parse::<u64>().ok())
                {
                    if k < epoch {
                        let _ = std::fs::remove_file(e.path());
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fine-tune a copy of the teacher for speaker classification (the first
/// stage of the tuned-teacher KL baseline). Uses the shared classifier LR
/// curve on every parameter group.
fn sv_tune_teacher(
    corpus: &Corpus,
    labels: &BTreeMap<String, usize>,
    rc: &RunConfig,
    seed: u64,
    teacher: &ParameterStore,
) -> Result<ParameterStore> {
    let ft_epochs = rc.teacher_ft_epochs_effective();
    let sched = ScheduleParams { tau_tot: ft_epochs, ..rc.schedule };
    sched.validate()?;
    let mut tuned = init_tuned_teacher_from_teacher(teacher, &rc.model, &rc.head, seed)?;
    let spec = StepSpec {
        kd: KdKind::None,
        sv: true,
        dual_path: false,
        adapters: false,
        head_only: false,
        n_layers: rc.model.n_layers_teacher,
    };
    let mut adam = Adam::new();
    let n = corpus.utterances.len();
    for epoch in 1..=ft_epochs {
        let lrs = GroupLrs::uniform(sched.lr_classifier(epoch)?);
        let order = epoch_order(n, seed, epoch);
        for (start, chunk) in batched(&order, rc.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .enumerate()
                .map(|(j, &utt)| BatchItem { utt, position: (start + j) as u64 })
                .collect();
            let mut grads = crate::store::GradStore::new();
            run_batch(corpus, &items, labels, epoch, &spec, rc, seed, &tuned, None, &mut grads)?;
            adam.step(&mut tuned, &grads, &lrs, &|_| false)?;
        }
    }
    Ok(tuned)
}

/// Chunk an epoch order into batches, remembering each batch's offset.
fn batched(order: &[usize], batch_size: usize) -> Vec<(usize, &[usize])> {
    order
        .chunks(batch_size)
        .scan(0usize, |off, chunk| {
            let start = *off;
            *off += chunk.len();
            Some((start, chunk))
        })
        .collect()
}

/// Run one seed of a training mode end to end (everything except
/// `teacher_pretrain`). With `resume`, picks up from the newest per-epoch
/// checkpoint and reproduces the uninterrupted run byte for byte.
pub fn run_training(
    rc: &RunConfig,
    seed: u64,
    workdir: &Path,
    resume: bool,
) -> Result<RunOutcome> {
    if rc.mode == Mode::TeacherPretrain {
        return run_pretrain(rc, seed, workdir).map(|paths| RunOutcome {
            run_dir: paths.dir,
            final_eer: None,
            epochs_run: rc.epochs,
            resumed_from: None,
            stopped_after: None,
        });
    }
    let started = Instant::now();
    let train_corpus = load_corpus(&resolve_path(workdir, &rc.train_manifest))?;
    let rc = resolve_speakers(rc, &train_corpus)?;
    let eval_corpus = load_corpus(&resolve_path(workdir, &rc.eval_manifest))?;
    let trials = load_trials(&resolve_path(workdir, &rc.trials_path))?;
    trials.validate_against(&eval_corpus)?;
    let labels = train_corpus.speaker_labels();

    let paths = RunPaths::new(workdir, rc.name(), seed);
    std::fs::create_dir_all(&paths.dir)
        .map_err(|e| Error::io(paths.dir.display().to_string(), e))?;
    write_file(&paths.config(), &rc.render())?;
    write_file(&paths.schedule(), &rc.schedule.to_csv()?)?;

    let teacher = if rc.mode.needs_teacher() {
        Some(load_teacher(&resolve_path(workdir, &rc.teacher_ckpt), &rc)?)
    } else {
        None
    };

    // Tuned-teacher stage of the KL baseline: load if present, else train
    // and save so a resumed run skips the stage.
    let tuned = if rc.mode == Mode::TunedTeacherKl {
        let own = paths.tuned_teacher();
        let source = match &rc.tuned_teacher_ckpt {
            Some(p) => Some(resolve_path(workdir, p)),
            None if resume && own.exists() => Some(own.clone()),
            None => None,
        };
        let store = match source {
            Some(p) => {
                let ckpt = Checkpoint::load(&p)?;
                if ckpt.role != Role::TunedTeacher {
                    return Err(Error::Config(format!(
                        "`{}` holds a {} checkpoint, expected a tuned teacher",
                        p.display(),
                        ckpt.role.as_str()
                    )));
                }
                if ckpt.model != rc.model {
                    return Err(Error::Config(format!(
                        "tuned teacher `{}` was built for a different model configuration",
                        p.display()
                    )));
                }
                validate_store(&ckpt.store, &rc.model, Some(&rc.head), Role::TunedTeacher)?;
                ckpt.store
            }
            None => {
                let t = teacher.as_ref().expect("kl mode loads the teacher");
                let tuned = sv_tune_teacher(&train_corpus, &labels, &rc, seed, t)?;
                let ckpt = Checkpoint {
                    role: Role::TunedTeacher,
                    model: rc.model.clone(),
                    head: Some(rc.head.clone()),
                    meta: vec![
                        ("epoch".into(), rc.teacher_ft_epochs_effective().to_string()),
                        ("source".into(), rc.mode.as_str().into()),
                    ],
                    store: tuned,
                };
                ckpt.save(&own)?;
                ckpt.store
            }
        };
        Some(store)
    } else {
        None
    };

    let phase_list = phases(&rc)?;

    // Resume or fresh initialization.
    let mut resumed_from = None;
    let (mut student, mut adam, start_epoch) = if resume {
        match latest_checkpoint(&paths) {
            Some(k) => {
                let ckpt = Checkpoint::load(&paths.epoch_ckpt(k))?;
                if ckpt.role != Role::TrainState {
                    return Err(Error::Config(format!(
                        "`{}` is not a training-state checkpoint",
                        paths.epoch_ckpt(k).display()
                    )));
                }
                let step = ckpt.meta_u64("step").ok_or_else(|| {
                    Error::Store("training-state checkpoint lacks a step counter".into())
                })?;
                let mut store = ckpt.store;
                let adam = Adam::take_from(&mut store, step);
                truncate_metrics(&paths.metrics(), k)?;
                resumed_from = Some(k);
                (store, adam, k + 1)
            }
            None => {
                let s = initial_student(&rc, teacher.as_ref(), seed)?;
                truncate_metrics(&paths.metrics(), 0)?;
                (s, Adam::new(), 1)
            }
        }
    } else {
        let s = initial_student(&rc, teacher.as_ref(), seed)?;
        write_file(&paths.metrics(), &format!("{METRICS_HEADER}\n"))?;
        (s, Adam::new(), 1)
    };

    let teacher_hash_before = teacher.as_ref().map(|t| t.content_hash());
    let n_train = train_corpus.utterances.len();
    let mut epochs_run = 0u64;
    let mut final_scores: Option<ScoreSet> = None;

    for epoch in start_epoch..=rc.epochs {
        let spec = spec_for_epoch(&phase_list, epoch)?;
        let lrs = if rc.per_module_lr {
            GroupLrs {
                classifier: rc.schedule.lr_classifier(epoch)?,
                backbone: rc.schedule.lr_backbone(epoch)?,
                adapter: rc.schedule.lr_adapter(epoch)?,
            }
        } else {
            GroupLrs::uniform(rc.schedule.lr_classifier(epoch)?)
        };
        let frozen: Box<dyn Fn(&str) -> bool> = if spec.head_only {
            Box::new(|n: &str| !n.starts_with("head."))
        } else {
            Box::new(|_: &str| false)
        };

        let order = epoch_order(n_train, seed, epoch);
        let mut accum = EpochAccum::default();
        let teacher_ref = match spec.kd {
            KdKind::Mse => teacher.as_ref().map(TeacherRef::Features),
            KdKind::Kl => tuned.as_ref().map(TeacherRef::Logits),
            KdKind::None => None,
        };
        for (start, chunk) in batched(&order, rc.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .enumerate()
                .map(|(j, &utt)| BatchItem { utt, position: (start + j) as u64 })
                .collect();
            let mut grads = crate::store::GradStore::new();
            let out = run_batch(
                &train_corpus,
                &items,
                &labels,
                epoch,
                &spec,
                &rc,
                seed,
                &student,
                teacher_ref.as_ref(),
                &mut grads,
            )?;
            adam.step(&mut student, &grads, &lrs, frozen.as_ref())?;
            accum.add(&out);
        }

        // EER on the held-out trials at the configured cadence and at the end.
        let eval_now = epoch == rc.epochs
            || (rc.eval_interval > 0 && epoch % rc.eval_interval == 0);
        let eer = if eval_now {
            let set = score_trials(&eval_corpus, &trials, &student, &rc.model, &rc.head)?;
            let e = compute_eer(&set)?;
            if epoch == rc.epochs {
                final_scores = Some(set);
            }
            Some(e)
        } else {
            None
        };

        // Row first, then the state checkpoint: a crash between the two
        // replays the epoch, never leaves a checkpointed epoch rowless.
        append_line(&paths.metrics(), &accum.row(epoch, &lrs, eer))?;
        save_train_state(&paths, &rc, &student, &adam, epoch)?;
        epochs_run += 1;

        if rc.stop_after == epoch {
            write_file(
                &paths.timing(),
                &format!(
                    "wall_seconds {:.3}\nepochs_processed {}\nstopped_after {}\n",
                    started.elapsed().as_secs_f64(),
                    epochs_run,
                    epoch
                ),
            )?;
            return Ok(RunOutcome {
                run_dir: paths.dir,
                final_eer: None,
                epochs_run,
                resumed_from,
                stopped_after: Some(epoch),
            });
        }
    }

    if let (Some(before), Some(t)) = (teacher_hash_before, teacher.as_ref()) {
        // the teacher is shared, frozen state; any movement is a bug
        debug_assert_eq!(before, t.content_hash(), "teacher parameters changed during training");
    }

    // Final artifacts. A resume that lands past the last epoch recomputes
    // the evaluation from the restored parameters.
    let scores = match final_scores {
        Some(s) => s,
        None => score_trials(&eval_corpus, &trials, &student, &rc.model, &rc.head)?,
    };
    let eer = compute_eer(&scores)?;
    write_scores(&trials, &scores, &paths.scores())?;
    write_file(&paths.eer(), &render_eer_report(eer, &scores))?;

    Checkpoint {
        role: Role::Student,
        model: rc.model.clone(),
        head: Some(rc.head.clone()),
        meta: vec![
            ("epoch".into(), rc.epochs.to_string()),
            ("source".into(), rc.mode.as_str().into()),
        ],
        store: student,
    }
    .save(&paths.student())?;

    write_file(
        &paths.timing(),
        &format!(
            "wall_seconds {:.3}\nepochs_processed {}\n",
            started.elapsed().as_secs_f64(),
            epochs_run
        ),
    )?;

    Ok(RunOutcome {
        run_dir: paths.dir,
        final_eer: Some(eer),
        epochs_run,
        resumed_from,
        stopped_after: None,
    })
}

/// Run every configured seed in order; returns one outcome per seed.
pub fn run_all_seeds(rc: &RunConfig, workdir: &Path, resume: bool) -> Result<Vec<RunOutcome>> {
    rc.seeds.iter().map(|&s| run_training(rc, s, workdir, resume)).collect()
}

/// Pretrain the teacher and write it to the configured checkpoint path
/// (default `teacher.ckpt` under the working directory).
pub fn run_pretrain(rc: &RunConfig, seed: u64, workdir: &Path) -> Result<RunPaths> {
    let started = Instant::now();
    let corpus = load_corpus(&resolve_path(workdir, &rc.train_manifest))?;
    let paths = RunPaths::new(workdir, rc.name(), seed);
    std::fs::create_dir_all(&paths.dir)
        .map_err(|e| Error::io(paths.dir.display().to_string(), e))?;
    write_file(&paths.config(), &rc.render())?;

    let out = pretrain::pretrain_teacher(&corpus, rc, seed)?;
    write_file(
        &paths.pretrain_metrics(),
        &pretrain::pretrain_rows_csv(out.initial_holdout, &out.rows),
    )?;

    let target = resolve_path(workdir, &rc.teacher_ckpt);
    Checkpoint {
        role: Role::Teacher,
        model: rc.model.clone(),
        head: None,
        meta: vec![
            ("epoch".into(), out.rows.len().to_string()),
            ("source".into(), Mode::TeacherPretrain.as_str().into()),
        ],
        store: out.store,
    }
    .save(&target)?;

    write_file(
        &paths.timing(),
        &format!(
            "wall_seconds {:.3}\nepochs_processed {}\n",
            started.elapsed().as_secs_f64(),
            out.rows.len()
        ),
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{export_corpus, synth_corpus, SynthSpec};
    use crate::data::trials::{gen_trials, save_trials};

    fn tiny_model() -> crate::config::ModelConfig {
        crate::config::ModelConfig {
            d_model: 8,
            n_layers_teacher: 2,
            n_layers_student: 1,
            n_heads: 2,
            ffn_mult: 2,
            adapter_rank: 2,
            cnn_strides: vec![4, 4],
            sample_dim: 1,
            adapter_random_up: false,
        }
    }

    /// Synthesize corpora + trials into a temp workdir and return a ready
    /// RunConfig for the given mode.
    fn workbench(dir: &Path, mode: Mode) -> RunConfig {
        let train = synth_corpus(
            &SynthSpec { n_speakers: 4, utts_per_speaker: 3, seconds: 0.3, sample_rate: 2000 },
            101,
        )
        .unwrap();
        let eval = synth_corpus(
            &SynthSpec { n_speakers: 3, utts_per_speaker: 2, seconds: 0.3, sample_rate: 2000 },
            202,
        )
        .unwrap();
        export_corpus(&train, &dir.join("data/train")).unwrap();
        export_corpus(&eval, &dir.join("data/eval")).unwrap();
        let trials = gen_trials(&eval, 6, 6, 303).unwrap();
        save_trials(&trials, &dir.join("data/trials.txt")).unwrap();

        let mut rc = RunConfig { mode, model: tiny_model(), ..Default::default() };
        rc.head.embed_dim = 6;
        rc.epochs = 4;
        rc.schedule.tau_tot = 4;
        rc.schedule.warmup = 1;
        rc.crop_seconds = 0.1;
        rc.batch_size = 6;
        rc.seeds = vec![0];
        rc
    }

    fn pretrain_teacher_into(dir: &Path, rc: &RunConfig) {
        let mut prc = rc.clone();
        prc.mode = Mode::TeacherPretrain;
        prc.run_name = String::new();
        prc.epochs = 1;
        prc.schedule.tau_tot = 1;
        prc.schedule.warmup = 1;
        run_pretrain(&prc, 0, dir).unwrap();
    }

    #[test]
    fn os_kdft_run_produces_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let rc = workbench(tmp.path(), Mode::OsKdft);
        pretrain_teacher_into(tmp.path(), &rc);
        let out = run_training(&rc, 0, tmp.path(), false).unwrap();
        assert!(out.final_eer.is_some());
        let paths = RunPaths::new(tmp.path(), "os_kdft", 0);
        for p in [
            paths.config(),
            paths.schedule(),
            paths.metrics(),
            paths.student(),
            paths.scores(),
            paths.eer(),
            paths.timing(),
            paths.epoch_ckpt(4),
        ] {
            assert!(p.exists(), "{} missing", p.display());
        }
        // keep_checkpoints = last pruned earlier epochs
        assert!(!paths.epoch_ckpt(3).exists());
        // metrics: header + one row per epoch, eer only on the last
        let metrics = std::fs::read_to_string(paths.metrics()).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[0], METRICS_HEADER);
        let last: Vec<&str> = lines[4].split(',').collect();
        assert_eq!(last.len(), 12);
        assert!(!last[11].is_empty(), "final row has an EER");
        assert!(lines[1].ends_with(','), "non-eval rows leave the EER blank");
        // config round-trips
        let cfg_text = std::fs::read_to_string(paths.config()).unwrap();
        let parsed = RunConfig::parse(&cfg_text).unwrap();
        assert_eq!(parsed.head.n_speakers, 4);
        // student checkpoint loads and has adapters
        let student = Checkpoint::load(&paths.student()).unwrap();
        assert_eq!(student.role, Role::Student);
        assert!(crate::head::store_has_adapters(&student.store));
    }

    #[test]
    fn sequential_phases_switch_losses() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rc = workbench(tmp.path(), Mode::KdftSequential);
        rc.kd_ft_ratio = (50, 50);
        pretrain_teacher_into(tmp.path(), &rc);
        run_training(&rc, 0, tmp.path(), false).unwrap();
        let paths = RunPaths::new(tmp.path(), "kdft_sequential", 0);
        let metrics = std::fs::read_to_string(paths.metrics()).unwrap();
        let rows: Vec<Vec<&str>> =
            metrics.lines().skip(1).map(|l| l.split(',').collect()).collect();
        // epochs 1-2: KD only — sv/acc blank, classifier grads exactly zero
        for r in &rows[..2] {
            assert!(!r[4].is_empty() && r[5].is_empty() && r[7].is_empty(), "{r:?}");
            assert_eq!(r[8], "0", "classifier untouched in the KD phase: {r:?}");
        }
        // epochs 3-4: SV only — kd blank, sv/acc present
        for r in &rows[2..] {
            assert!(r[4].is_empty() && !r[5].is_empty() && !r[7].is_empty(), "{r:?}");
        }
        // student has no adapters in this arm
        let student = Checkpoint::load(&paths.student()).unwrap();
        assert!(!crate::head::store_has_adapters(&student.store));
    }

    #[test]
    fn kd_then_freeze_keeps_backbone_fixed_in_phase_two() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rc = workbench(tmp.path(), Mode::KdThenFreeze);
        rc.keep_checkpoints = KeepCheckpoints::All;
        pretrain_teacher_into(tmp.path(), &rc);
        run_training(&rc, 0, tmp.path(), false).unwrap();
        let paths = RunPaths::new(tmp.path(), "kd_then_freeze", 0);
        // phase boundary at epoch 2: backbone identical from epoch 2 to 4
        let at = |k: u64| {
            let mut c = Checkpoint::load(&paths.epoch_ckpt(k)).unwrap().store;
            let names: Vec<String> =
                c.names().filter(|n| !n.starts_with("encoder.") && !n.starts_with("cnn.")).cloned().collect();
            for n in names {
                c.remove(&n);
            }
            c.content_hash()
        };
        assert_eq!(at(2), at(3));
        assert_eq!(at(2), at(4));
        assert_ne!(at(1), at(2), "KD phase must move the backbone");
    }

    #[test]
    fn ft_only_needs_no_teacher_and_kl_mode_writes_tuned_teacher() {
        let tmp = tempfile::tempdir().unwrap();
        let rc = workbench(tmp.path(), Mode::FtOnly);
        // no teacher.ckpt anywhere — ft_only must not ask for it
        let out = run_training(&rc, 0, tmp.path(), false).unwrap();
        assert!(out.final_eer.is_some());

        let mut krc = workbench(tmp.path(), Mode::TunedTeacherKl);
        krc.teacher_ft_epochs = 3;
        pretrain_teacher_into(tmp.path(), &krc);
        run_training(&krc, 0, tmp.path(), false).unwrap();
        let paths = RunPaths::new(tmp.path(), "tuned_teacher_kl", 0);
        let tt = Checkpoint::load(&paths.tuned_teacher()).unwrap();
        assert_eq!(tt.role, Role::TunedTeacher);
        assert_eq!(tt.meta_u64("epoch"), Some(3));
        // KL rows carry kd loss and accuracy but no sv loss
        let metrics = std::fs::read_to_string(paths.metrics()).unwrap();
        let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
        assert!(!row[4].is_empty() && row[5].is_empty() && !row[7].is_empty());
    }

    #[test]
    fn missing_teacher_checkpoint_is_a_named_error() {
        let tmp = tempfile::tempdir().unwrap();
        let rc = workbench(tmp.path(), Mode::OsKdft);
        let err = run_training(&rc, 0, tmp.path(), false).unwrap_err();
        assert!(err.to_string().contains("teacher.ckpt"), "{err}");
    }

    #[test]
    fn kill_and_resume_reproduces_metrics_byte_for_byte() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rc = workbench(tmp.path(), Mode::OsKdft);
        rc.eval_interval = 2;
        pretrain_teacher_into(tmp.path(), &rc);

        // straight run
        rc.run_name = "straight".into();
        run_training(&rc, 0, tmp.path(), false).unwrap();
        // killed at epoch 2, then resumed
        rc.run_name = "killed".into();
        rc.stop_after = 2;
        let first = run_training(&rc, 0, tmp.path(), false).unwrap();
        assert_eq!(first.stopped_after, Some(2));
        rc.stop_after = 0;
        let second = run_training(&rc, 0, tmp.path(), true).unwrap();
        assert_eq!(second.resumed_from, Some(2));

        let read = |name: &str, file: &str| {
            std::fs::read(RunPaths::new(tmp.path(), name, 0).dir.join(file)).unwrap()
        };
        for file in ["metrics.csv", "eer.txt", "scores.txt", "student.ckpt"] {
            assert_eq!(read("straight", file), read("killed", file), "{file} differs");
        }
    }

    #[test]
    fn rerun_is_fully_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rc = workbench(tmp.path(), Mode::OsKdft);
        pretrain_teacher_into(tmp.path(), &rc);
        rc.run_name = "a".into();
        run_training(&rc, 0, tmp.path(), false).unwrap();
        rc.run_name = "b".into();
        run_training(&rc, 0, tmp.path(), false).unwrap();
        let read = |name: &str, file: &str| {
            std::fs::read(RunPaths::new(tmp.path(), name, 0).dir.join(file)).unwrap()
        };
        for file in ["metrics.csv", "eer.txt", "scores.txt", "student.ckpt", "schedule.csv"] {
            assert_eq!(read("a", file), read("b", file), "{file} differs");
        }
    }
}
