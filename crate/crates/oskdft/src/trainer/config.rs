//! Run configuration: one flat `key = value` file describes a complete
//! training run. Unknown keys are rejected; the resolved config written into
//! the run directory parses back to the identical configuration.

use crate::config::{ModelConfig, SpeakerHeadConfig};
use crate::data::augment::{NoiseParams, SpecAugParams};
use crate::distill::LossWeights;
use crate::error::{Error, Result};
use crate::kv::{self, Kv};
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    OsKdft,
    KdftSequential,
    KdThenFreeze,
    TunedTeacherKl,
    FtOnly,
    TeacherPretrain,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OsKdft => "os_kdft",
            Mode::KdftSequential => "kdft_sequential",
            Mode::KdThenFreeze => "kd_then_freeze",
            Mode::TunedTeacherKl => "tuned_teacher_kl",
            Mode::FtOnly => "ft_only",
            Mode::TeacherPretrain => "teacher_pretrain",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "os_kdft" => Mode::OsKdft,
            "kdft_sequential" => Mode::KdftSequential,
            "kd_then_freeze" => Mode::KdThenFreeze,
            "tuned_teacher_kl" => Mode::TunedTeacherKl,
            "ft_only" => Mode::FtOnly,
            "teacher_pretrain" => Mode::TeacherPretrain,
            other => {
                return Err(Error::Config(format!(
                    "unknown mode `{other}` (expected os_kdft, kdft_sequential, kd_then_freeze, tuned_teacher_kl, ft_only, teacher_pretrain)"
                )))
            }
        })
    }

    /// Modes that distill from the frozen pretrained teacher.
    pub fn needs_teacher(&self) -> bool {
        matches!(
            self,
            Mode::OsKdft | Mode::KdftSequential | Mode::KdThenFreeze | Mode::TunedTeacherKl
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepCheckpoints {
    Last,
    All,
}

impl KeepCheckpoints {
    fn as_str(&self) -> &'static str {
        match self {
            KeepCheckpoints::Last => "last",
            KeepCheckpoints::All => "all",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "keep_checkpoints must be `last` or `all`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub run_name: String,
    pub epochs: u64,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub schedule: ScheduleParams,
    pub loss: LossWeights,
    /// Percent split of the epoch budget between the KD and FT phases of the
    /// sequential modes (e.g. 50:50, 75:25). Must sum to 100.
    pub kd_ft_ratio: (u32, u32),
    pub model: ModelConfig,
    pub head: SpeakerHeadConfig,
    pub train_manifest: String,
    pub eval_manifest: String,
    pub trials_path: String,
    /// Evaluate EER every this many epochs (0 = final epoch only).
    pub eval_interval: u64,
    pub spec_augment: bool,
    pub augment: SpecAugParams,
    /// Apply the same stripe masks to the KD-path outputs (student and
    /// teacher) as well; default masks only the SV path.
    pub augment_extend_kd: bool,
    pub noise_enabled: bool,
    pub noise: NoiseParams,
    pub teacher_ckpt: String,
    pub tuned_teacher_ckpt: Option<String>,
    /// SV-tuning epochs for the teacher in tuned_teacher_kl (0 = same as
    /// student budget).
    pub teacher_ft_epochs: u64,
    /// Give the student bottleneck adapters (default: only os_kdft).
    pub use_adapters: Option<bool>,
    /// Route the KD loss through the non-adapter path (os_kdft ablation).
    pub split_paths: bool,
    /// Use the three per-module curves; false = shared classifier curve.
    pub per_module_lr: bool,
    /// Stop (simulating a crash) right after this epoch's artifacts (0 = off).
    pub stop_after: u64,
    pub keep_checkpoints: KeepCheckpoints,
    pub pretrain_mask_span: usize,
    pub pretrain_mask_frac: f64,
    /// Early-stop the teacher pretrain after this many epochs without
    /// held-out improvement (0 = run the full budget).
    pub pretrain_patience: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let epochs = 40;
        RunConfig {
            mode: Mode::OsKdft,
            run_name: String::new(),
            epochs,
            seeds: vec![0],
            batch_size: 16,
            crop_seconds: 2.0,
            schedule: ScheduleParams { tau_tot: epochs, ..Default::default() },
            loss: LossWeights::default(),
            kd_ft_ratio: (50, 50),
            model: ModelConfig::default(),
            head: SpeakerHeadConfig::default(),
            train_manifest: "data/train/manifest.txt".into(),
            eval_manifest: "data/eval/manifest.txt".into(),
            trials_path: "data/trials.txt".into(),
            eval_interval: 0,
            spec_augment: false,
            augment: SpecAugParams { time_masks: 1, time_width: 4, chan_masks: 1, chan_width: 2 },
            augment_extend_kd: false,
            noise_enabled: false,
            noise: NoiseParams::default(),
            teacher_ckpt: "teacher.ckpt".into(),
            tuned_teacher_ckpt: None,
            teacher_ft_epochs: 0,
            use_adapters: None,
            split_paths: true,
            per_module_lr: true,
            stop_after: 0,
            keep_checkpoints: KeepCheckpoints::Last,
            pretrain_mask_span: 2,
            pretrain_mask_frac: 0.3,
            pretrain_patience: 0,
        }
    }
}

impl RunConfig {
    /// Effective run name (defaults to the mode name).
    pub fn name(&self) -> &str {
        if self.run_name.is_empty() {
            self.mode.as_str()
        } else {
            &self.run_name
        }
    }

    pub fn adapters_enabled(&self) -> bool {
        self.use_adapters.unwrap_or(self.mode == Mode::OsKdft)
    }

    /// Epochs in the KD phase of the sequential modes.
    pub fn kd_epochs(&self) -> u64 {
        ((self.epochs as f64) * self.kd_ft_ratio.0 as f64 / 100.0).round() as u64
    }

    pub fn teacher_ft_epochs_effective(&self) -> u64 {
        if self.teacher_ft_epochs == 0 {
            self.epochs
        } else {
            self.teacher_ft_epochs
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.mode != Mode::TeacherPretrain {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(Error::Config("duplicate seeds".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config(format!(
                "crop_seconds must be positive, got {}",
                self.crop_seconds
            )));
        }
        if self.kd_ft_ratio.0 + self.kd_ft_ratio.1 != 100 {
            return Err(Error::Config(format!(
                "kd_ft_ratio must sum to 100, got {}:{}",
                self.kd_ft_ratio.0, self.kd_ft_ratio.1
            )));
        }
        if self.epochs > 0 {
            if self.schedule.tau_tot != self.epochs {
                return Err(Error::Config(format!(
                    "schedule covers {} epochs but run has {}",
                    self.schedule.tau_tot, self.epochs
                )));
            }
            self.schedule.validate()?;
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.head.validate()?;
        if !(0.0..=1.0).contains(&self.pretrain_mask_frac) {
            return Err(Error::Config(format!(
                "pretrain_mask_frac must be in [0, 1], got {}",
                self.pretrain_mask_frac
            )));
        }
        if self.mode == Mode::TeacherPretrain && self.pretrain_mask_span == 0 {
            return Err(Error::Config("pretrain_mask_span must be >= 1".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let kv = Kv::parse(text)?;
        let d = RunConfig::default();
        let mode = Mode::parse(&kv.get_str("mode")?)?;
        let epochs: u64 = kv.get_or("epochs", d.epochs, "u64")?;
        let schedule = ScheduleParams {
            eta_min: kv.get_or("eta_min", d.schedule.eta_min, "f64")?,
            eta_max: kv.get_or("eta_max", d.schedule.eta_max, "f64")?,
            tau_tot: epochs,
            beta: kv.get_or("beta", d.schedule.beta, "f64")?,
            theta: kv.get_or("theta", d.schedule.theta, "f64")?,
            warmup: kv.get_or("warmup", d.schedule.warmup, "u64")?,
        };
        let loss = LossWeights {
            kd_scale: kv.get_or("kd_scale", d.loss.kd_scale, "f64")?,
            sv_scale: kv.get_or("sv_scale", d.loss.sv_scale, "f64")?,
        };
        let kd_ft_ratio = match kv.opt_str("kd_ft_ratio") {
            Some(s) => {
                let (a, b) = s.split_once(':').ok_or_else(|| {
                    Error::Config(format!("kd_ft_ratio must look like `50:50`, got `{s}`"))
                })?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Config(format!("bad kd_ft_ratio part `{x}`")))
                };
                (parse(a)?, parse(b)?)
            }
            None => d.kd_ft_ratio,
        };
        let seeds = match kv.opt_str("seeds") {
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad seed `{x}`")))
                })
                .collect::<Result<Vec<u64>>>()?,
            None => d.seeds.clone(),
        };
        let augment = SpecAugParams {
            time_masks: kv.get_or("augment.time_masks", d.augment.time_masks, "usize")?,
            time_width: kv.get_or("augment.time_width", d.augment.time_width, "usize")?,
            chan_masks: kv.get_or("augment.chan_masks", d.augment.chan_masks, "usize")?,
            chan_width: kv.get_or("augment.chan_width", d.augment.chan_width, "usize")?,
        };
        let noise = NoiseParams {
            snr_db: (
                kv.get_or("noise.snr_lo", d.noise.snr_db.0, "f64")?,
                kv.get_or("noise.snr_hi", d.noise.snr_db.1, "f64")?,
            ),
            gain: (
                kv.get_or("noise.gain_lo", d.noise.gain.0, "f64")?,
                kv.get_or("noise.gain_hi", d.noise.gain.1, "f64")?,
            ),
        };
        let cfg = RunConfig {
            mode,
            run_name: kv.opt_str("run_name").unwrap_or_default(),
            epochs,
            seeds,
            batch_size: kv.get_or("batch_size", d.batch_size, "usize")?,
            crop_seconds: kv.get_or("crop_seconds", d.crop_seconds, "f64")?,
            schedule,
            loss,
            kd_ft_ratio,
            model: ModelConfig::from_kv(&kv, "model.")?,
            head: SpeakerHeadConfig::from_kv(&kv, "head.")?,
            train_manifest: kv.opt_str("train_manifest").unwrap_or(d.train_manifest),
            eval_manifest: kv.opt_str("eval_manifest").unwrap_or(d.eval_manifest),
            trials_path: kv.opt_str("trials_path").unwrap_or(d.trials_path),
            eval_interval: kv.get_or("eval_interval", d.eval_interval, "u64")?,
            spec_augment: kv.get_bool_or("augment.spec", d.spec_augment)?,
            augment,
            augment_extend_kd: kv.get_bool_or("augment.extend_kd", d.augment_extend_kd)?,
            noise_enabled: kv.get_bool_or("noise.enabled", d.noise_enabled)?,
            noise,
            teacher_ckpt: kv.opt_str("teacher_ckpt").unwrap_or(d.teacher_ckpt),
            tuned_teacher_ckpt: kv.opt_str("tuned_teacher_ckpt"),
            teacher_ft_epochs: kv.get_or("teacher_ft_epochs", d.teacher_ft_epochs, "u64")?,
            use_adapters: match kv.opt_str("use_adapters") {
                Some(v) => Some(match v.as_str() {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "use_adapters: `{other}` is not a valid bool"
                        )))
                    }
                }),
                None => None,
            },
            split_paths: kv.get_bool_or("split_paths", d.split_paths)?,
            per_module_lr: kv.get_bool_or("per_module_lr", d.per_module_lr)?,
            stop_after: kv.get_or("stop_after", d.stop_after, "u64")?,
            keep_checkpoints: match kv.opt_str("keep_checkpoints") {
                Some(s) => KeepCheckpoints::parse(&s)?,
                None => d.keep_checkpoints,
            },
            pretrain_mask_span: kv.get_or("pretrain.mask_span", d.pretrain_mask_span, "usize")?,
            pretrain_mask_frac: kv.get_or("pretrain.mask_frac", d.pretrain_mask_frac, "f64")?,
            pretrain_patience: kv.get_or("pretrain.patience", d.pretrain_patience, "u64")?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render the complete resolved configuration; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.as_str().into()),
            ("run_name".into(), self.name().into()),
            ("epochs".into(), self.epochs.to_string()),
            (
                "seeds".into(),
                self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("batch_size".into(), self.batch_size.to_string()),
            ("crop_seconds".into(), self.crop_seconds.to_string()),
            ("eta_min".into(), self.schedule.eta_min.to_string()),
            ("eta_max".into(), self.schedule.eta_max.to_string()),
            ("beta".into(), self.schedule.beta.to_string()),
            ("theta".into(), self.schedule.theta.to_string()),
            ("warmup".into(), self.schedule.warmup.to_string()),
            ("kd_scale".into(), self.loss.kd_scale.to_string()),
            ("sv_scale".into(), self.loss.sv_scale.to_string()),
            (
                "kd_ft_ratio".into(),
                format!("{}:{}", self.kd_ft_ratio.0, self.kd_ft_ratio.1),
            ),
        ];
        pairs.extend(self.model.to_pairs("model."));
        pairs.extend(self.head.to_pairs("head."));
        pairs.extend([
            ("train_manifest".into(), self.train_manifest.clone()),
            ("eval_manifest".into(), self.eval_manifest.clone()),
            ("trials_path".into(), self.trials_path.clone()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("augment.spec".into(), self.spec_augment.to_string()),
            ("augment.time_masks".into(), self.augment.time_masks.to_string()),
            ("augment.time_width".into(), self.augment.time_width.to_string()),
            ("augment.chan_masks".into(), self.augment.chan_masks.to_string()),
            ("augment.chan_width".into(), self.augment.chan_width.to_string()),
            ("augment.extend_kd".into(), self.augment_extend_kd.to_string()),
            ("noise.enabled".into(), self.noise_enabled.to_string()),
            ("noise.snr_lo".into(), self.noise.snr_db.0.to_string()),
            ("noise.snr_hi".into(), self.noise.snr_db.1.to_string()),
            ("noise.gain_lo".into(), self.noise.gain.0.to_string()),
            ("noise.gain_hi".into(), self.noise.gain.1.to_string()),
            ("teacher_ckpt".into(), self.teacher_ckpt.clone()),
        ]);
        if let Some(t) = &self.tuned_teacher_ckpt {
            pairs.push(("tuned_teacher_ckpt".into(), t.clone()));
        }
        pairs.extend([
            ("teacher_ft_epochs".into(), self.teacher_ft_epochs.to_string()),
            ("use_adapters".into(), self.adapters_enabled().to_string()),
            ("split_paths".into(), self.split_paths.to_string()),
            ("per_module_lr".into(), self.per_module_lr.to_string()),
            ("stop_after".into(), self.stop_after.to_string()),
            ("keep_checkpoints".into(), self.keep_checkpoints.as_str().into()),
            ("pretrain.mask_span".into(), self.pretrain_mask_span.to_string()),
            ("pretrain.mask_frac".into(), self.pretrain_mask_frac.to_string()),
            ("pretrain.patience".into(), self.pretrain_patience.to_string()),
        ]);
        kv::render(&pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse("mode = os_kdft\n").unwrap();
        assert_eq!(cfg.mode, Mode::OsKdft);
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.schedule.tau_tot, 40);
        assert!(cfg.adapters_enabled());
        assert_eq!(cfg.name(), "os_kdft");
        let seq = RunConfig::parse("mode = kdft_sequential\n").unwrap();
        assert!(!seq.adapters_enabled());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("mode = os_kdft\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::parse(
            "mode = kdft_sequential\nepochs = 20\nwarmup = 8\nseeds = 1,2,3\nkd_ft_ratio = 75:25\naugment.spec = true\nnoise.enabled = true\nhead.n_speakers = 12\n",
        )
        .unwrap();
        cfg.tuned_teacher_ckpt = Some("tt.ckpt".into());
        let text = cfg.render();
        let back = RunConfig::parse(&text).unwrap();
        // render resolves run_name and use_adapters; re-rendering is a fixed point
        assert_eq!(back.render(), text);
        let mut canonical = cfg.clone();
        canonical.run_name = cfg.name().to_string();
        canonical.use_adapters = Some(cfg.adapters_enabled());
        assert_eq!(back, canonical);
    }

    #[test]
    fn ratio_must_sum_to_100() {
        let err = RunConfig::parse("mode = kdft_sequential\nkd_ft_ratio = 60:60\n").unwrap_err();
        assert!(err.to_string().contains("sum to 100"), "{err}");
        let cfg = RunConfig::parse("mode = kdft_sequential\nkd_ft_ratio = 100:0\nepochs = 10\nwarmup = 4\n").unwrap();
        assert_eq!(cfg.kd_epochs(), 10);
        let cfg = RunConfig::parse("mode = kdft_sequential\nkd_ft_ratio = 75:25\nepochs = 10\nwarmup = 4\n").unwrap();
        assert_eq!(cfg.kd_epochs(), 8);
    }

    #[test]
    fn schedule_inherits_epoch_budget() {
        let err = RunConfig::parse("mode = os_kdft\nepochs = 12\n").unwrap_err();
        // warmup 10 of 12 violates the monotone-ramp rule, proving tau_tot
        // followed epochs
        assert!(err.to_string().contains("warmup"), "{err}");
        let ok = RunConfig::parse("mode = os_kdft\nepochs = 25\n").unwrap();
        assert_eq!(ok.schedule.tau_tot, 25);
    }

    #[test]
    fn bad_mode_and_bad_ratio_and_bad_seeds() {
        assert!(RunConfig::parse("mode = warp_drive\n").is_err());
        assert!(RunConfig::parse("mode = os_kdft\nkd_ft_ratio = fifty:fifty\n").is_err());
        assert!(RunConfig::parse("mode = os_kdft\nseeds = 1,1\n").is_err());
        assert!(RunConfig::parse("mode = os_kdft\nseeds = x\n").is_err());
    }
}
