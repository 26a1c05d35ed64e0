//! Per-module learning-rate schedules: a cosine-annealed base curve for the
//! classifier, a linear-warmup/exponential-decay curve for the backbone, and
//! a scaled copy of the base curve for the adapters.

use crate::error::{Error, Result};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub eta_min: f64,
    pub eta_max: f64,
    /// Total number of scheduled epochs (τ ranges over 0..=tau_tot).
    pub tau_tot: u64,
    /// Backbone decay factor after warmup.
    pub beta: f64,
    /// Adapter multiplier on the base curve.
    pub theta: f64,
    /// Backbone warmup length in epochs.
    pub warmup: u64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            eta_min: 1e-7,
            eta_max: 1e-3,
            tau_tot: 100,
            beta: 0.93,
            theta: 10.0,
            warmup: 10,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min.is_finite() && self.eta_max.is_finite()) {
            return Err(Error::Config("schedule rates must be finite".into()));
        }
        if self.eta_min < 0.0 || self.eta_max <= 0.0 || self.eta_min >= self.eta_max {
            return Err(Error::Config(format!(
                "need 0 <= eta_min < eta_max, got eta_min={} eta_max={}",
                self.eta_min, self.eta_max
            )));
        }
        if self.tau_tot == 0 {
            return Err(Error::Config("tau_tot must be at least 1".into()));
        }
        if !(0.0 < self.beta && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !self.theta.is_finite() || self.theta <= 0.0 {
            return Err(Error::Config(format!("theta must be positive, got {}", self.theta)));
        }
        if self.warmup == 0 || self.warmup > self.tau_tot {
            return Err(Error::Config(format!(
                "warmup must lie in 1..=tau_tot, got warmup={} tau_tot={}",
                self.warmup, self.tau_tot
            )));
        }
        // Warmup ramp lr_c(τ)·τ/warmup is guaranteed non-decreasing only
        // while the cosine has not fallen too far: 1 + cos(u) >= u·sin(u)
        // holds for u <= 2π/5, i.e. warmup/tau_tot <= 2/5.
        if 5 * self.warmup > 2 * self.tau_tot {
            return Err(Error::Config(format!(
                "warmup too long for monotonic ramp: need 5*warmup <= 2*tau_tot, got warmup={} tau_tot={}",
                self.warmup, self.tau_tot
            )));
        }
        Ok(())
    }

    fn check_tau(&self, tau: u64) -> Result<()> {
        if tau > self.tau_tot {
            return Err(Error::Config(format!(
                "epoch {tau} outside schedule (tau_tot={})",
                self.tau_tot
            )));
        }
        Ok(())
    }

    /// Cosine-annealed base curve, valid for τ in 0..=tau_tot.
    pub fn lr_classifier(&self, tau: u64) -> Result<f64> {
        self.check_tau(tau)?;
        let frac = tau as f64 / self.tau_tot as f64;
        Ok(self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * frac).cos()))
    }

    /// Linear warmup to the base curve, then exponential decay from the
    /// warmup point. Epochs are 1-based for this curve.
    pub fn lr_backbone(&self, tau: u64) -> Result<f64> {
        if tau == 0 {
            return Err(Error::Config("backbone schedule is 1-based; epoch 0 has no rate".into()));
        }
        self.check_tau(tau)?;
        if tau <= self.warmup {
            // ratio computed first so τ = warmup reproduces the base curve
            // value exactly (×1.0)
            Ok(self.lr_classifier(tau)? * (tau as f64 / self.warmup as f64))
        } else {
            Ok(self.lr_classifier(self.warmup)? * self.beta.powi((tau - self.warmup) as i32))
        }
    }

    /// Adapter curve: θ × the base curve.
    pub fn lr_adapter(&self, tau: u64) -> Result<f64> {
        Ok(self.theta * self.lr_classifier(tau)?)
    }

    /// CSV dump `epoch, lr_classifier, lr_backbone, lr_adapter` for epochs
    /// 1..=tau_tot (the range the trainer actually steps through).
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("epoch,lr_classifier,lr_backbone,lr_adapter\n");
        for tau in 1..=self.tau_tot {
            out.push_str(&format!(
                "{},{},{},{}\n",
                tau,
                self.lr_classifier(tau)?,
                self.lr_backbone(tau)?,
                self.lr_adapter(tau)?
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ScheduleParams {
        ScheduleParams::default()
    }

    #[test]
    fn classifier_endpoints_and_midpoint() {
        let s = p();
        assert!((s.lr_classifier(0).unwrap() - s.eta_max).abs() < 1e-18);
        assert!((s.lr_classifier(100).unwrap() - s.eta_min).abs() < 1e-18);
        let mid = s.lr_classifier(50).unwrap();
        assert!((mid - 0.5 * (s.eta_max + s.eta_min)).abs() < 1e-15);
    }

    #[test]
    fn classifier_matches_direct_formula_everywhere() {
        let s = ScheduleParams { tau_tot: 37, warmup: 5, ..p() };
        for tau in 0..=37 {
            let got = s.lr_classifier(tau).unwrap();
            let want = s.eta_min
                + 0.5 * (s.eta_max - s.eta_min) * (1.0 + (PI * (tau as f64 / 37.0)).cos());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn backbone_warmup_then_decay() {
        let s = p();
        // τ = warmup touches the base curve exactly
        let at_warm = s.lr_backbone(10).unwrap();
        assert_eq!(at_warm, s.lr_classifier(10).unwrap());
        // inside warmup: scaled base curve
        let t3 = s.lr_backbone(3).unwrap();
        assert!((t3 - s.lr_classifier(3).unwrap() * 0.3).abs() < 1e-18);
        // after warmup: closed-form geometric decay, independent of the cosine
        for tau in 11..=100u64 {
            let got = s.lr_backbone(tau).unwrap();
            let want = s.lr_classifier(10).unwrap() * s.beta.powi((tau - 10) as i32);
            assert!((got - want).abs() <= 1e-18 * want.abs().max(1.0));
        }
        assert!(s.lr_backbone(0).is_err());
    }

    #[test]
    fn backbone_is_monotone_up_then_down() {
        for (tau_tot, warmup) in [(100u64, 10u64), (40, 16), (25, 10), (5, 2)] {
            let s = ScheduleParams { tau_tot, warmup, ..p() };
            s.validate().unwrap();
            let vals: Vec<f64> = (1..=tau_tot).map(|t| s.lr_backbone(t).unwrap()).collect();
            for w in vals.windows(2).take((warmup - 1) as usize) {
                assert!(w[1] >= w[0], "warmup not non-decreasing: {w:?} ({tau_tot},{warmup})");
            }
            for w in vals[(warmup - 1) as usize..].windows(2) {
                assert!(w[1] <= w[0], "decay not non-increasing: {w:?}");
            }
        }
    }

    #[test]
    fn adapter_is_scaled_base() {
        let s = p();
        for tau in [0u64, 7, 55, 100] {
            assert_eq!(s.lr_adapter(tau).unwrap(), 10.0 * s.lr_classifier(tau).unwrap());
        }
    }

    #[test]
    fn out_of_range_epochs_are_errors() {
        let s = p();
        assert!(s.lr_classifier(101).is_err());
        assert!(s.lr_backbone(101).is_err());
        assert!(s.lr_adapter(101).is_err());
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(ScheduleParams { eta_min: 1e-3, eta_max: 1e-7, ..p() }.validate().is_err());
        assert!(ScheduleParams { eta_min: -1.0, ..p() }.validate().is_err());
        assert!(ScheduleParams { beta: 1.0, ..p() }.validate().is_err());
        assert!(ScheduleParams { beta: 0.0, ..p() }.validate().is_err());
        assert!(ScheduleParams { theta: 0.0, ..p() }.validate().is_err());
        assert!(ScheduleParams { warmup: 0, ..p() }.validate().is_err());
        assert!(ScheduleParams { tau_tot: 0, warmup: 0, ..p() }.validate().is_err());
        // warmup longer than the monotone region of the ramp
        assert!(ScheduleParams { tau_tot: 20, warmup: 9, ..p() }.validate().is_err());
        assert!(ScheduleParams { tau_tot: 20, warmup: 8, ..p() }.validate().is_ok());
        assert!(p().validate().is_ok());
    }

    #[test]
    fn csv_has_header_and_tau_tot_rows() {
        let s = ScheduleParams { tau_tot: 5, warmup: 2, ..p() };
        let csv = s.to_csv().unwrap();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "epoch,lr_classifier,lr_backbone,lr_adapter");
        assert!(lines[1].starts_with("1,"));
        // round-trips through f64 Display exactly
        let field = lines[3].split(',').nth(2).unwrap();
        let parsed: f64 = field.parse().unwrap();
        assert_eq!(parsed, s.lr_backbone(3).unwrap());
    }
}
