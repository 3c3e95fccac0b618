//! `key=value` run configuration covering dataset and training settings.
//!
//! One setting per line, `#` starts a comment. Unknown keys are errors.
//! Precedence, lowest first: defaults, config file, `TAMM_SEED`, explicit
//! overrides (command-line flags).

use std::path::Path;

use crate::datagen::{DatasetSpec, ShiftSetting};
use crate::error::{Result, TammError};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "TAMM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    fixed_shift: Option<f64>,
    band: (f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            fixed_shift: None,
            band: ShiftSetting::DEFAULT_BAND,
        }
    }
}

const DATASET_KEYS: [&str; 17] = [
    "classes",
    "heldout_classes",
    "samples_per_class",
    "eval_seen_per_class",
    "views",
    "latent_dim",
    "feature_dim",
    "points",
    "shift",
    "shift_low",
    "shift_high",
    "overlap",
    "private_scale",
    "instance_noise",
    "view_noise",
    "point_jitter",
    "geometry_scale",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TammError::config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&str> = DATASET_KEYS.to_vec();
        k.extend(TrainConfig::KEYS);
        k
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.dataset;
        match key {
            "classes" => d.classes = num(key, value)?,
            "heldout_classes" => d.heldout_classes = num(key, value)?,
            "samples_per_class" => d.samples_per_class = num(key, value)?,
            "eval_seen_per_class" => d.eval_seen_per_class = num(key, value)?,
            "views" => d.views = num(key, value)?,
            "latent_dim" => d.latent_dim = num(key, value)?,
            "feature_dim" => d.feature_dim = num(key, value)?,
            "points" => d.points = num(key, value)?,
            "shift" => {
                self.fixed_shift = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "shift_low" => self.band.0 = num(key, value)?,
            "shift_high" => self.band.1 = num(key, value)?,
            "overlap" => d.overlap = num(key, value)?,
            "private_scale" => d.private_scale = num(key, value)?,
            "instance_noise" => d.instance_noise = num(key, value)?,
            "view_noise" => d.view_noise = num(key, value)?,
            "point_jitter" => d.point_jitter = num(key, value)?,
            "geometry_scale" => d.geometry_scale = num(key, value)?,
            "seed" => {
                d.seed = num(key, value)?;
                self.train.seed = d.seed;
            }
            _ => {
                if !self.train.set(key, value)? {
                    return Err(TammError::config(format!("unknown config key {key:?}")));
                }
            }
        }
        self.dataset.shift = match self.fixed_shift {
            Some(s) => ShiftSetting::Fixed(s),
            None => ShiftSetting::Auto {
                low: self.band.0,
                high: self.band.1,
            },
        };
        Ok(())
    }

    /// Applies `key=value` lines.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TammError::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| TammError::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults ← file ← `seed_env` ← `overrides`.
    pub fn resolve(file: Option<&Path>, seed_env: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            cfg.merge_text(&std::fs::read_to_string(p)?)?;
        }
        if let Some(s) = seed_env {
            cfg.set("seed", s)
                .map_err(|e| TammError::config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()
    }

    /// Canonical text form; feeding it back reproduces this config.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let shift = self.fixed_shift.map_or("auto".to_string(), |s| s.to_string());
        let vals = [
            d.classes.to_string(),
            d.heldout_classes.to_string(),
            d.samples_per_class.to_string(),
            d.eval_seen_per_class.to_string(),
            d.views.to_string(),
            d.latent_dim.to_string(),
            d.feature_dim.to_string(),
            d.points.to_string(),
            shift,
            self.band.0.to_string(),
            self.band.1.to_string(),
            d.overlap.to_string(),
            d.private_scale.to_string(),
            d.instance_noise.to_string(),
            d.view_noise.to_string(),
            d.point_jitter.to_string(),
            d.geometry_scale.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in DATASET_KEYS.iter().zip(vals) {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in self.train.to_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::default();
        c.merge_text("# header\nclasses = 12 # trailing\n\nshift=0.3\nepochs=7\n").unwrap();
        assert_eq!(c.dataset.classes, 12);
        assert_eq!(c.dataset.shift, ShiftSetting::Fixed(0.3));
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let err = c.merge_text("epochz=3").unwrap_err().to_string();
        assert!(err.contains("epochz") && err.contains("line 1"), "{err}");
        assert!(c.merge_text("just words").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed=1\nepochs=9\n").unwrap();
        let c = RunConfig::resolve(Some(&p), None, &[]).unwrap();
        assert_eq!((c.dataset.seed, c.train.seed, c.train.epochs), (1, 1, 9));
        let c = RunConfig::resolve(Some(&p), Some("5"), &[]).unwrap();
        assert_eq!(c.train.seed, 5);
        let c = RunConfig::resolve(Some(&p), Some("5"), &[("seed".into(), "8".into())]).unwrap();
        assert_eq!((c.dataset.seed, c.train.seed), (8, 8));
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.merge_text("shift_low=0.3\nshift_high=0.5\ndual_residual_alpha=0.2\ntrain_views=2").unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dataset.shift, ShiftSetting::Auto { low: 0.3, high: 0.5 });
        assert_eq!(RunConfig::keys().len(), c.to_text().lines().count());
    }
}
