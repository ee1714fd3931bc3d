//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub participants: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub local_lr: f64,
    pub server_lr: f64,
    pub beta: f64,
    /// Significance level; kept for completeness, the window scan ignores it.
    pub alpha: f64,
    pub plr_warmup_rounds: usize,
    /// Refine segment labels of pseudo-normal videos too.
    pub plr_all_videos: bool,
    pub batch_size: usize,
    pub dropout: f64,
    pub l2_coeff: f64,
    /// Correct pseudo-labels with the manifest's weak video labels.
    pub use_weak_labels: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            participants: 5,
            rounds: 10,
            local_iters: 20,
            local_lr: 1e-3,
            server_lr: 1.0,
            beta: 0.2,
            alpha: 0.05,
            plr_warmup_rounds: 2,
            plr_all_videos: false,
            batch_size: 64,
            dropout: 0.3,
            l2_coeff: 0.0,
            use_weak_labels: false,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.participants == 0 || self.rounds == 0 || self.local_iters == 0 || self.batch_size == 0 {
            return bad("participants, rounds, local_iters and batch_size must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(self.local_lr > 0.0 && self.server_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.l2_coeff.is_finite() || self.l2_coeff < 0.0 {
            return bad("l2_coeff must be finite and non-negative");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "participants" => self.participants = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "local_iters" => self.local_iters = parse(key, value)?,
            "local_lr" => self.local_lr = parse(key, value)?,
            "server_lr" => self.server_lr = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "plr_warmup_rounds" => self.plr_warmup_rounds = parse(key, value)?,
            "plr_all_videos" | "plr-all-videos" => self.plr_all_videos = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "l2_coeff" => self.l2_coeff = parse(key, value)?,
            "use_weak_labels" => self.use_weak_labels = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses the text form on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped. Keys listed in `passthrough` are
    /// returned instead of applied.
    pub fn parse_with(text: &str, passthrough: &[&str]) -> Result<(Self, Vec<(String, String)>), ConfigError> {
        let mut cfg = Self::default();
        let mut extra = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if passthrough.contains(&k) {
                extra.push((k.to_string(), v.to_string()));
            } else {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok((cfg, extra))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(Self::parse_with(text, &[])?.0)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "participants = {}", self.participants);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "local_iters = {}", self.local_iters);
        let _ = writeln!(s, "local_lr = {}", self.local_lr);
        let _ = writeln!(s, "server_lr = {}", self.server_lr);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "plr_warmup_rounds = {}", self.plr_warmup_rounds);
        let _ = writeln!(s, "plr_all_videos = {}", self.plr_all_videos);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "l2_coeff = {}", self.l2_coeff);
        let _ = writeln!(s, "use_weak_labels = {}", self.use_weak_labels);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = FederationConfig::parse("# run\nrounds = 3\n\nlocal_lr=0.05\nplr-all-videos = true\n").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.local_lr, 0.05);
        assert!(cfg.plr_all_videos);
        assert_eq!(cfg.participants, FederationConfig::default().participants);
    }

    #[test]
    fn text_form_round_trips() {
        let cfg = FederationConfig {
            seed: 99,
            beta: 0.35,
            ..FederationConfig::default()
        };
        assert_eq!(FederationConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(FederationConfig::parse("rounds 3"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(FederationConfig::parse("nope = 1"), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(FederationConfig::parse("beta = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(FederationConfig::parse("beta = 0"), Err(ConfigError::Invalid(_))));
        let (_, extra) = FederationConfig::parse_with("test_manifest = a/b.tsv", &["test_manifest"]).unwrap();
        assert_eq!(extra, vec![("test_manifest".to_string(), "a/b.tsv".to_string())]);
    }
}
