//! Hyperparameters, ablation toggles, and the training recipe.
//!
//! One flat key=value text file configures a run. Unspecified keys take the
//! defaults below; every load is validated before anything trains.

use crate::error::{Result, TorsdError};
use std::fmt::Write as _;
use std::path::Path;

/// Learning-rate schedule selector.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Scheduler {
    OneCycle,
    Constant,
}

impl Scheduler {
    fn as_str(self) -> &'static str {
        match self {
            Scheduler::OneCycle => "one_cycle",
            Scheduler::Constant => "constant",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "one_cycle" => Some(Scheduler::OneCycle),
            "constant" => Some(Scheduler::Constant),
            _ => None,
        }
    }
}

/// Loss weights, relation-head sizes, and ablation toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct TorsdConfig {
    /// Weight of the triplet hinge on relation values.
    pub alpha: f64,
    /// Weight of deepest-to-shallow relation distillation.
    pub beta: f64,
    /// Weight of the positive auxiliary losses.
    pub gamma_p: f64,
    /// Weight of the negative auxiliary losses.
    pub gamma_n: f64,
    /// Split between auxiliary task loss (1-lambda) and logit distillation
    /// (lambda) inside each auxiliary pair.
    pub lambda_mix: f64,
    /// Weight of logit calibration.
    pub sigma: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Projection embedding width D.
    pub embed_dim: usize,
    /// Softmax temperature for auxiliary logit distillation.
    pub kl_temperature: f64,
    /// Relation-network training (projection + relation heads + triplet +
    /// relation distillation).
    pub enable_rn: bool,
    /// Auxiliary classifiers on the projected pair embeddings.
    pub enable_ac: bool,
    /// Logit calibration through the logit-level relation head.
    pub enable_ld: bool,
    /// Handcrafted L2 relation distillation instead of relation networks.
    pub enable_handcrafted_rd: bool,
    /// RNG seed for sampling and initialization.
    pub seed: u64,
}

/// Optimizer and schedule recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: Scheduler,
}

/// Best setting from the sensitivity study, with all training-time
/// machinery enabled.
pub fn default_paper_config() -> TorsdConfig {
    TorsdConfig {
        alpha: 0.01,
        beta: 0.01,
        gamma_p: 0.2,
        gamma_n: 0.05,
        lambda_mix: 0.8,
        sigma: 0.01,
        margin: 1.0,
        embed_dim: 64,
        kl_temperature: 1.0,
        enable_rn: true,
        enable_ac: true,
        enable_ld: true,
        enable_handcrafted_rd: false,
        seed: 0,
    }
}

impl Default for TorsdConfig {
    fn default() -> Self {
        default_paper_config()
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 300,
            batch_size: 129,
            scheduler: Scheduler::OneCycle,
        }
    }
}

/// One invariant violation found by [`validate_config`].
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

/// Result of checking every config invariant. Empty report = valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, key: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            key: key.into(),
            message: message.into(),
        });
    }

    /// Converts a non-empty report into the error for its first violation.
    pub fn into_result(self) -> Result<()> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(TorsdError::config(v.key, v.message)),
        }
    }
}

/// Checks every invariant of both configs; reports all violations rather
/// than stopping at the first.
pub fn validate_config(cfg: &TorsdConfig, opt: &OptimConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (key, v) in [
        ("alpha", cfg.alpha),
        ("beta", cfg.beta),
        ("gamma_p", cfg.gamma_p),
        ("gamma_n", cfg.gamma_n),
        ("sigma", cfg.sigma),
        ("margin", cfg.margin),
    ] {
        if !v.is_finite() || v < 0.0 {
            report.push(key, format!("must be a nonnegative real, got {}", v));
        }
    }
    if !cfg.lambda_mix.is_finite() || !(0.0..=1.0).contains(&cfg.lambda_mix) {
        report.push(
            "lambda_mix",
            format!("must lie in [0,1], got {}", cfg.lambda_mix),
        );
    }
    if cfg.embed_dim < 1 {
        report.push("embed_dim", "must be at least 1");
    }
    if !cfg.kl_temperature.is_finite() || cfg.kl_temperature <= 0.0 {
        report.push(
            "kl_temperature",
            format!("must be positive, got {}", cfg.kl_temperature),
        );
    }
    if cfg.enable_ac && !cfg.enable_rn {
        report.push(
            "enable_ac",
            "auxiliary classifiers consume projected pair features; requires enable_rn=true",
        );
    }
    if cfg.enable_handcrafted_rd && cfg.enable_rn {
        report.push(
            "enable_handcrafted_rd",
            "mutually exclusive with enable_rn",
        );
    }

    if !opt.peak_lr.is_finite() || opt.peak_lr <= 0.0 {
        report.push("peak_lr", format!("must be positive, got {}", opt.peak_lr));
    }
    if !opt.momentum.is_finite() || !(0.0..1.0).contains(&opt.momentum) {
        report.push(
            "momentum",
            format!("must lie in [0,1), got {}", opt.momentum),
        );
    }
    if !opt.weight_decay.is_finite() || opt.weight_decay < 0.0 {
        report.push(
            "weight_decay",
            format!("must be nonnegative, got {}", opt.weight_decay),
        );
    }
    if opt.epochs == 0 {
        report.push("epochs", "must be positive");
    }
    if opt.batch_size == 0 || opt.batch_size % 3 != 0 {
        report.push(
            "batch_size",
            format!(
                "structured input is triplet-shaped; batch size must be a positive multiple of 3, got {}",
                opt.batch_size
            ),
        );
    }
    report
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| TorsdError::ConfigSyntax(format!("{key}: expected a real number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| TorsdError::ConfigSyntax(format!("{key}: expected an integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(TorsdError::ConfigSyntax(format!(
            "{key}: expected true/false, got `{v}`"
        ))),
    }
}

/// Applies one `key=value` assignment to whichever config owns the key.
pub fn apply_key(cfg: &mut TorsdConfig, opt: &mut OptimConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "alpha" => cfg.alpha = parse_f64(key, value)?,
        "beta" => cfg.beta = parse_f64(key, value)?,
        "gamma_p" => cfg.gamma_p = parse_f64(key, value)?,
        "gamma_n" => cfg.gamma_n = parse_f64(key, value)?,
        "lambda_mix" => cfg.lambda_mix = parse_f64(key, value)?,
        "sigma" => cfg.sigma = parse_f64(key, value)?,
        "margin" => cfg.margin = parse_f64(key, value)?,
        "embed_dim" => cfg.embed_dim = parse_usize(key, value)?,
        "kl_temperature" => cfg.kl_temperature = parse_f64(key, value)?,
        "enable_rn" => cfg.enable_rn = parse_bool(key, value)?,
        "enable_ac" => cfg.enable_ac = parse_bool(key, value)?,
        "enable_ld" => cfg.enable_ld = parse_bool(key, value)?,
        "enable_handcrafted_rd" => cfg.enable_handcrafted_rd = parse_bool(key, value)?,
        "seed" => {
            cfg.seed = value.parse::<u64>().map_err(|_| {
                TorsdError::ConfigSyntax(format!("seed: expected a nonnegative integer, got `{value}`"))
            })?
        }
        "peak_lr" => opt.peak_lr = parse_f64(key, value)?,
        "momentum" => opt.momentum = parse_f64(key, value)?,
        "weight_decay" => opt.weight_decay = parse_f64(key, value)?,
        "epochs" => opt.epochs = parse_usize(key, value)?,
        "batch_size" => opt.batch_size = parse_usize(key, value)?,
        "scheduler" => {
            opt.scheduler = Scheduler::parse(value).ok_or_else(|| {
                TorsdError::ConfigSyntax(format!(
                    "scheduler: expected one_cycle or constant, got `{value}`"
                ))
            })?
        }
        _ => return Err(TorsdError::ConfigSyntax(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parses the key=value text format from a string. Unspecified keys take
/// defaults; the result is validated.
pub fn parse_config(text: &str) -> Result<(TorsdConfig, OptimConfig)> {
    let mut cfg = default_paper_config();
    let mut opt = OptimConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            TorsdError::ConfigSyntax(format!("line {}: expected key=value, got `{line}`", lineno + 1))
        })?;
        apply_key(&mut cfg, &mut opt, key.trim(), value.trim())?;
    }
    validate_config(&cfg, &opt).into_result()?;
    Ok((cfg, opt))
}

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> Result<(TorsdConfig, OptimConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| TorsdError::io(path, e))?;
    parse_config(&text)
}

/// Serializes both configs in the same key=value format `load_config`
/// accepts.
pub fn serialize_config(cfg: &TorsdConfig, opt: &OptimConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "alpha = {}", cfg.alpha);
    let _ = writeln!(s, "beta = {}", cfg.beta);
    let _ = writeln!(s, "gamma_p = {}", cfg.gamma_p);
    let _ = writeln!(s, "gamma_n = {}", cfg.gamma_n);
    let _ = writeln!(s, "lambda_mix = {}", cfg.lambda_mix);
    let _ = writeln!(s, "sigma = {}", cfg.sigma);
    let _ = writeln!(s, "margin = {}", cfg.margin);
    let _ = writeln!(s, "embed_dim = {}", cfg.embed_dim);
    let _ = writeln!(s, "kl_temperature = {}", cfg.kl_temperature);
    let _ = writeln!(s, "enable_rn = {}", cfg.enable_rn);
    let _ = writeln!(s, "enable_ac = {}", cfg.enable_ac);
    let _ = writeln!(s, "enable_ld = {}", cfg.enable_ld);
    let _ = writeln!(s, "enable_handcrafted_rd = {}", cfg.enable_handcrafted_rd);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "peak_lr = {}", opt.peak_lr);
    let _ = writeln!(s, "momentum = {}", opt.momentum);
    let _ = writeln!(s, "weight_decay = {}", opt.weight_decay);
    let _ = writeln!(s, "epochs = {}", opt.epochs);
    let _ = writeln!(s, "batch_size = {}", opt.batch_size);
    let _ = writeln!(s, "scheduler = {}", opt.scheduler.as_str());
    s
}

/// Run identity written next to every checkpoint: the full config snapshot
/// plus enough context to rebuild the model and trace the run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub cfg: TorsdConfig,
    pub opt: OptimConfig,
    pub dataset_id: String,
    pub backbone_id: String,
    pub num_classes: usize,
    pub started_unix: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        cfg: &TorsdConfig,
        opt: &OptimConfig,
        dataset_id: &str,
        backbone_id: &str,
        num_classes: usize,
    ) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            cfg: cfg.clone(),
            opt: opt.clone(),
            dataset_id: dataset_id.into(),
            backbone_id: backbone_id.into(),
            num_classes,
            started_unix,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn serialize(&self) -> String {
        let mut s = serialize_config(&self.cfg, &self.opt);
        let _ = writeln!(s, "dataset_id = {}", self.dataset_id);
        let _ = writeln!(s, "backbone_id = {}", self.backbone_id);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        let _ = writeln!(s, "version = {}", self.version);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = default_paper_config();
        let mut opt = OptimConfig::default();
        let mut dataset_id = String::new();
        let mut backbone_id = String::new();
        let mut num_classes = 0usize;
        let mut started_unix = 0u64;
        let mut version = String::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TorsdError::ConfigSyntax(format!("manifest: expected key=value, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dataset_id" => dataset_id = value.into(),
                "backbone_id" => backbone_id = value.into(),
                "num_classes" => num_classes = parse_usize(key, value)?,
                "started_unix" => {
                    started_unix = value.parse().map_err(|_| {
                        TorsdError::ConfigSyntax("started_unix: expected integer".into())
                    })?
                }
                "version" => version = value.into(),
                _ => apply_key(&mut cfg, &mut opt, key, value)?,
            }
        }
        Ok(RunManifest {
            cfg,
            opt,
            dataset_id,
            backbone_id,
            num_classes,
            started_unix,
            version,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| TorsdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TorsdError::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let cfg = default_paper_config();
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.sigma, 0.01);
        assert_eq!(cfg.gamma_p, 0.2);
        assert_eq!(cfg.gamma_n, 0.05);
        assert_eq!(cfg.lambda_mix, 0.8);
        assert_eq!(cfg.margin, 1.0);
        assert!(cfg.enable_rn && cfg.enable_ac && cfg.enable_ld);
        assert!(!cfg.enable_handcrafted_rd);
        // determinism
        assert_eq!(cfg, default_paper_config());
    }

    #[test]
    fn paper_defaults_validate_clean() {
        let report = validate_config(&default_paper_config(), &OptimConfig::default());
        assert!(report.is_empty(), "{:?}", report);
    }

    #[test]
    fn optim_defaults_match_recipe() {
        let opt = OptimConfig::default();
        assert_eq!(opt.peak_lr, 0.1);
        assert_eq!(opt.momentum, 0.9);
        assert_eq!(opt.weight_decay, 0.0005);
        assert_eq!(opt.epochs, 300);
        assert_eq!(opt.batch_size, 129);
        assert_eq!(opt.scheduler, Scheduler::OneCycle);
    }

    #[test]
    fn empty_file_yields_defaults() {
        let (cfg, opt) = parse_config("").unwrap();
        assert_eq!(cfg, default_paper_config());
        assert_eq!(opt, OptimConfig::default());
    }

    #[test]
    fn batch_size_must_be_multiple_of_3() {
        let err = parse_config("batch_size = 128").unwrap_err();
        match err {
            TorsdError::ConfigValidation { key, message } => {
                assert_eq!(key, "batch_size");
                assert!(message.contains("multiple of 3"), "{message}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(matches!(
            parse_config("lambda_mix = 1.5"),
            Err(TorsdError::ConfigValidation { .. })
        ));
    }

    #[test]
    fn ac_without_rn_is_one_violation() {
        let mut cfg = default_paper_config();
        cfg.enable_rn = false;
        cfg.enable_ac = true;
        let report = validate_config(&cfg, &OptimConfig::default());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].key, "enable_ac");
    }

    #[test]
    fn handcrafted_and_rn_are_exclusive() {
        let mut cfg = default_paper_config();
        cfg.enable_handcrafted_rd = true;
        let report = validate_config(&cfg, &OptimConfig::default());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].key, "enable_handcrafted_rd");
    }

    #[test]
    fn unknown_key_is_syntax_error() {
        assert!(matches!(
            parse_config("no_such_key = 1"),
            Err(TorsdError::ConfigSyntax(_))
        ));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let (cfg, _) = parse_config("# a comment\n\nalpha = 0.5 # trailing\n").unwrap();
        assert_eq!(cfg.alpha, 0.5);
    }

    #[test]
    fn serialize_parse_round_trip() {
        let mut cfg = default_paper_config();
        cfg.enable_ac = false;
        cfg.embed_dim = 16;
        cfg.seed = 77;
        let mut opt = OptimConfig::default();
        opt.batch_size = 33;
        opt.scheduler = Scheduler::Constant;
        let text = serialize_config(&cfg, &opt);
        let (cfg2, opt2) = parse_config(&text).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(opt, opt2);
    }

    #[test]
    fn manifest_round_trip_reproduces_config() {
        let cfg = default_paper_config();
        let opt = OptimConfig::default();
        let m = RunManifest::new(&cfg, &opt, "synth:3x100", "toy_cnn", 3);
        let m2 = RunManifest::parse(&m.serialize()).unwrap();
        assert_eq!(m, m2);
    }
}
