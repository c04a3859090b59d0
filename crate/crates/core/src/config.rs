//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; every other line must be a known
//! key. Values not given keep their defaults. [`ExperimentConfig::resolved_text`]
//! writes every effective value back in the same syntax, so a run can be
//! repeated from that file alone.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::activations::ActivationKind;
use crate::cbp::CbpConfig;
use crate::dbp::{assign_depths, DbpConfig};
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::replay::ReplayConfig;

/// Layer stack choice; `Auto` picks by the dataset's image side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayersChoice {
    Auto,
    Fixed(Architecture),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Activation family; for ReLUDown the hinge comes from `hinge_d`.
    pub activation: ActivationKind,
    pub hinge_d: f64,
    pub layers: LayersChoice,
    pub dbp_enabled: bool,
    pub dbp: DbpConfig,
    pub cbp_enabled: bool,
    pub cbp: CbpConfig,
    pub replay_enabled: bool,
    pub replay: ReplayConfig,
    pub n_tasks: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Leave wall time out of `metrics.csv` so the file is reproducible byte for byte.
    pub deterministic: bool,
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
    pub hist_tasks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            activation: ActivationKind::Relu,
            hinge_d: -3.0,
            layers: LayersChoice::Auto,
            dbp_enabled: false,
            dbp: DbpConfig::default(),
            cbp_enabled: false,
            cbp: CbpConfig::default(),
            replay_enabled: false,
            replay: ReplayConfig::default(),
            n_tasks: 5000,
            epochs: 250,
            batch: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            deterministic: true,
            data_path: PathBuf::from("data/synthetic.clds"),
            out_dir: PathBuf::from("out"),
            hist_tasks: vec![0, 100, 500, 1000, 3000, 5000],
        }
    }
}

pub const KEYS: &[&str] = &[
    "net.activation",
    "net.layers",
    "activation.d",
    "dbp.enabled",
    "dbp.f",
    "dbp.a",
    "cbp.enabled",
    "cbp.replacement_rate",
    "cbp.decay_rate",
    "cbp.maturity_threshold",
    "cbp.skip_layers",
    "replay.enabled",
    "replay.fraction",
    "replay.step_size",
    "stream.n_tasks",
    "stream.epochs",
    "stream.batch",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.seed",
    "train.deterministic",
    "data.path",
    "out.dir",
    "hist.tasks",
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// A real number, also accepting a fraction such as `1/6`.
fn parse_real(key: &str, v: &str) -> Result<f64> {
    let x = match v.split_once('/') {
        Some((a, b)) => parse_num::<f64>(key, a.trim())? / parse_num::<f64>(key, b.trim())?,
        None => parse_num(key, v)?,
    };
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: {v:?} is not a finite number")));
    }
    Ok(x)
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply the lines of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {raw:?}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn apply_assignment(&mut self, line: &str) -> Result<()> {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "net.activation" => self.activation = v.parse()?,
            "net.layers" => {
                self.layers = match v {
                    "auto" => LayersChoice::Auto,
                    _ => LayersChoice::Fixed(v.parse()?),
                }
            }
            "activation.d" => self.hinge_d = parse_real(key, v)?,
            "dbp.enabled" => self.dbp_enabled = parse_bool(key, v)?,
            "dbp.f" => self.dbp.f = parse_real(key, v)?,
            "dbp.a" => self.dbp.a = parse_real(key, v)?,
            "cbp.enabled" => self.cbp_enabled = parse_bool(key, v)?,
            "cbp.replacement_rate" => self.cbp.replacement_rate = parse_real(key, v)?,
            "cbp.decay_rate" => self.cbp.decay_rate = parse_real(key, v)?,
            "cbp.maturity_threshold" => self.cbp.maturity_threshold = parse_num(key, v)?,
            "cbp.skip_layers" => self.cbp.skip_layers = list(v, |s| Ok(s.to_string()))?,
            "replay.enabled" => self.replay_enabled = parse_bool(key, v)?,
            "replay.fraction" => self.replay.fraction = parse_real(key, v)?,
            "replay.step_size" => self.replay.step_size = parse_real(key, v)?,
            "stream.n_tasks" => self.n_tasks = parse_num(key, v)?,
            "stream.epochs" => self.epochs = parse_num(key, v)?,
            "stream.batch" => self.batch = parse_num(key, v)?,
            "train.lr" => self.lr = parse_real(key, v)?,
            "train.momentum" => self.momentum = parse_real(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_real(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.deterministic" => self.deterministic = parse_bool(key, v)?,
            "data.path" => self.data_path = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "hist.tasks" => self.hist_tasks = list(v, |s| parse_num("hist.tasks", s))?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Drop the variant prefix so nested messages read cleanly.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl ExperimentConfig {
    /// The activation with the configured hinge applied.
    pub fn activation_kind(&self) -> ActivationKind {
        match self.activation {
            ActivationKind::ReluDown { .. } => ActivationKind::ReluDown { d: self.hinge_d },
            other => other,
        }
    }

    /// Layer stack for images of the given side.
    pub fn architecture(&self, side: usize) -> Result<Architecture> {
        match self.layers {
            LayersChoice::Fixed(a) => {
                if a.input_side() != side {
                    return Err(Error::Config(format!(
                        "net.layers={a} expects {0}x{0} images, dataset has {side}x{side}",
                        a.input_side()
                    )));
                }
                Ok(a)
            }
            LayersChoice::Auto => Architecture::for_image(side, side),
        }
    }

    /// Short name of the method this config runs, used in CSV rows.
    pub fn method_label(&self) -> String {
        let act = self.activation_kind();
        let mut label = match (act, self.dbp_enabled) {
            (ActivationKind::ReluDown { .. }, true) => "rdbp".to_string(),
            (a, true) => format!("{}+dbp", a.name()),
            (a, false) => a.name().to_string(),
        };
        if self.cbp_enabled {
            label.push_str("+cbp");
        }
        if self.replay_enabled {
            label.push_str("+replay");
        }
        label
    }

    /// Checks that need no dataset. [`Self::validate_for`] adds the rest.
    pub fn validate(&self) -> Result<()> {
        self.activation_kind().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("stream.batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        if self.cbp_enabled {
            self.cbp.validate()?;
        }
        if self.replay_enabled {
            self.replay.validate()?;
        }
        if let LayersChoice::Fixed(a) = self.layers {
            self.validate_dbp(a)?;
        }
        Ok(())
    }

    /// DBP values are checked even when DBP is off, so a bad file fails early.
    fn validate_dbp(&self, arch: Architecture) -> Result<()> {
        let max_depth = assign_depths(arch.trainable_layers())[0];
        self.dbp.validate(max_depth)
    }

    /// Full validation against a dataset's image side.
    pub fn validate_for(&self, side: usize) -> Result<Architecture> {
        self.validate()?;
        let arch = self.architecture(side)?;
        self.validate_dbp(arch)?;
        Ok(arch)
    }

    /// Every key with its effective value. `arch` replaces `auto` once known.
    pub fn resolved_text(&self, arch: Option<Architecture>) -> String {
        let layers = match (self.layers, arch) {
            (LayersChoice::Fixed(a), _) | (LayersChoice::Auto, Some(a)) => a.to_string(),
            (LayersChoice::Auto, None) => "auto".to_string(),
        };
        let act = match self.activation {
            ActivationKind::ReluDown { .. } => "reludown",
            other => other.name(),
        };
        let hist: Vec<String> = self.hist_tasks.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("net.activation", act.to_string());
        put("net.layers", layers);
        put("activation.d", format!("{:?}", self.hinge_d));
        put("dbp.enabled", fmt_bool(self.dbp_enabled).into());
        put("dbp.f", format!("{:?}", self.dbp.f));
        put("dbp.a", format!("{:?}", self.dbp.a));
        put("cbp.enabled", fmt_bool(self.cbp_enabled).into());
        put("cbp.replacement_rate", format!("{:?}", self.cbp.replacement_rate));
        put("cbp.decay_rate", format!("{:?}", self.cbp.decay_rate));
        put("cbp.maturity_threshold", self.cbp.maturity_threshold.to_string());
        put("cbp.skip_layers", self.cbp.skip_layers.join(","));
        put("replay.enabled", fmt_bool(self.replay_enabled).into());
        put("replay.fraction", format!("{:?}", self.replay.fraction));
        put("replay.step_size", format!("{:?}", self.replay.step_size));
        put("stream.n_tasks", self.n_tasks.to_string());
        put("stream.epochs", self.epochs.to_string());
        put("stream.batch", self.batch.to_string());
        put("train.lr", format!("{:?}", self.lr));
        put("train.momentum", format!("{:?}", self.momentum));
        put("train.weight_decay", format!("{:?}", self.weight_decay));
        put("train.seed", self.seed.to_string());
        put("train.deterministic", fmt_bool(self.deterministic).into());
        put("data.path", self.data_path.display().to_string());
        put("out.dir", self.out_dir.display().to_string());
        put("hist.tasks", hist.join(","));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_hyperparameter_table() {
        let text = ExperimentConfig::default().resolved_text(None);
        for line in [
            "train.lr = 0.01",
            "train.momentum = 0.9",
            "activation.d = -3.0",
            "dbp.f = 0.15",
            "dbp.a = 1.005",
            "cbp.replacement_rate = 0.0001",
            "cbp.decay_rate = 0.99",
            "cbp.maturity_threshold = 100",
            "replay.fraction = 0.16666666666666666",
        ] {
            assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
        }
    }

    #[test]
    fn every_key_is_echoed_and_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("net.activation = reludown\nactivation.d=-2.5\ndbp.enabled=true\ncbp.skip_layers=conv1,fc2\nhist.tasks=0,3").unwrap();
        let text = cfg.resolved_text(None);
        for key in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(cfg.activation_kind(), ActivationKind::ReluDown { d: -2.5 });
        assert_eq!(cfg.method_label(), "rdbp");
    }

    #[test]
    fn hinge_order_does_not_matter() {
        let a = ExperimentConfig::parse("activation.d=-2\nnet.activation=reludown").unwrap();
        let b = ExperimentConfig::parse("net.activation=reludown\nactivation.d=-2").unwrap();
        assert_eq!(a.activation_kind(), b.activation_kind());
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = ExperimentConfig::parse("# ok\ntrain.lr=0.1\ntrain.lrr=0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("train.lrr"), "{msg}");
    }

    #[test]
    fn fraction_syntax() {
        let cfg = ExperimentConfig::parse("replay.fraction = 1/6").unwrap();
        assert_eq!(cfg.replay.fraction, 1.0 / 6.0);
    }

    #[test]
    fn dbp_depth_limit() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_assignment("dbp.f=0.2").unwrap();
        cfg.apply_assignment("net.layers=6-deep").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("asymptotic factor nonpositive"));
        cfg.apply_assignment("net.layers=5-deep").unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn fixed_layers_must_match_image_side() {
        let cfg = ExperimentConfig::parse("net.layers=6-deep").unwrap();
        assert!(cfg.validate_for(16).is_err());
        assert_eq!(ExperimentConfig::default().validate_for(16).unwrap(), Architecture::Compact);
    }
}
