//! `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use brainseg::adversarial::AttackConfig;
use brainseg::cascade::{CascadeConfig, DEFAULT_MARGIN};
use brainseg::dataio::PhantomConfig;
use brainseg::train::{Architecture, LrSchedule, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
    All,
}

impl Stage {
    /// Zero-based stage indices selected.
    pub fn indices(self) -> Vec<usize> {
        match self {
            Stage::One => vec![0],
            Stage::Two => vec![1],
            Stage::Three => vec![2],
            Stage::All => vec![0, 1, 2],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Three => "3",
            Stage::All => "all",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "3" => Ok(Stage::Three),
            "all" => Ok(Stage::All),
            _ => Err(format!("expected 1, 2, 3 or all, got {s:?}")),
        }
    }
}

/// `on`/`off` switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switch(pub bool);

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 { "on" } else { "off" })
    }
}

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" => Ok(Switch(true)),
            "off" => Ok(Switch(false)),
            _ => Err(format!("expected on or off, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f32,
    pub lr_schedule: LrSchedule,
    pub lambda_cls: f64,
    pub epsilon: f64,
    pub mix_ratio: f64,
    pub bbox_margin: usize,
    pub stage: Stage,
    pub defense: bool,
    pub class_head: bool,
    pub cascade: bool,
    pub folds: usize,
    /// How many of the folds to train and evaluate, starting at fold 0;
    /// `None` means all of them.
    pub train_folds: Option<usize>,
    pub n_samples: usize,
    pub image_size: usize,
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AttackConfig::default();
        let p = PhantomConfig::default();
        Self {
            seed: 42,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            lr_schedule: t.schedule,
            lambda_cls: t.lambda,
            epsilon: a.epsilon,
            mix_ratio: a.mix_ratio,
            bbox_margin: DEFAULT_MARGIN,
            stage: Stage::All,
            defense: false,
            class_head: false,
            cascade: false,
            folds: 5,
            train_folds: None,
            n_samples: p.n_samples,
            image_size: p.size,
            data_path: PathBuf::from("data/phantom.segv"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("bad value for `{key}`: {value:?} ({e})")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 21] = [
        "seed",
        "epochs",
        "batch_size",
        "lr",
        "momentum",
        "grad_clip",
        "lr_schedule",
        "lambda_cls",
        "epsilon",
        "mix_ratio",
        "bbox_margin",
        "stage",
        "defense",
        "class_head",
        "cascade",
        "folds",
        "train_folds",
        "n_samples",
        "image_size",
        "data_path",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = parse(key, value)?,
            "lambda_cls" => self.lambda_cls = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "mix_ratio" => self.mix_ratio = parse(key, value)?,
            "bbox_margin" => self.bbox_margin = parse(key, value)?,
            "stage" => self.stage = parse(key, value)?,
            "defense" => self.defense = parse::<Switch>(key, value)?.0,
            "class_head" => self.class_head = parse::<Switch>(key, value)?.0,
            "cascade" => self.cascade = parse::<Switch>(key, value)?.0,
            "folds" => self.folds = parse(key, value)?,
            "train_folds" => {
                self.train_folds = match value {
                    "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "n_samples" => self.n_samples = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "data_path" => self.data_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("line {}: expected key=value, got {raw:?}", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(CliError::Usage(format!("line {}: `{key}` given twice", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if let Some(t) = self.train_folds {
            if t == 0 || t > self.folds {
                return bad(format!("train_folds must lie in 1..={}, got {t}", self.folds));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return bad(format!("grad_clip must be nonnegative, got {}", self.grad_clip));
        }
        if !(self.lambda_cls >= 0.0) {
            return bad(format!("lambda_cls must be nonnegative, got {}", self.lambda_cls));
        }
        self.attack()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if !self.cascade && self.stage != Stage::All {
            return bad("selecting a single stage requires cascade = on".into());
        }
        let align = self.architecture().spec(2).alignment();
        if self.image_size == 0 || self.image_size % align != 0 {
            return bad(format!("image_size must be a positive multiple of {align}"));
        }
        if self.image_size > u16::MAX as usize {
            return bad(format!("image_size {} too large", self.image_size));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let v = |key: &str| -> String {
            match key {
                "seed" => self.seed.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "grad_clip" => self.grad_clip.to_string(),
                "lr_schedule" => self.lr_schedule.to_string(),
                "lambda_cls" => self.lambda_cls.to_string(),
                "epsilon" => self.epsilon.to_string(),
                "mix_ratio" => self.mix_ratio.to_string(),
                "bbox_margin" => self.bbox_margin.to_string(),
                "stage" => self.stage.to_string(),
                "defense" => Switch(self.defense).to_string(),
                "class_head" => Switch(self.class_head).to_string(),
                "cascade" => Switch(self.cascade).to_string(),
                "folds" => self.folds.to_string(),
                "train_folds" => self.train_folds.map_or("all".into(), |t| t.to_string()),
                "n_samples" => self.n_samples.to_string(),
                "image_size" => self.image_size.to_string(),
                "data_path" => self.data_path.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!(),
            }
        };
        for key in Self::KEYS {
            writeln!(s, "{key}={}", v(key)).unwrap();
        }
        s
    }

    /// Number of folds actually trained and evaluated.
    pub fn active_folds(&self) -> usize {
        self.train_folds.unwrap_or(self.folds)
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            mix_ratio: self.mix_ratio,
            ..AttackConfig::default()
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::default()
    }

    pub fn cascade_config(&self) -> Option<CascadeConfig> {
        self.cascade.then(|| CascadeConfig {
            margin: self.bbox_margin,
            align: self.architecture().spec(2).alignment(),
        })
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            size: self.image_size,
            n_samples: self.n_samples,
            ..PhantomConfig::default()
        }
    }

    pub fn train(&self, workers: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            schedule: self.lr_schedule,
            lambda: self.lambda_cls,
            class_head: self.class_head,
            defense: self.defense.then(|| self.attack()),
            seed: self.seed,
            workers,
        }
    }

    /// Row label in the style of an ablation table, e.g. `Base+Class+Defense(eps=0.1)`.
    pub fn name(&self) -> String {
        let mut s = String::from("Base");
        if self.class_head {
            s.push_str("+Class");
        }
        if self.defense {
            write!(s, "+Defense(eps={})", self.epsilon).unwrap();
        }
        if self.cascade {
            s.push_str("+Coarse2Fine");
        }
        s
    }
}
