//! Experiment configuration: a plain `key = value` file, overridable from the CLI.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::approx::FeatureKind;
use crate::density_ratio::RatioInit;
use crate::error::{Error, Result};
use crate::learners::StepSchedule;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnvId {
    Baird,
    Example1,
    /// Model file in the format of [`crate::harness::model_io`].
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    GradQ,
    GradLogMu,
    Variance,
    Anomaly,
    Canonical,
    BackwardValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learner {
    GenTd,
    Gtd,
}

impl FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baird" => Ok(Self::Baird),
            "example1" => Ok(Self::Example1),
            other => match other.strip_prefix("file:") {
                Some(path) => Ok(Self::File(PathBuf::from(path))),
                None => Err(Error::Config(format!("unknown environment '{other}'"))),
            },
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baird => write!(f, "baird"),
            Self::Example1 => write!(f, "example1"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad_q" => Self::GradQ,
            "grad_logmu" => Self::GradLogMu,
            "variance" => Self::Variance,
            "anomaly" => Self::Anomaly,
            "canonical" => Self::Canonical,
            "backward_value" => Self::BackwardValue,
            other => return Err(Error::Config(format!("unknown task '{other}'"))),
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GradQ => "grad_q",
            Self::GradLogMu => "grad_logmu",
            Self::Variance => "variance",
            Self::Anomaly => "anomaly",
            Self::Canonical => "canonical",
            Self::BackwardValue => "backward_value",
        })
    }
}

impl FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gentd" => Ok(Self::GenTd),
            "gtd" => Ok(Self::Gtd),
            other => Err(Error::Config(format!("unknown learner '{other}'"))),
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GenTd => "gentd",
            Self::Gtd => "gtd",
        })
    }
}

pub fn parse_feature_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "cft" | "complete" => Ok(FeatureKind::Complete),
        "incft" | "incomplete" => Ok(FeatureKind::Incomplete),
        other => Err(Error::Config(format!("unknown feature kind '{other}'"))),
    }
}

pub fn feature_kind_name(k: FeatureKind) -> &'static str {
    match k {
        FeatureKind::Complete => "cft",
        FeatureKind::Incomplete => "incft",
    }
}

fn parse_ratio_init(s: &str) -> Result<RatioInit> {
    match s {
        "zero" => Ok(RatioInit::Zero),
        "ones" => Ok(RatioInit::Ones),
        other => Err(Error::Config(format!("unknown ratio init '{other}'"))),
    }
}

/// Seed lists: `N` (seeds `0..N`), `a..b` (half open), or `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |e: std::num::ParseIntError| Error::Config(format!("seeds '{s}': {e}"));
    let s = s.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        (a.trim().parse().map_err(bad)?..b.trim().parse().map_err(bad)?).collect()
    } else if s.contains(',') {
        s.split(',').map(|t| t.trim().parse().map_err(bad)).collect::<Result<_>>()?
    } else {
        (0..s.parse::<u64>().map_err(bad)?).collect()
    };
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key} = '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = '{v}': expected a boolean"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub task: Task,
    pub features: FeatureKind,
    pub learner: Learner,
    /// Base value stepsize; `None` picks the per-task default.
    pub lr_theta: Option<f64>,
    /// Base ratio (GenTD) or auxiliary (GTD) stepsize.
    pub lr_ratio: Option<f64>,
    /// Decay offset `t1` of the value stepsize; `None` keeps it constant.
    pub theta_offset: Option<f64>,
    pub ratio_offset: Option<f64>,
    pub iters: u64,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub eval_every: u64,
    pub ratio_init: RatioInit,
    pub clip_ratio: bool,
    /// Use the exact ratio in the value update instead of the learned one.
    pub oracle_ratio: bool,
    /// Write parameter checkpoints at every evaluation.
    pub checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Baird,
            task: Task::GradQ,
            features: FeatureKind::Complete,
            learner: Learner::GenTd,
            lr_theta: None,
            lr_ratio: None,
            theta_offset: None,
            ratio_offset: None,
            iters: 200_000,
            seeds: (0..20).collect(),
            out: None,
            eval_every: 1000,
            ratio_init: RatioInit::Zero,
            clip_ratio: false,
            oracle_ratio: false,
            checkpoint: false,
        }
    }
}

impl ExperimentConfig {
    /// Default base stepsizes `(value, ratio/auxiliary)` for a task and learner.
    pub fn default_rates(task: Task, learner: Learner) -> (f64, f64) {
        match (learner, task) {
            (Learner::Gtd, _) => (0.005, 0.005),
            (Learner::GenTd, Task::GradLogMu) => (0.005, 0.05),
            (Learner::GenTd, _) => (0.005, 0.01),
        }
    }

    pub fn theta_schedule(&self) -> StepSchedule {
        let base = self.lr_theta.unwrap_or(Self::default_rates(self.task, self.learner).0);
        schedule(base, self.theta_offset)
    }

    pub fn ratio_schedule(&self) -> StepSchedule {
        let base = self.lr_ratio.unwrap_or(Self::default_rates(self.task, self.learner).1);
        schedule(base, self.ratio_offset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let EnvId::File(p) = &self.env {
            if !p.exists() {
                return Err(Error::Config(format!("model file {} does not exist", p.display())));
            }
        }
        for (k, v) in [("lr_theta", self.lr_theta), ("lr_ratio", self.lr_ratio)] {
            if matches!(v, Some(x) if !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("theta_offset", self.theta_offset), ("ratio_offset", self.ratio_offset)] {
            if matches!(v, Some(x) if !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Hyphens and underscores in keys are equivalent.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "env" => self.env = v.parse()?,
            "model" => self.env = EnvId::File(PathBuf::from(v)),
            "task" => self.task = v.parse()?,
            "features" => self.features = parse_feature_kind(v)?,
            "learner" => self.learner = v.parse()?,
            "lr_theta" => self.lr_theta = Some(parse_num(&key, v)?),
            "lr_ratio" => self.lr_ratio = Some(parse_num(&key, v)?),
            "theta_offset" => self.theta_offset = parse_offset(&key, v)?,
            "ratio_offset" => self.ratio_offset = parse_offset(&key, v)?,
            "iters" => self.iters = parse_num(&key, v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "eval_every" => self.eval_every = parse_num(&key, v)?,
            "ratio_init" => self.ratio_init = parse_ratio_init(v)?,
            "clip_ratio" => self.clip_ratio = parse_bool(&key, v)?,
            "oracle_ratio" => self.oracle_ratio = parse_bool(&key, v)?,
            "checkpoint" => self.checkpoint = parse_bool(&key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Serializes every field; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("env = {}", self.env),
            format!("task = {}", self.task),
            format!("features = {}", feature_kind_name(self.features)),
            format!("learner = {}", self.learner),
        ];
        // Unset rates follow the learner default, which is recorded as a comment.
        let (a, b) = Self::default_rates(self.task, self.learner);
        for (key, v, d) in [("lr_theta", self.lr_theta, a), ("lr_ratio", self.lr_ratio, b)] {
            match v {
                Some(v) => lines.push(format!("{key} = {v}")),
                None => lines.push(format!("# {key} = {d} (default)")),
            }
        }
        let off = |o: Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
        lines.push(format!("theta_offset = {}", off(self.theta_offset)));
        lines.push(format!("ratio_offset = {}", off(self.ratio_offset)));
        lines.push(format!("iters = {}", self.iters));
        lines.push(format!("seeds = {}", format_seeds(&self.seeds)));
        if let Some(o) = &self.out {
            lines.push(format!("out = {}", o.display()));
        }
        lines.push(format!("eval_every = {}", self.eval_every));
        lines.push(format!(
            "ratio_init = {}",
            match self.ratio_init {
                RatioInit::Zero => "zero",
                RatioInit::Ones => "ones",
            }
        ));
        lines.push(format!("clip_ratio = {}", self.clip_ratio));
        lines.push(format!("oracle_ratio = {}", self.oracle_ratio));
        lines.push(format!("checkpoint = {}", self.checkpoint));
        lines.join("\n") + "\n"
    }
}

fn parse_offset(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" || v == "constant" {
        Ok(None)
    } else {
        Ok(Some(parse_num(key, v)?))
    }
}

/// Inverse of [`parse_seeds`]: contiguous runs print as `a..b`.
pub fn format_seeds(seeds: &[u64]) -> String {
    let contiguous = seeds.windows(2).all(|w| w[1] == w[0] + 1);
    match (seeds.first(), seeds.last()) {
        (Some(&a), Some(&b)) if contiguous => format!("{a}..{}", b + 1),
        _ => seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    }
}

fn schedule(base: f64, offset: Option<f64>) -> StepSchedule {
    match offset {
        None => StepSchedule::Constant(base),
        Some(offset) => StepSchedule::InverseTime { base, offset },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_forms() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5..7").unwrap(), vec![5, 6]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("task = grad_logmu  # comment\nfeatures = incft\ntheta-offset = 50000\nseeds = 1,2")
            .unwrap();
        c.out = Some("runs/x".into());
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.task, Task::GradLogMu);
        assert_eq!(back.theta_offset, Some(50000.0));
        assert_eq!(back.seeds, vec![1, 2]);
        assert_eq!(back.theta_schedule(), c.theta_schedule());
        assert_eq!(back.ratio_schedule(), c.ratio_schedule());
        assert_eq!(back.out, c.out);
    }

    #[test]
    fn unknown_keys_and_values_fail() {
        assert!(ExperimentConfig::from_text("colour = red").is_err());
        assert!(ExperimentConfig::from_text("task = control").is_err());
        assert!(ExperimentConfig::from_text("env = gridworld").is_err());
        let c = ExperimentConfig { iters: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
