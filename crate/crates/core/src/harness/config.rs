//! The experiment spec file.
//!
//! One `key = value` pair per line. `#` starts a comment. Grid axes are
//! written `grid.N = 5, 20, 80` (also `grid.T`, `grid.H`). Keys may appear at
//! most once and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::DEFAULT_EPSILON_GUARD;
use crate::error::{Error, Result};
use crate::fedsgd::{EtaRule, RunConfig, DEFAULT_HISTORY_WINDOW};
use crate::loss::{DataConfig, GradientSampling, LossKind, LossModel, Partition};
use crate::staleness::{self, StalenessMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Staleness,
    Lemma1,
    Theorem,
    Sweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Staleness => "staleness",
            Mode::Lemma1 => "lemma1",
            Mode::Theorem => "theorem",
            Mode::Sweep => "sweep",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "train" => Mode::Train,
            "staleness" => Mode::Staleness,
            "lemma1" => Mode::Lemma1,
            "theorem" => Mode::Theorem,
            "sweep" => Mode::Sweep,
            _ => return Err(format!("unknown mode `{s}`")),
        })
    }
}

const KEYS: &[&str] = &[
    "name",
    "mode",
    "K",
    "N",
    "H",
    "T",
    "eta",
    "model",
    "lambda",
    "d",
    "n_per_client",
    "partition",
    "noise_std",
    "identical_points",
    "data_seed",
    "seed",
    "seeds",
    "staleness",
    "warm_start",
    "w0",
    "record_w",
    "history_window",
    "replicates",
    "t_max",
    "epsilon_guard",
    "grad_threshold",
    "sigma2_draws",
    "tv_threshold",
    "max_l",
    "assert_scaling",
    "out",
    "grid.N",
    "grid.T",
    "grid.H",
];

/// A validated experiment description with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: Option<Mode>,
    pub run: RunConfig,
    /// Number of replicate seeds, starting at `run.seed`.
    pub seeds: usize,
    /// Whether `staleness` was set explicitly.
    pub staleness_explicit: bool,
    pub grid_n: Vec<usize>,
    pub grid_t: Vec<usize>,
    pub grid_h: Vec<usize>,
    pub replicates: usize,
    pub t_max: usize,
    pub epsilon_guard: f64,
    pub grad_threshold: f64,
    pub sigma2_draws: usize,
    pub tv_threshold: f64,
    pub max_l: usize,
    pub assert_scaling: bool,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn beta(&self) -> f64 {
        self.run.beta()
    }

    /// Sorted `key=value` lines of every resolved field.
    pub fn canonical(&self) -> String {
        let r = &self.run;
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        m.insert("name", self.name.clone());
        m.insert("mode", self.mode.map_or("-".into(), |m| m.as_str().into()));
        m.insert("K", r.clients.to_string());
        m.insert("N", r.per_round.to_string());
        m.insert("H", r.local_steps.to_string());
        m.insert("T", r.rounds.to_string());
        m.insert(
            "eta",
            match r.eta {
                EtaRule::Fixed(e) => format!("{e:e}"),
                EtaRule::Theorem => "theorem".into(),
            },
        );
        m.insert("model", r.model.kind.as_str().into());
        m.insert("lambda", format!("{:e}", r.model.lambda));
        m.insert("d", r.data.dim.to_string());
        m.insert("n_per_client", r.data.points_per_client.to_string());
        m.insert("partition", r.data.partition.as_str().into());
        m.insert("noise_std", format!("{:e}", r.data.noise_std));
        m.insert("identical_points", r.data.identical_points.to_string());
        m.insert("data_seed", r.data.seed.to_string());
        m.insert("seed", r.seed.to_string());
        m.insert("seeds", self.seeds.to_string());
        m.insert("staleness", r.staleness.as_str().into());
        m.insert("warm_start", r.warm_start.to_string());
        m.insert(
            "w0",
            r.w0.as_ref().map_or("0".into(), |w| {
                w.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
            }),
        );
        m.insert("record_w", r.record_w.to_string());
        m.insert("history_window", r.history_window.to_string());
        m.insert("replicates", self.replicates.to_string());
        m.insert("t_max", self.t_max.to_string());
        m.insert("epsilon_guard", format!("{:e}", self.epsilon_guard));
        m.insert("grad_threshold", format!("{:e}", self.grad_threshold));
        m.insert("sigma2_draws", self.sigma2_draws.to_string());
        m.insert("tv_threshold", format!("{:e}", self.tv_threshold));
        m.insert("max_l", self.max_l.to_string());
        m.insert("assert_scaling", self.assert_scaling.to_string());
        m.insert("grid.N", list(&self.grid_n));
        m.insert("grid.T", list(&self.grid_t));
        m.insert("grid.H", list(&self.grid_h));
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// SHA-256 of [`canonical`](Self::canonical), lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_spec(&text)
}

struct Entry {
    line: usize,
    value: String,
}

struct Raw(BTreeMap<String, Entry>);

impl Raw {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Parse {
                line: e.line,
                message: format!("invalid value `{}` for `{key}`: {err}", e.value),
            }),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(e) = self.0.get(key) else {
            return Ok(None);
        };
        let items = e
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>().map_err(|err| Error::Parse {
                    line: e.line,
                    message: format!("invalid entry `{s}` in `{key}`: {err}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::config(format!("grid axis `{key}` must not be empty")));
        }
        Ok(Some(items))
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>, expected: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(e) => f(&e.value).map(Some).ok_or_else(|| Error::Parse {
                line: e.line,
                message: format!("invalid value `{}` for `{key}`: expected {expected}", e.value),
            }),
        }
    }
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let mut raw = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown key `{key}`"),
            });
        }
        if raw.contains_key(key) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
        raw.insert(
            key.to_string(),
            Entry {
                line: line_no,
                value: value.trim().to_string(),
            },
        );
    }
    build(Raw(raw))
}

fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("missing required key `{key}`")))
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn build(raw: Raw) -> Result<ExperimentSpec> {
    let name: String = raw.get("name")?.unwrap_or_else(|| "experiment".to_string());
    if name.is_empty()
        || name == "."
        || name == ".."
        || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
    {
        return Err(Error::config(format!(
            "name `{name}` is not a valid path segment (use letters, digits, `-`, `_`, `.`)"
        )));
    }
    let mode = raw.get::<Mode>("mode")?;
    let clients: usize = required(raw.get("K")?, "K")?;
    let per_round: usize = required(raw.get("N")?, "N")?;
    let rounds: usize = required(raw.get("T")?, "T")?;
    let kind = required(
        raw.parse_with(
            "model",
            |s| match s {
                "quadratic" => Some(LossKind::Quadratic),
                "logistic" => Some(LossKind::Logistic),
                _ => None,
            },
            "quadratic or logistic",
        )?,
        "model",
    )?;
    if clients < 1 {
        return Err(Error::config("K must be at least 1"));
    }
    if per_round < 1 || per_round > clients {
        return Err(Error::config(format!(
            "N must satisfy 1 <= N <= K (got N = {per_round}, K = {clients})"
        )));
    }
    let lambda: f64 = raw.get("lambda")?.unwrap_or(0.0);
    let model = LossModel::new(kind, lambda)?;
    let eta = raw
        .parse_with(
            "eta",
            |s| {
                if s == "theorem" {
                    Some(EtaRule::Theorem)
                } else {
                    s.parse::<f64>().ok().map(EtaRule::Fixed)
                }
            },
            "a positive number or `theorem`",
        )?
        .unwrap_or(EtaRule::Theorem);
    let partition = raw
        .parse_with(
            "partition",
            |s| match s {
                "iid" => Some(Partition::Iid),
                "label_skew" => Some(Partition::LabelSkew),
                _ => None,
            },
            "iid or label_skew",
        )?
        .unwrap_or(Partition::Iid);
    let staleness_mode = raw.parse_with(
        "staleness",
        |s| match s {
            "emergent" => Some(StalenessMode::Emergent),
            "synthetic" => Some(StalenessMode::Synthetic),
            _ => None,
        },
        "emergent or synthetic",
    )?;
    let dim: usize = raw.get("d")?.unwrap_or(5);
    let w0 = match raw.0.get("w0") {
        None => None,
        Some(e) => {
            let vals = e
                .value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|err| Error::Parse {
                    line: e.line,
                    message: format!("invalid w0 `{}`: {err}", e.value),
                })?;
            // A single value fills every coordinate.
            Some(if vals.len() == 1 { vec![vals[0]; dim] } else { vals })
        }
    };

    let data = DataConfig {
        clients,
        points_per_client: raw.get("n_per_client")?.unwrap_or(20),
        dim,
        partition,
        noise_std: raw.get("noise_std")?.unwrap_or(0.0),
        identical_points: raw.parse_with("identical_points", parse_bool, "true or false")?.unwrap_or(false),
        seed: raw.get("data_seed")?.unwrap_or(0),
    };
    let run = RunConfig {
        clients,
        per_round,
        local_steps: raw.get("H")?.unwrap_or(1),
        rounds,
        eta,
        model,
        data,
        staleness: staleness_mode.unwrap_or(StalenessMode::Emergent),
        seed: raw.get("seed")?.unwrap_or(0),
        warm_start: raw.parse_with("warm_start", parse_bool, "true or false")?.unwrap_or(false),
        w0,
        record_w: raw.parse_with("record_w", parse_bool, "true or false")?.unwrap_or(false),
        history_window: raw.get("history_window")?.unwrap_or(DEFAULT_HISTORY_WINDOW),
        sampling: GradientSampling::WithReplacement,
    };
    run.validate()?;
    if run.data.points_per_client < 1 || run.data.dim < 1 {
        return Err(Error::config("n_per_client and d must be at least 1"));
    }

    let seeds: usize = raw.get("seeds")?.unwrap_or(1);
    if seeds < 1 {
        return Err(Error::config("seeds must be at least 1"));
    }
    let grid_n = raw.list("grid.N")?.unwrap_or_else(|| vec![per_round]);
    for &n in &grid_n {
        if n < 1 || n > clients {
            return Err(Error::config(format!(
                "grid.N entry {n} must satisfy 1 <= N <= K = {clients}"
            )));
        }
    }
    let grid_t = raw.list("grid.T")?.unwrap_or_else(|| vec![rounds]);
    let grid_h = raw.list("grid.H")?.unwrap_or_else(|| vec![run.local_steps]);
    if grid_h.contains(&0) {
        return Err(Error::config("grid.H entries must be at least 1"));
    }
    let spec = ExperimentSpec {
        name,
        mode,
        seeds,
        staleness_explicit: staleness_mode.is_some(),
        grid_n,
        grid_t,
        grid_h,
        replicates: raw.get("replicates")?.unwrap_or(2000),
        t_max: raw.get("t_max")?.unwrap_or(20),
        epsilon_guard: raw.get("epsilon_guard")?.unwrap_or(DEFAULT_EPSILON_GUARD),
        grad_threshold: raw.get("grad_threshold")?.unwrap_or(1e-4),
        sigma2_draws: raw.get("sigma2_draws")?.unwrap_or(200),
        tv_threshold: raw.get("tv_threshold")?.unwrap_or(0.01),
        max_l: raw.get("max_l")?.unwrap_or(100),
        assert_scaling: raw.parse_with("assert_scaling", parse_bool, "true or false")?.unwrap_or(false),
        out: raw.get::<String>("out")?.map_or_else(|| PathBuf::from("out"), PathBuf::from),
        run,
    };
    debug_assert!((spec.beta() - staleness::beta(clients, per_round)).abs() == 0.0);
    Ok(spec)
}
