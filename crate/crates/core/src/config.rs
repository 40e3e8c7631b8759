//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! ```text
//! mode = mlp_continual
//! data_dir = /data
//! seeds = 1, 2, 3
//! # everything else falls back to the mode's defaults
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::Schedule;
use crate::error::{Error, Result};
use crate::recorder::Dtype;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    MlpSingle,
    MlpJoint,
    MlpContinual,
    LmChar,
    LmWord,
}

impl Mode {
    pub fn is_language_model(self) -> bool {
        matches!(self, Mode::LmChar | Mode::LmWord)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::MlpSingle => "mlp_single",
            Mode::MlpJoint => "mlp_joint",
            Mode::MlpContinual => "mlp_continual",
            Mode::LmChar => "lm_char",
            Mode::LmWord => "lm_word",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp_single" => Mode::MlpSingle,
            "mlp_joint" => Mode::MlpJoint,
            "mlp_continual" => Mode::MlpContinual,
            "lm_char" => Mode::LmChar,
            "lm_word" => Mode::LmWord,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub data_dir: PathBuf,
    /// Relative paths resolve against `data_dir`.
    pub mnist_dir: PathBuf,
    pub fashion_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dtype: Dtype,
    pub lr: f32,
    pub batch_size: usize,
    /// Image modes.
    pub schedule: Schedule,
    pub hidden_dims: Vec<usize>,
    pub eval_every: usize,
    /// Language-model modes.
    pub steps: usize,
    pub segment_len: usize,
    pub clip_norm: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub held_out_fraction: f64,
    pub eval_tokens: usize,
    /// Required vocabulary size of a character corpus; 0 disables the check.
    pub expect_vocab: usize,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let lm = mode.is_language_model();
        let schedule = match mode {
            Mode::MlpJoint => "0+1:5000",
            Mode::MlpContinual => "0:3000,1:3000",
            _ => "0:3000",
        };
        RunConfig {
            mode,
            data_dir: PathBuf::from("data"),
            mnist_dir: PathBuf::from("mnist"),
            fashion_dir: PathBuf::from("fashion-mnist"),
            corpus: match mode {
                Mode::LmChar => Some(PathBuf::from("aesop.txt")),
                Mode::LmWord => Some(PathBuf::from("wikitext-2/wiki.train.tokens")),
                _ => None,
            },
            out_dir: PathBuf::from("runs"),
            seeds: vec![1],
            dtype: Dtype::F32,
            lr: if lm { 1.0 } else { 0.1 },
            batch_size: if lm { 16 } else { 128 },
            schedule: schedule.parse().expect("built-in schedule"),
            hidden_dims: vec![800, 800],
            eval_every: 500,
            steps: match mode {
                Mode::LmChar => 400,
                Mode::LmWord => 2000,
                _ => 0,
            },
            segment_len: if mode == Mode::LmWord { 35 } else { 128 },
            clip_norm: 5.0,
            embed_dim: if mode == Mode::LmWord { 200 } else { 64 },
            hidden_dim: if mode == Mode::LmWord { 200 } else { 1024 },
            held_out_fraction: 0.05,
            eval_tokens: 20_000,
            expect_vocab: if mode == Mode::LmChar { 107 } else { 0 },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim().to_string();
            if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let mode: Mode = pairs
            .remove("mode")
            .ok_or_else(|| Error::Config("missing required key `mode`".into()))?
            .parse()?;
        let mut cfg = RunConfig::defaults(mode);
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for `{key}`")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "data_dir" => self.data_dir = value.into(),
            "mnist_dir" => self.mnist_dir = value.into(),
            "fashion_dir" => self.fashion_dir = value.into(),
            "corpus" => self.corpus = Some(value.into()),
            "out" | "out_dir" => self.out_dir = value.into(),
            "seed" => self.seeds = vec![num(key, value)?],
            "seeds" => self.seeds = list(key, value)?,
            "dtype" => self.dtype = value.parse().map_err(|_| Error::Config(format!("bad dtype {value:?}")))?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "hidden_dims" => self.hidden_dims = list(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "steps" => {
                let steps: usize = num(key, value)?;
                self.steps = steps;
                if !self.mode.is_language_model() {
                    // a bare step count rescales every phase of the schedule
                    let phases = self.schedule.0.iter().map(|p| crate::dataio::Phase {
                        tasks: p.tasks.clone(),
                        steps,
                    });
                    self.schedule = Schedule(phases.collect());
                }
            }
            "segment_len" => self.segment_len = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "held_out_fraction" => self.held_out_fraction = num(key, value)?,
            "eval_tokens" => self.eval_tokens = num(key, value)?,
            "expect_vocab" => self.expect_vocab = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("`lr` must be positive");
        }
        if self.batch_size == 0 || self.batch_size > usize::from(u16::MAX) + 1 {
            return bad("`batch_size` must be between 1 and 65536");
        }
        if self.mode.is_language_model() {
            if self.corpus.is_none() {
                return bad("language-model modes need `corpus`");
            }
            if self.segment_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
                return bad("`segment_len`, `embed_dim` and `hidden_dim` must be positive");
            }
            if !(0.0..1.0).contains(&self.held_out_fraction) {
                return bad("`held_out_fraction` must be in [0, 1)");
            }
        } else {
            if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
                return bad("`hidden_dims` must list positive widths");
            }
            let tasks = self.schedule.tasks();
            if tasks.iter().any(|&t| t > 1) {
                return bad("image schedules may only use task 0 (MNIST) and 1 (Fashion-MNIST)");
            }
            let expected = match self.mode {
                Mode::MlpSingle => self.schedule.0.len() == 1 && self.schedule.0[0].tasks.len() == 1,
                Mode::MlpJoint => self.schedule.0.len() == 1,
                _ => true,
            };
            if !expected {
                return bad(&format!("schedule {} does not fit mode {}", self.schedule, self.mode));
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn mnist_path(&self) -> PathBuf {
        self.resolve(&self.mnist_dir)
    }

    pub fn fashion_path(&self) -> PathBuf {
        self.resolve(&self.fashion_dir)
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.corpus.as_deref().map(|p| self.resolve(p))
    }

    /// Run directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}-seed{seed}", self.mode))
    }

    /// Serializes every key; `parse` of the result reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "mnist_dir = {}", self.mnist_dir.display());
        let _ = writeln!(s, "fashion_dir = {}", self.fashion_dir.display());
        if let Some(c) = &self.corpus {
            let _ = writeln!(s, "corpus = {}", c.display());
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "dtype = {}", self.dtype);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "schedule = {}", self.schedule);
        let dims: Vec<u64> = self.hidden_dims.iter().map(|&d| d as u64).collect();
        let _ = writeln!(s, "hidden_dims = {}", join(&dims));
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        if self.mode.is_language_model() {
            let _ = writeln!(s, "steps = {}", self.steps);
        }
        let _ = writeln!(s, "segment_len = {}", self.segment_len);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "held_out_fraction = {}", self.held_out_fraction);
        let _ = writeln!(s, "eval_tokens = {}", self.eval_tokens);
        let _ = writeln!(s, "expect_vocab = {}", self.expect_vocab);
        s
    }
}
