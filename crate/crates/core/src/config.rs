//! Experiment configuration as flat `section.key=value` text.
//!
//! Every key has a default, so an empty file is a valid config. Parsing
//! collects every problem (unknown keys, duplicates, bad values, cross-field
//! violations) before reporting, and serialization is canonical: all keys,
//! sorted, one per line. The config hash is SHA-256 of that canonical form.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{Builtin, NoiseSpec};
use crate::error::{Error, Result};
use crate::net::{Arch, CoeffSpec};
use crate::oracle::OdeGrid;
use crate::schedule::{split_batch, RProfile, TimeSampler};
use crate::train::{LossConfig, LrSchedule, Weighting};

/// Default key set and values.
const DEFAULTS: &[(&str, &str)] = &[
    ("arch.fourier", "64"),
    ("arch.fourier_scale", "1"),
    ("arch.hidden", "256,256,256"),
    ("ckpt.every", "2000"),
    ("data.d", "2"),
    ("data.n", "2048"),
    ("data.name", "ring8"),
    ("data.path", ""),
    ("data.seed", "7"),
    ("ema.beta", "0.999"),
    ("eval.n", "2048"),
    ("eval.t_grid", "0.2,0.5,1,2,5,80"),
    ("eval.t_mid", "auto"),
    ("guard.grad_ceiling", "100"),
    ("guard.patience", "10"),
    ("log.every", "100"),
    ("log.wall_clock", "true"),
    ("loss.c", "auto"),
    ("loss.rho", "0.25"),
    ("loss.w_b", "0.1"),
    ("loss.weighting", "unit"),
    ("noise.sigma_data", "0.5"),
    ("noise.t_max", "80"),
    ("noise.t_min", "0.002"),
    ("oracle.grid", "geometric"),
    ("oracle.rho", "7"),
    ("oracle.steps", "400"),
    ("schedule.base", "2"),
    ("schedule.period", "25000"),
    ("schedule.r_cap", "0.999"),
    ("seed", "0"),
    ("stage1.batch", "256"),
    ("stage1.iters", "20000"),
    ("stage1.lr", "0.0003"),
    ("stage1.time.mu", "-1.1"),
    ("stage1.time.sigma", "2"),
    ("stage2.batch", "256"),
    ("stage2.iters", "10000"),
    ("stage2.lr", "0.0005"),
    ("stage2.t_ref", "8000"),
    ("time.kind", "log-student-t"),
    ("time.mu", "auto"),
    ("time.nu", "0.01"),
    ("time.sigma", "0.2"),
    ("time.t_prime", "1"),
];

/// Keys holding lists; these cannot be swept.
const LIST_KEYS: &[&str] = &["arch.hidden", "eval.t_grid"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2TimeKind {
    LogStudentT,
    /// Truncated log-normal (the `ν → ∞` limit).
    LogNormal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// Load points from here instead of generating `name`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub time_mu: f64,
    pub time_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub lr: f64,
    pub t_ref: f64,
    pub iters: u64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeConfig {
    pub kind: Stage2TimeKind,
    /// `None` means `ln t'`.
    pub mu: Option<f64>,
    pub sigma: f64,
    pub nu: f64,
    pub t_prime: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n: usize,
    pub t_grid: Vec<f64>,
    /// `None` means `t'`.
    pub t_mid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub oracle_steps: usize,
    pub oracle_grid: OdeGrid,
    /// Kept even for the geometric grid so the config round-trips.
    pub oracle_rho: f64,
    pub arch: Arch,
    /// `None` means `0.03·√d`.
    pub loss_c: Option<f64>,
    pub weighting: Weighting,
    pub w_b: f64,
    pub rho: f64,
    pub time: TimeConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub schedule_base: f64,
    pub schedule_period: u64,
    pub r_cap: f64,
    pub ema_beta: f64,
    pub log_every: u64,
    pub log_wall_clock: bool,
    pub ckpt_every: u64,
    pub eval: EvalConfig,
    pub grad_ceiling: f64,
    pub patience: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from_map(&BTreeMap::new()).expect("defaults are valid")
    }
}

struct Reader<'a> {
    map: BTreeMap<&'a str, &'a str>,
    errs: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.map[key]
    }

    fn get<T>(&mut self, key: &str) -> T
    where
        T: FromStr + Default,
        T::Err: Display,
    {
        match self.raw(key).trim().parse() {
            Ok(v) => v,
            Err(e) => {
                self.errs
                    .push(format!("{key}: cannot parse {:?} ({e})", self.raw(key)));
                T::default()
            }
        }
    }

    fn auto_f64(&mut self, key: &str) -> Option<f64> {
        if self.raw(key).trim() == "auto" {
            None
        } else {
            Some(self.get(key))
        }
    }

    fn list<T: FromStr + Default>(&mut self, key: &str) -> Vec<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key).to_string();
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.parse() {
                Ok(v) => out.push(v),
                Err(e) => self
                    .errs
                    .push(format!("{key}: cannot parse element {part:?} ({e})")),
            }
        }
        out
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errs.push(msg());
        }
    }
}

fn fmt_list<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl TrainConfig {
    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut errs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                ));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), v).is_some() {
                errs.push(format!("{k}: given more than once"));
            }
        }
        map.retain(|k, _| {
            let known = DEFAULTS.iter().any(|(d, _)| d == k);
            if !known {
                errs.push(format!("{k}: unknown key"));
            }
            known
        });
        match Self::from_map(&map) {
            Ok(cfg) if errs.is_empty() => Ok(cfg),
            Ok(_) => Err(Error::Config(errs)),
            Err(Error::Config(more)) => {
                errs.extend(more);
                Err(Error::Config(errs))
            }
            Err(e) => Err(e),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn from_map(overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
        for (k, v) in overrides {
            map.insert(k.as_str(), v.as_str());
        }
        let mut r = Reader {
            map,
            errs: Vec::new(),
        };

        let name: String = r.raw("data.name").to_string();
        let path = r.raw("data.path").trim().to_string();
        let data = DataConfig {
            name,
            n: r.get("data.n"),
            d: r.get("data.d"),
            seed: r.get("data.seed"),
            path: (!path.is_empty()).then(|| PathBuf::from(path)),
        };
        if data.path.is_none() {
            if let Err(e) = data.name.parse::<Builtin>() {
                r.errs.push(format!("data.name: {e}"));
            }
        }
        let noise = NoiseSpec {
            t_min: r.get("noise.t_min"),
            t_max: r.get("noise.t_max"),
            sigma_data: r.get("noise.sigma_data"),
        };
        if let Err(Error::Config(e)) = noise.validate() {
            r.errs.extend(e);
        }
        let oracle_rho: f64 = r.get("oracle.rho");
        let oracle_grid = match r.raw("oracle.grid").trim() {
            "geometric" => OdeGrid::Geometric,
            "edm" => OdeGrid::Edm { rho: oracle_rho },
            other => {
                r.errs.push(format!(
                    "oracle.grid: expected geometric or edm, got {other:?}"
                ));
                OdeGrid::Geometric
            }
        };
        let arch = Arch {
            dim: data.d,
            hidden: r.list("arch.hidden"),
            fourier: r.get("arch.fourier"),
            fourier_scale: r.get("arch.fourier_scale"),
        };
        if let Err(Error::Config(e)) = arch.validate() {
            r.errs.extend(e);
        }
        let weighting = Weighting::parse(r.raw("loss.weighting").trim()).unwrap_or_else(|| {
            r.errs.push(format!(
                "loss.weighting: expected unit or dt-over-cout2, got {:?}",
                r.raw("loss.weighting")
            ));
            Weighting::Unit
        });
        let kind = match r.raw("time.kind").trim() {
            "log-student-t" => Stage2TimeKind::LogStudentT,
            "log-normal" => Stage2TimeKind::LogNormal,
            other => {
                r.errs.push(format!(
                    "time.kind: expected log-student-t or log-normal, got {other:?}"
                ));
                Stage2TimeKind::LogStudentT
            }
        };
        let log_wall_clock = match r.raw("log.wall_clock").trim() {
            "true" => true,
            "false" => false,
            other => {
                r.errs.push(format!(
                    "log.wall_clock: expected true or false, got {other:?}"
                ));
                true
            }
        };
        let cfg = TrainConfig {
            seed: r.get("seed"),
            oracle_steps: r.get("oracle.steps"),
            oracle_grid,
            oracle_rho,
            arch,
            loss_c: r.auto_f64("loss.c"),
            weighting,
            w_b: r.get("loss.w_b"),
            rho: r.get("loss.rho"),
            time: TimeConfig {
                kind,
                mu: r.auto_f64("time.mu"),
                sigma: r.get("time.sigma"),
                nu: r.get("time.nu"),
                t_prime: r.get("time.t_prime"),
            },
            stage1: Stage1Config {
                lr: r.get("stage1.lr"),
                iters: r.get("stage1.iters"),
                batch: r.get("stage1.batch"),
                time_mu: r.get("stage1.time.mu"),
                time_sigma: r.get("stage1.time.sigma"),
            },
            stage2: Stage2Config {
                lr: r.get("stage2.lr"),
                t_ref: r.get("stage2.t_ref"),
                iters: r.get("stage2.iters"),
                batch: r.get("stage2.batch"),
            },
            schedule_base: r.get("schedule.base"),
            schedule_period: r.get("schedule.period"),
            r_cap: r.get("schedule.r_cap"),
            ema_beta: r.get("ema.beta"),
            log_every: r.get("log.every"),
            log_wall_clock,
            ckpt_every: r.get("ckpt.every"),
            eval: EvalConfig {
                n: r.get("eval.n"),
                t_grid: r.list("eval.t_grid"),
                t_mid: r.auto_f64("eval.t_mid"),
            },
            grad_ceiling: r.get("guard.grad_ceiling"),
            patience: r.get("guard.patience"),
            noise,
            data,
        };
        cfg.cross_checks(&mut r);
        if r.errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(r.errs))
        }
    }

    fn cross_checks(&self, r: &mut Reader) {
        let (t_min, t_max) = (self.noise.t_min, self.noise.t_max);
        r.check(self.data.n >= 2, || {
            format!("data.n: need at least 2 points, got {}", self.data.n)
        });
        r.check(self.oracle_steps >= 1, || {
            "oracle.steps: must be positive".into()
        });
        r.check(self.oracle_rho > 0.0, || {
            format!("oracle.rho: must be positive, got {}", self.oracle_rho)
        });
        if let Some(c) = self.loss_c {
            r.check(c >= 0.0 && c.is_finite(), || {
                format!("loss.c: must be non-negative, got {c}")
            });
        }
        r.check(self.w_b >= 0.0 && self.w_b.is_finite(), || {
            format!("loss.w_b: must be non-negative, got {}", self.w_b)
        });
        if let Err(Error::Config(e)) = split_batch(self.stage2.batch, self.rho) {
            r.errs.extend(e);
        }
        let tp = self.time.t_prime;
        r.check(tp > t_min && tp < t_max, || {
            format!("time.t_prime: must lie in (t_min, t_max), got {tp}")
        });
        r.check(self.time.sigma > 0.0, || {
            format!("time.sigma: must be positive, got {}", self.time.sigma)
        });
        r.check(self.time.nu > 0.0, || {
            format!("time.nu: must be positive, got {}", self.time.nu)
        });
        r.check(self.stage1.time_sigma >= 0.0, || {
            format!(
                "stage1.time.sigma: must be non-negative, got {}",
                self.stage1.time_sigma
            )
        });
        for (key, lr) in [("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr)] {
            r.check(lr > 0.0 && lr.is_finite(), || {
                format!("{key}: must be positive, got {lr}")
            });
        }
        r.check(self.stage2.t_ref > 0.0, || {
            format!("stage2.t_ref: must be positive, got {}", self.stage2.t_ref)
        });
        r.check(self.stage1.batch >= 1, || {
            "stage1.batch: must be positive".into()
        });
        if let Err(Error::Config(e)) = self.stage1_profile().validate() {
            r.errs.extend(e);
        }
        r.check((0.0..=1.0).contains(&self.ema_beta), || {
            format!("ema.beta: must lie in [0, 1], got {}", self.ema_beta)
        });
        r.check(self.log_every >= 1, || "log.every: must be positive".into());
        r.check(self.ckpt_every >= 1, || {
            "ckpt.every: must be positive".into()
        });
        r.check(self.eval.n >= 1, || "eval.n: must be positive".into());
        r.check(!self.eval.t_grid.is_empty(), || {
            "eval.t_grid: must not be empty".into()
        });
        r.check(self.eval.t_grid.windows(2).all(|w| w[0] < w[1]), || {
            "eval.t_grid: must be strictly increasing".into()
        });
        r.check(
            self.eval.t_grid.iter().all(|&t| t >= t_min && t <= t_max),
            || format!("eval.t_grid: times must lie in [{t_min}, {t_max}]"),
        );
        if let Some(tm) = self.eval.t_mid {
            r.check(tm > t_min && tm < t_max, || {
                format!("eval.t_mid: must lie in (t_min, t_max), got {tm}")
            });
        }
        r.check(self.grad_ceiling > 0.0, || {
            format!(
                "guard.grad_ceiling: must be positive, got {}",
                self.grad_ceiling
            )
        });
        r.check(self.patience >= 1, || {
            "guard.patience: must be positive".into()
        });
    }

    /// Every key with its value, sorted.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let grid = match self.oracle_grid {
            OdeGrid::Geometric => "geometric",
            OdeGrid::Edm { .. } => "edm",
        };
        let entries: Vec<(&str, String)> = vec![
            ("arch.fourier", self.arch.fourier.to_string()),
            ("arch.fourier_scale", self.arch.fourier_scale.to_string()),
            ("arch.hidden", fmt_list(&self.arch.hidden)),
            ("ckpt.every", self.ckpt_every.to_string()),
            ("data.d", self.data.d.to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.name", self.data.name.clone()),
            (
                "data.path",
                self.data
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("data.seed", self.data.seed.to_string()),
            ("ema.beta", self.ema_beta.to_string()),
            ("eval.n", self.eval.n.to_string()),
            ("eval.t_grid", fmt_list(&self.eval.t_grid)),
            ("eval.t_mid", fmt_auto(self.eval.t_mid)),
            ("guard.grad_ceiling", self.grad_ceiling.to_string()),
            ("guard.patience", self.patience.to_string()),
            ("log.every", self.log_every.to_string()),
            ("log.wall_clock", self.log_wall_clock.to_string()),
            ("loss.c", fmt_auto(self.loss_c)),
            ("loss.rho", self.rho.to_string()),
            ("loss.w_b", self.w_b.to_string()),
            ("loss.weighting", self.weighting.name().to_string()),
            ("noise.sigma_data", self.noise.sigma_data.to_string()),
            ("noise.t_max", self.noise.t_max.to_string()),
            ("noise.t_min", self.noise.t_min.to_string()),
            ("oracle.grid", grid.to_string()),
            ("oracle.rho", self.oracle_rho.to_string()),
            ("oracle.steps", self.oracle_steps.to_string()),
            ("schedule.base", self.schedule_base.to_string()),
            ("schedule.period", self.schedule_period.to_string()),
            ("schedule.r_cap", self.r_cap.to_string()),
            ("seed", self.seed.to_string()),
            ("stage1.batch", self.stage1.batch.to_string()),
            ("stage1.iters", self.stage1.iters.to_string()),
            ("stage1.lr", self.stage1.lr.to_string()),
            ("stage1.time.mu", self.stage1.time_mu.to_string()),
            ("stage1.time.sigma", self.stage1.time_sigma.to_string()),
            ("stage2.batch", self.stage2.batch.to_string()),
            ("stage2.iters", self.stage2.iters.to_string()),
            ("stage2.lr", self.stage2.lr.to_string()),
            ("stage2.t_ref", self.stage2.t_ref.to_string()),
            (
                "time.kind",
                match self.time.kind {
                    Stage2TimeKind::LogStudentT => "log-student-t",
                    Stage2TimeKind::LogNormal => "log-normal",
                }
                .to_string(),
            ),
            ("time.mu", fmt_auto(self.time.mu)),
            ("time.nu", self.time.nu.to_string()),
            ("time.sigma", self.time.sigma.to_string()),
            ("time.t_prime", self.time.t_prime.to_string()),
        ];
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Canonical text form.
    pub fn serialize(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`serialize`](Self::serialize).
    pub fn hash(&self) -> String {
        Sha256::digest(self.serialize().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Copy with one key replaced and everything re-validated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Usage(format!("unknown config key {key:?}")));
        }
        let mut map = self.to_map();
        map.insert(key.to_string(), value.to_string());
        Self::from_map(&map)
    }

    pub fn is_scalar_key(key: &str) -> bool {
        DEFAULTS.iter().any(|(k, _)| *k == key) && !LIST_KEYS.contains(&key)
    }

    pub fn coeff(&self) -> CoeffSpec {
        CoeffSpec {
            sigma_data: self.noise.sigma_data,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut c = LossConfig::for_dim(self.data.d);
        if let Some(v) = self.loss_c {
            c.c = v;
        }
        c.weighting = self.weighting;
        c.w_b = self.w_b;
        c.rho = self.rho;
        c
    }

    pub fn stage1_profile(&self) -> RProfile {
        RProfile::Doubling {
            base: self.schedule_base,
            period: self.schedule_period,
            cap: self.r_cap,
        }
    }

    pub fn stage2_profile(&self) -> RProfile {
        RProfile::Constant(self.r_cap)
    }

    pub fn stage1_lr(&self) -> LrSchedule {
        LrSchedule::Constant(self.stage1.lr)
    }

    pub fn stage2_lr(&self) -> LrSchedule {
        LrSchedule::InverseSqrt {
            alpha_ref: self.stage2.lr,
            t_ref: self.stage2.t_ref,
        }
    }

    /// Consistency-time distribution of the second stage.
    pub fn stage2_sampler(&self) -> TimeSampler {
        let t_prime = self.time.t_prime;
        TimeSampler::LogStudentT {
            mu: self.time.mu.unwrap_or(t_prime.ln()),
            sigma: self.time.sigma,
            nu: match self.time.kind {
                Stage2TimeKind::LogStudentT => self.time.nu,
                Stage2TimeKind::LogNormal => f64::INFINITY,
            },
            t_prime,
        }
    }

    pub fn t_mid(&self) -> f64 {
        self.eval.t_mid.unwrap_or(self.time.t_prime)
    }
}
