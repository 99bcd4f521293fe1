//! `key = value` configuration files. `#` starts a comment; blank lines are
//! ignored. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::device::{DeviceProfile, FaultParams};
use crate::error::ConfigError;
use crate::sensitivity::TargetScheme;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries.insert(key.to_string(), (line, value.to_string())).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// `none` or a value.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            Some("none") => Ok(None),
            Some(_) => self.get(key),
            None => Err(ConfigError::MissingKey(key.to_string())),
        }
    }
}

fn invalid(key: &str, value: impl Display, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

const PROFILE_KEYS: &[&str] = &[
    "reference_pairs",
    "boundary_intercept_mv",
    "boundary_slope_mv_per_mhz",
    "stress_scale_mv",
    "crash_stress_threshold",
    "no_response_stress_threshold",
    "stress_logistic_width",
    "stress_hazard_per_ms",
    "brownout_mv",
    "brownout_width_mv",
    "max_stable_mhz",
    "max_stable_width_mhz",
    "fault_rate",
    "max_bits_per_glitch",
    "cost_per_op_ms",
    "reference_mhz",
    "jitter_ms",
    "seed",
];

fn parse_pairs(v: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    v.split(',')
        .map(|p| {
            let (f, volt) = p.trim().split_once(':').ok_or_else(|| invalid("reference_pairs", p, "expected F:V"))?;
            let f = f.trim().parse().map_err(|_| invalid("reference_pairs", p, "bad frequency"))?;
            let volt = volt.trim().parse().map_err(|_| invalid("reference_pairs", p, "bad voltage"))?;
            Ok((f, volt))
        })
        .collect()
}

/// Parses a device profile; every key is required.
pub fn parse_profile(text: &str) -> Result<DeviceProfile, ConfigError> {
    let kv = KeyValues::parse(text, PROFILE_KEYS)?;
    let profile = DeviceProfile {
        reference_pairs: parse_pairs(kv.raw("reference_pairs").ok_or_else(|| ConfigError::MissingKey("reference_pairs".into()))?)?,
        boundary_intercept_mv: kv.require("boundary_intercept_mv")?,
        boundary_slope_mv_per_mhz: kv.require("boundary_slope_mv_per_mhz")?,
        stress_scale_mv: kv.require("stress_scale_mv")?,
        crash_stress_threshold: kv.require("crash_stress_threshold")?,
        no_response_stress_threshold: kv.require("no_response_stress_threshold")?,
        stress_logistic_width: kv.require("stress_logistic_width")?,
        stress_hazard_per_ms: kv.require("stress_hazard_per_ms")?,
        brownout_mv: kv.optional("brownout_mv")?,
        brownout_width_mv: kv.require("brownout_width_mv")?,
        max_stable_mhz: kv.optional("max_stable_mhz")?,
        max_stable_width_mhz: kv.require("max_stable_width_mhz")?,
        fault_rate: kv.require("fault_rate")?,
        max_bits_per_glitch: kv.optional("max_bits_per_glitch")?,
        cost_per_op_ms: kv.require("cost_per_op_ms")?,
        reference_mhz: kv.require("reference_mhz")?,
        jitter_ms: kv.require("jitter_ms")?,
        seed: kv.require("seed")?,
    };
    profile.validate().map_err(|e| invalid("profile", "", &e.to_string()))?;
    Ok(profile)
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

pub fn format_profile(p: &DeviceProfile) -> String {
    let pairs: Vec<String> = p.reference_pairs.iter().map(|(f, v)| format!("{f}:{v}")).collect();
    let rows = [
        ("reference_pairs", pairs.join(", ")),
        ("boundary_intercept_mv", p.boundary_intercept_mv.to_string()),
        ("boundary_slope_mv_per_mhz", p.boundary_slope_mv_per_mhz.to_string()),
        ("stress_scale_mv", p.stress_scale_mv.to_string()),
        ("crash_stress_threshold", p.crash_stress_threshold.to_string()),
        ("no_response_stress_threshold", p.no_response_stress_threshold.to_string()),
        ("stress_logistic_width", p.stress_logistic_width.to_string()),
        ("stress_hazard_per_ms", p.stress_hazard_per_ms.to_string()),
        ("brownout_mv", opt(&p.brownout_mv)),
        ("brownout_width_mv", p.brownout_width_mv.to_string()),
        ("max_stable_mhz", opt(&p.max_stable_mhz)),
        ("max_stable_width_mhz", p.max_stable_width_mhz.to_string()),
        ("fault_rate", p.fault_rate.to_string()),
        ("max_bits_per_glitch", opt(&p.max_bits_per_glitch)),
        ("cost_per_op_ms", p.cost_per_op_ms.to_string()),
        ("reference_mhz", p.reference_mhz.to_string()),
        ("jitter_ms", p.jitter_ms.to_string()),
        ("seed", p.seed.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// How targets are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Dependent,
    Independent,
    Random,
}

impl FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dep" | "dependent" => Ok(SearchMode::Dependent),
            "indep" | "independent" => Ok(SearchMode::Independent),
            "random" => Ok(SearchMode::Random),
            _ => Err("expected dep, indep or random".into()),
        }
    }
}

/// How faults are delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Device,
    Precise,
}

impl FromStr for Delivery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "device" => Ok(Delivery::Device),
            "precise" => Ok(Delivery::Precise),
            _ => Err("expected device or precise".into()),
        }
    }
}

const CAMPAIGN_KEYS: &[&str] = &[
    "model",
    "test_images",
    "test_labels",
    "train_images",
    "train_labels",
    "profile",
    "inputs",
    "search",
    "n",
    "granularity",
    "target_class",
    "delivery",
    "sample_size",
    "sample_seed",
    "f_c",
    "v_c",
    "f_g",
    "v_g",
    "f_h",
    "v_l",
    "t_w",
    "t_d",
    "trials",
    "seed",
    "random_offset_min",
    "random_offset_max",
    "random_v_min",
    "random_v_max",
    "random_td_min",
    "random_td_max",
    "random_glitches",
    "ga_population",
    "ga_generations",
    "ga_fitness_trials",
    "ga_mutation_probability",
    "ga_max_selections",
    "ga_target_fitness",
    "ga_f_h_range",
    "ga_v_l_range",
    "ga_t_w_range",
    "ga_t_d_range",
    "ga_spread",
];

/// A campaign description. Paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub model: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub profile: PathBuf,
    /// Number of test inputs used; trial `i` attacks input `i mod inputs`.
    pub inputs: usize,
    pub search: SearchMode,
    pub n: usize,
    pub scheme: TargetScheme,
    pub target_class: Option<usize>,
    pub delivery: Delivery,
    pub sample_size: usize,
    pub sample_seed: u64,
    pub params: FaultParams,
    pub trials: usize,
    pub seed: u64,
    pub random_offset: (f64, f64),
    pub random_v: (f64, f64),
    pub random_td: (f64, f64),
    pub random_glitches: u32,
    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_fitness_trials: usize,
    pub ga_mutation_probability: f64,
    pub ga_max_selections: u32,
    pub ga_target_fitness: Option<f64>,
    /// Inclusive ranges for F_h, V_l, T_W, T_d.
    pub ga_ranges: [(f64, f64); 4],
    /// Initial perturbation half-widths for F_h, V_l, T_W, T_d.
    pub ga_spread: [f64; 4],
}

fn range(kv: &KeyValues, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
    let Some(v) = kv.raw(key) else {
        return Ok(default);
    };
    let (a, b) = v.split_once("..").ok_or_else(|| invalid(key, v, "expected LO..HI"))?;
    let lo: f64 = a.trim().parse().map_err(|_| invalid(key, v, "bad lower bound"))?;
    let hi: f64 = b.trim().parse().map_err(|_| invalid(key, v, "bad upper bound"))?;
    if !(lo <= hi) {
        return Err(invalid(key, v, "empty range"));
    }
    Ok((lo, hi))
}

fn list4(kv: &KeyValues, key: &str, default: [f64; 4]) -> Result<[f64; 4], ConfigError> {
    let Some(v) = kv.raw(key) else {
        return Ok(default);
    };
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(key, v, "expected four numbers"))?;
    parts.try_into().map_err(|_| invalid(key, v, "expected four numbers"))
}

impl CampaignConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text, CAMPAIGN_KEYS)?;
        let path = |key: &str| -> Result<Option<PathBuf>, ConfigError> { Ok(kv.get::<String>(key)?.map(|p| base_dir.join(p))) };
        let need = |key: &str| -> Result<PathBuf, ConfigError> { path(key)?.ok_or_else(|| ConfigError::MissingKey(key.to_string())) };
        let params = FaultParams {
            f_c: kv.get_or("f_c", 3000.0)?,
            v_c: kv.get_or("v_c", 1100.0)?,
            f_g: kv.get_or("f_g", 1500.0)?,
            v_g: kv.get_or("v_g", 800.0)?,
            f_h: kv.get_or("f_h", 1735.0)?,
            v_l: kv.get_or("v_l", 710.0)?,
            t_w: kv.get_or("t_w", 0.0)?,
            t_d: kv.get_or("t_d", 2.0)?,
        };
        let cfg = Self {
            model: need("model")?,
            test_images: need("test_images")?,
            test_labels: need("test_labels")?,
            train_images: path("train_images")?,
            train_labels: path("train_labels")?,
            profile: need("profile")?,
            inputs: kv.get_or("inputs", 100)?,
            search: kv.get_or("search", SearchMode::Dependent)?,
            n: kv.get_or("n", 10)?,
            scheme: kv.get_or("granularity", TargetScheme::Element)?,
            target_class: kv.get("target_class")?,
            delivery: kv.get_or("delivery", Delivery::Device)?,
            sample_size: kv.get_or("sample_size", 256)?,
            sample_seed: kv.get_or("sample_seed", 0)?,
            params,
            trials: kv.get_or("trials", 1000)?,
            seed: kv.get_or("seed", 0)?,
            random_offset: (kv.get_or("random_offset_min", 10.0)?, kv.get_or("random_offset_max", 300.0)?),
            random_v: (kv.get_or("random_v_min", 650.0)?, kv.get_or("random_v_max", 800.0)?),
            random_td: (kv.get_or("random_td_min", 1.0)?, kv.get_or("random_td_max", 4.0)?),
            random_glitches: kv.get_or("random_glitches", 1)?,
            ga_population: kv.get_or("ga_population", 32)?,
            ga_generations: kv.get_or("ga_generations", 200)?,
            ga_fitness_trials: kv.get_or("ga_fitness_trials", 50)?,
            ga_mutation_probability: kv.get_or("ga_mutation_probability", 0.005)?,
            ga_max_selections: kv.get_or("ga_max_selections", 20)?,
            ga_target_fitness: kv.get("ga_target_fitness")?,
            ga_ranges: [
                range(&kv, "ga_f_h_range", (1510.0, 2000.0))?,
                range(&kv, "ga_v_l_range", (600.0, 800.0))?,
                range(&kv, "ga_t_w_range", (0.0, 1.0e6))?,
                range(&kv, "ga_t_d_range", (0.5, 10.0))?,
            ],
            ga_spread: list4(&kv, "ga_spread", [60.0, 30.0, 2.0, 1.0])?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let positive = [
            ("inputs", self.inputs),
            ("n", self.n),
            ("trials", self.trials),
            ("sample_size", self.sample_size),
            ("ga_population", self.ga_population),
            ("ga_generations", self.ga_generations),
            ("ga_fitness_trials", self.ga_fitness_trials),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, v, "must be at least 1"));
            }
        }
        for (k, (lo, hi)) in [
            ("random_offset_min", self.random_offset),
            ("random_v_min", self.random_v),
            ("random_td_min", self.random_td),
        ] {
            if !(lo <= hi) {
                return Err(invalid(k, lo, "minimum exceeds maximum"));
            }
        }
        if !(0.0..=1.0).contains(&self.ga_mutation_probability) {
            return Err(invalid("ga_mutation_probability", self.ga_mutation_probability, "must lie in [0, 1]"));
        }
        if self.train_images.is_some() != self.train_labels.is_some() {
            return Err(ConfigError::MissingKey("train_images and train_labels go together".into()));
        }
        Ok(())
    }
}
