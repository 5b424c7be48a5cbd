//! Run configuration: defaults, overridden by a flat `key = value` file,
//! overridden by command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gatn_core::model::ModelConfig;
use gatn_core::synthdata::SynthConfig;
use gatn_core::training::TrainConfig;

use crate::error::{self, CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Base seed of the generated train split; the test split follows it.
    pub data_seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `out_dir/model.gatn`.
    pub checkpoint: Option<PathBuf>,
    /// Image directory used instead of generated data.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            model: ModelConfig::desk(synth.classes),
            train: TrainConfig::default(),
            synth,
            train_per_class: 50,
            test_per_class: 20,
            data_seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            data_dir: None,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "classes",
    "image_size",
    "min_instances",
    "max_instances",
    "radius_min",
    "radius_max",
    "clutter",
    "noise_amplitude",
    "rim_min",
    "rim_max",
    "train_per_class",
    "test_per_class",
    "data_seed",
    "epochs",
    "batch_size",
    "lr0",
    "lr_decay_every",
    "lr_decay_factor",
    "lambda0",
    "lambda_step",
    "lambda_every",
    "lambda_floor",
    "momentum",
    "clip_norm",
    "seed",
    "input_size",
    "global_stages",
    "instance_stages",
    "dilation_rates",
    "uniform_gates",
    "pixel_mean",
    "pixel_std",
    "fusion",
    "rel_threshold",
    "top_k",
    "patch_size",
    "min_component_area",
    "out_dir",
    "checkpoint",
    "data_dir",
];

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    let items = v.split(',').map(|s| num(s.trim())).collect::<Result<Vec<usize>, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn join(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        let r: Result<(), String> = (|| {
            match key {
                "classes" => {
                    s.classes = num(v)?;
                    m.classes = s.classes;
                }
                "image_size" => s.image_size = num(v)?,
                "min_instances" => s.min_instances = num(v)?,
                "max_instances" => s.max_instances = num(v)?,
                "radius_min" => s.radius_min = num(v)?,
                "radius_max" => s.radius_max = num(v)?,
                "clutter" => s.clutter = num(v)?,
                "noise_amplitude" => s.noise_amplitude = num(v)?,
                "rim_min" => s.rim_min = num(v)?,
                "rim_max" => s.rim_max = num(v)?,
                "train_per_class" => self.train_per_class = num(v)?,
                "test_per_class" => self.test_per_class = num(v)?,
                "data_seed" => self.data_seed = num(v)?,
                "epochs" => t.epochs = num(v)?,
                "batch_size" => t.batch_size = num(v)?,
                "lr0" => t.lr0 = num(v)?,
                "lr_decay_every" => t.lr_decay_every = num(v)?,
                "lr_decay_factor" => t.lr_decay_factor = num(v)?,
                "lambda0" => t.lambda0 = num(v)?,
                "lambda_step" => t.lambda_step = num(v)?,
                "lambda_every" => t.lambda_every = num(v)?,
                "lambda_floor" => t.lambda_floor = num(v)?,
                "momentum" => t.momentum = num(v)?,
                "clip_norm" => t.clip_norm = if v == "none" { None } else { Some(num(v)?) },
                "seed" => t.seed = num(v)?,
                "input_size" => m.global.input_size = num(v)?,
                "global_stages" => m.global.stage_channels = list(v)?,
                "instance_stages" => m.instance_stages = list(v)?,
                "dilation_rates" => match list(v)?[..] {
                    [a, b] => m.dilation_rates = (a, b),
                    _ => return Err("expected two comma-separated rates".into()),
                },
                "uniform_gates" => m.uniform_gates = boolean(v)?,
                "pixel_mean" => m.pixel_mean = if v == "image" { None } else { Some(num(v)?) },
                "pixel_std" => m.pixel_std = num(v)?,
                "fusion" => m.fusion = boolean(v)?,
                "rel_threshold" => m.localizer.rel_threshold = num(v)?,
                "top_k" => m.localizer.top_k = num(v)?,
                "patch_size" => m.localizer.patch_size = num(v)?,
                "min_component_area" => m.localizer.min_component_area = num(v)?,
                "out_dir" => self.out_dir = PathBuf::from(v),
                "checkpoint" => self.checkpoint = optional_path(v),
                "data_dir" => self.data_dir = optional_path(v),
                _ => return Err("unknown".into()),
            }
            Ok(())
        })();
        r.map_err(|e| {
            if KEYS.contains(&key) {
                CliError::usage(format!("config key `{key}`: invalid value `{v}`: {e}"))
            } else {
                CliError::usage(format!("unknown config key `{key}`"))
            }
        })
    }

    /// Text form of one key, accepted back by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        Some(match key {
            "classes" => m.classes.to_string(),
            "image_size" => s.image_size.to_string(),
            "min_instances" => s.min_instances.to_string(),
            "max_instances" => s.max_instances.to_string(),
            "radius_min" => s.radius_min.to_string(),
            "radius_max" => s.radius_max.to_string(),
            "clutter" => s.clutter.to_string(),
            "noise_amplitude" => s.noise_amplitude.to_string(),
            "rim_min" => s.rim_min.to_string(),
            "rim_max" => s.rim_max.to_string(),
            "train_per_class" => self.train_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr0" => t.lr0.to_string(),
            "lr_decay_every" => t.lr_decay_every.to_string(),
            "lr_decay_factor" => t.lr_decay_factor.to_string(),
            "lambda0" => t.lambda0.to_string(),
            "lambda_step" => t.lambda_step.to_string(),
            "lambda_every" => t.lambda_every.to_string(),
            "lambda_floor" => t.lambda_floor.to_string(),
            "momentum" => t.momentum.to_string(),
            "clip_norm" => t.clip_norm.map_or_else(|| "none".into(), |c| c.to_string()),
            "seed" => t.seed.to_string(),
            "input_size" => m.global.input_size.to_string(),
            "global_stages" => join(&m.global.stage_channels),
            "instance_stages" => join(&m.instance_stages),
            "dilation_rates" => format!("{},{}", m.dilation_rates.0, m.dilation_rates.1),
            "uniform_gates" => m.uniform_gates.to_string(),
            "pixel_mean" => m.pixel_mean.map_or_else(|| "image".into(), |m| m.to_string()),
            "pixel_std" => m.pixel_std.to_string(),
            "fusion" => m.fusion.to_string(),
            "rel_threshold" => m.localizer.rel_threshold.to_string(),
            "top_k" => m.localizer.top_k.to_string(),
            "patch_size" => m.localizer.patch_size.to_string(),
            "min_component_area" => m.localizer.min_component_area.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "data_dir" => show_path(&self.data_dir),
            _ => return None,
        })
    }

    /// Every key as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.gatn"))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CliError::usage("train_per_class and test_per_class must be positive"));
        }
        Ok(())
    }
}

/// Where a key's final value came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Default,
    File { path: PathBuf, line: usize },
    Flag,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    /// How many keys the file set, then one line per flag noting overrides.
    pub log: Vec<String>,
}

/// `key = value` pairs with their 1-based line numbers.
pub fn parse_text(path: &Path, text: &str) -> CliResult<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "{}:{}: expected `key = value`, found `{line}`",
                path.display(),
                i + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Applies `file` then `flags` over `base` and validates the result.
pub fn resolve(base: RunConfig, file: Option<&Path>, flags: &[(&str, String)]) -> CliResult<Resolved> {
    let mut config = base;
    let mut sources: Vec<(String, String, Source)> = Vec::new();
    if let Some(path) = file {
        let text = String::from_utf8(error::read(path)?).map_err(|_| CliError::io(path, "config is not UTF-8"))?;
        for (key, value, line) in parse_text(path, &text)? {
            config.set(&key, &value).map_err(|e| match e {
                CliError::Usage(m) => CliError::Usage(format!("{}:{line}: {m}", path.display())),
                other => other,
            })?;
            sources.retain(|(k, _, _)| *k != key);
            sources.push((
                key,
                value,
                Source::File {
                    path: path.to_path_buf(),
                    line,
                },
            ));
        }
    }
    let mut log = Vec::new();
    for (key, value) in flags {
        config.set(key, value)?;
        if let Some((_, old, Source::File { path, line })) = sources.iter().find(|(k, _, _)| k == key) {
            log.push(format!(
                "config: {key} = {value} (flag, overrides {old} from {}:{line})",
                path.display()
            ));
        } else {
            log.push(format!("config: {key} = {value} (flag)"));
        }
        sources.retain(|(k, _, _)| k != key);
        sources.push((key.to_string(), value.clone(), Source::Flag));
    }
    if let Some(path) = file {
        let from_file = sources.iter().filter(|(_, _, s)| matches!(s, Source::File { .. })).count();
        log.insert(0, format!("config: {from_file} keys from {}", path.display()));
    }
    config.validate()?;
    Ok(Resolved { config, log })
}
