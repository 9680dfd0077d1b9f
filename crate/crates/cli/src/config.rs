//! Flat `section.key = value` pipeline configuration.
//!
//! A config file is TOML; nested tables flatten to dotted keys, so
//! `[fit]\nmax_iters = 100` and `"fit.max_iters" = 100` are the same setting.

use std::fmt::Write as _;
use std::path::Path;

use glottal_core::adles::Descent;
use glottal_core::pipeline::AnalysisConfig;
use glottal_core::s2ap::TrainConfig;
use glottal_core::synth::{CohortSpec, FilterChain, ParamRange};
use glottal_core::Vowel;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub analysis: AnalysisConfig,
    pub train: TrainConfig,
    pub eval_folds: usize,
    pub eval_seed: u64,
    /// `dt_per_sample` is taken from `model.dt_per_sample`.
    pub synth: CohortSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let analysis = AnalysisConfig::default();
        let synth = CohortSpec {
            dt_per_sample: analysis.fit.model.dt_per_sample,
            ..CohortSpec::default()
        };
        PipelineConfig {
            analysis,
            train: TrainConfig::default(),
            eval_folds: 3,
            eval_seed: 0,
            synth,
        }
    }
}

type Getter = fn(&PipelineConfig) -> String;
type Setter = fn(&mut PipelineConfig, &str) -> Result<(), String>;

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.trim().parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn float(v: &str) -> Result<f64, String> {
    match v.trim() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        other => num(other),
    }
}

fn boolean(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn pair(v: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = v.split(',').collect();
    match parts.as_slice() {
        [lo, hi] => Ok((float(lo)?, float(hi)?)),
        _ => Err(format!("expected lo,hi, got {v:?}")),
    }
}

fn show_pair((lo, hi): (f64, f64)) -> String {
    format!("{lo},{hi}")
}

fn parsed<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| e.to_string())
}

macro_rules! key {
    ($name:expr, $help:expr, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Key {
            name: $name,
            help: $help,
            get: |$c| $get,
            set: |$m, $v| {
                $set;
                Ok(())
            },
        }
    };
}

fn range_mut<'a>(c: &'a mut PipelineConfig, positive: bool) -> &'a mut ParamRange {
    if positive {
        &mut c.synth.positive
    } else {
        &mut c.synth.negative
    }
}

pub static KEYS: &[Key] = &[
    key!("iaif.window_ms", "analysis frame length", |c| c.analysis.window_ms.to_string(), |c, v| c.analysis.window_ms = float(v)?),
    key!("iaif.hop_ms", "analysis frame hop", |c| c.analysis.hop_ms.to_string(), |c, v| c.analysis.hop_ms = float(v)?),
    key!(
        "iaif.tract_order",
        "vocal tract LPC order; auto = sample_rate/1000 + 2",
        |c| c.analysis.iaif.tract_order.map_or("auto".into(), |p| p.to_string()),
        |c, v| c.analysis.iaif.tract_order = if v.trim() == "auto" { None } else { Some(num(v)?) }
    ),
    key!("iaif.glottal_order", "glottal contribution LPC order", |c| c.analysis.iaif.glottal_order.to_string(), |c, v| c.analysis.iaif.glottal_order = num(v)?),
    key!("iaif.leak", "leaky integrator coefficient", |c| c.analysis.iaif.leak.to_string(), |c, v| c.analysis.iaif.leak = float(v)?),
    key!("model.dt_per_sample", "model time per audio sample (also used by synth)", |c| c.analysis.fit.model.dt_per_sample.to_string(), |c, v| {
        let dt = float(v)?;
        c.analysis.fit.model.dt_per_sample = dt;
        c.synth.dt_per_sample = dt;
    }),
    key!("model.c_r", "initial right fold displacement", |c| c.analysis.fit.model.init.c_r.to_string(), |c, v| c.analysis.fit.model.init.c_r = float(v)?),
    key!("model.c_l", "initial left fold displacement", |c| c.analysis.fit.model.init.c_l.to_string(), |c, v| c.analysis.fit.model.init.c_l = float(v)?),
    key!("model.x0", "half rest glottal width", |c| c.analysis.fit.model.geometry.x0.to_string(), |c, v| c.analysis.fit.model.geometry.x0 = float(v)?),
    key!("model.rectify", "clamp the model flow at zero", |c| c.analysis.fit.model.rectify.to_string(), |c, v| c.analysis.fit.model.rectify = boolean(v)?),
    key!("model.max_lag", "extra model samples searched for the best-matching window", |c| c.analysis.fit.model.max_lag.to_string(), |c, v| c.analysis.fit.model.max_lag = num(v)?),
    key!("fit.init_alpha", "starting alpha of every frame fit", |c| c.analysis.fit.model.initial_params.alpha.to_string(), |c, v| c.analysis.fit.model.initial_params.alpha = float(v)?),
    key!("fit.init_beta", "starting beta", |c| c.analysis.fit.model.initial_params.beta.to_string(), |c, v| c.analysis.fit.model.initial_params.beta = float(v)?),
    key!("fit.init_delta", "starting delta", |c| c.analysis.fit.model.initial_params.delta.to_string(), |c, v| c.analysis.fit.model.initial_params.delta = float(v)?),
    key!(
        "fit.descent",
        "bfgs or steepest",
        |c| match c.analysis.fit.descent {
            Descent::Bfgs => "bfgs".into(),
            Descent::Steepest => "steepest".into(),
        },
        |c, v| c.analysis.fit.descent = match v.trim() {
            "bfgs" => Descent::Bfgs,
            "steepest" => Descent::Steepest,
            other => return Err(format!("unknown descent {other:?}")),
        }
    ),
    key!("fit.grad_tol", "stop when the gradient norm drops below this", |c| c.analysis.fit.grad_tol.to_string(), |c, v| c.analysis.fit.grad_tol = float(v)?),
    key!("fit.rel_tol", "stop when the relative loss change drops below this", |c| c.analysis.fit.rel_tol.to_string(), |c, v| c.analysis.fit.rel_tol = float(v)?),
    key!("fit.max_iters", "iteration cap per frame", |c| c.analysis.fit.max_iters.to_string(), |c, v| c.analysis.fit.max_iters = num(v)?),
    key!("fit.armijo", "sufficient decrease constant", |c| c.analysis.fit.armijo.to_string(), |c, v| c.analysis.fit.armijo = float(v)?),
    key!("fit.shrink", "backtracking factor", |c| c.analysis.fit.shrink.to_string(), |c, v| c.analysis.fit.shrink = float(v)?),
    key!("fit.initial_step", "first trial step length", |c| c.analysis.fit.initial_step.to_string(), |c, v| c.analysis.fit.initial_step = float(v)?),
    key!("fit.max_backtracks", "line search attempts per iteration", |c| c.analysis.fit.max_backtracks.to_string(), |c, v| c.analysis.fit.max_backtracks = num(v)?),
    key!("fit.symmetry_break", "delta used when the start has delta = 0", |c| c.analysis.fit.symmetry_break.to_string(), |c, v| c.analysis.fit.symmetry_break = float(v)?),
    key!("fit.warm_start", "start each frame from the previous solution", |c| c.analysis.fit.warm_start.to_string(), |c, v| c.analysis.fit.warm_start = boolean(v)?),
    key!("train.arch", "layers,kernel,filters of the feature extractor", |c| c.train.architecture.to_string(), |c, v| c.train.architecture = parsed(v)?),
    key!("train.pooling", "s2ap or 2ap", |c| c.train.pooling.to_string(), |c, v| c.train.pooling = parsed(v)?),
    key!("train.extractor", "use the convolutional feature extractor", |c| c.train.extractor.to_string(), |c, v| c.train.extractor = boolean(v)?),
    key!("train.learning_rate", "SGD step size", |c| c.train.learning_rate.to_string(), |c, v| c.train.learning_rate = float(v)?),
    key!("train.momentum", "SGD momentum", |c| c.train.momentum.to_string(), |c, v| c.train.momentum = float(v)?),
    key!("train.epochs", "passes over the training frames", |c| c.train.epochs.to_string(), |c, v| c.train.epochs = num(v)?),
    key!("train.batch_size", "frames per update", |c| c.train.batch_size.to_string(), |c, v| c.train.batch_size = num(v)?),
    key!("train.seed", "weight init and shuffling seed", |c| c.train.seed.to_string(), |c, v| c.train.seed = num(v)?),
    key!("eval.folds", "cross-validation folds", |c| c.eval_folds.to_string(), |c, v| c.eval_folds = num(v)?),
    key!("eval.seed", "speaker-to-fold assignment seed", |c| c.eval_seed.to_string(), |c, v| c.eval_seed = num(v)?),
    key!("synth.n_speakers", "cohort size", |c| c.synth.n_speakers.to_string(), |c, v| c.synth.n_speakers = num(v)?),
    key!("synth.positive_fraction", "share of positive speakers", |c| c.synth.positive_fraction.to_string(), |c, v| c.synth.positive_fraction = float(v)?),
    key!("synth.negative.alpha", "alpha range of negatives", |c| show_pair(c.synth.negative.alpha), |c, v| range_mut(c, false).alpha = pair(v)?),
    key!("synth.negative.beta", "beta range of negatives", |c| show_pair(c.synth.negative.beta), |c, v| range_mut(c, false).beta = pair(v)?),
    key!("synth.negative.delta", "delta range of negatives", |c| show_pair(c.synth.negative.delta), |c, v| range_mut(c, false).delta = pair(v)?),
    key!("synth.positive.alpha", "alpha range of positives", |c| show_pair(c.synth.positive.alpha), |c, v| range_mut(c, true).alpha = pair(v)?),
    key!("synth.positive.beta", "beta range of positives", |c| show_pair(c.synth.positive.beta), |c, v| range_mut(c, true).beta = pair(v)?),
    key!("synth.positive.delta", "delta range of positives", |c| show_pair(c.synth.positive.delta), |c, v| range_mut(c, true).delta = pair(v)?),
    key!(
        "synth.vowels",
        "vowel presets assigned round-robin",
        |c| c.synth.vowels.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","),
        |c, v| c.synth.vowels = v.split(',').map(|s| s.trim().parse::<Vowel>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?
    ),
    key!(
        "synth.filter",
        "vowel (tract + radiation) or identity",
        |c| match c.synth.filter {
            FilterChain::Vowel => "vowel".into(),
            FilterChain::Identity => "identity".into(),
        },
        |c, v| c.synth.filter = match v.trim() {
            "vowel" => FilterChain::Vowel,
            "identity" => FilterChain::Identity,
            other => return Err(format!("unknown filter {other:?}")),
        }
    ),
    key!("synth.snr_db", "additive noise level; inf for none", |c| c.synth.snr_db.to_string(), |c, v| c.synth.snr_db = float(v)?),
    key!("synth.duration_secs", "recording length", |c| c.synth.duration_secs.to_string(), |c, v| c.synth.duration_secs = float(v)?),
    key!("synth.sample_rate", "recording sample rate in Hz", |c| c.synth.sample_rate.to_string(), |c, v| c.synth.sample_rate = num(v)?),
    key!("synth.warmup_samples", "simulated samples dropped before recording", |c| c.synth.warmup_samples.to_string(), |c, v| c.synth.warmup_samples = num(v)?),
    key!("synth.seed", "cohort seed", |c| c.synth.seed.to_string(), |c, v| c.synth.seed = num(v)?),
];

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| CliError::Invalid(format!("unknown config key {key:?}")))?;
        (k.set)(self, value).map_err(|e| CliError::Invalid(format!("{key}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Applies every setting of a TOML file on top of `self`.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat).map_err(CliError::Invalid)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.analysis.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval_folds < 2 {
            return Err(CliError::Invalid(format!("eval.folds must be at least 2, got {}", self.eval_folds)));
        }
        Ok(())
    }

    /// Every key with its current value, as TOML.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{:?} = {:?}", k.name, (k.get)(self));
        }
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<(), String> {
    let scalar = |v: &toml::Value| -> Result<String, String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            toml::Value::Boolean(b) => Ok(b.to_string()),
            other => Err(format!("{prefix}: unsupported value {other}")),
        }
    };
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        v => out.push((prefix.to_string(), scalar(v)?)),
    }
    Ok(())
}

/// The table printed by `--help`.
pub fn key_table() -> String {
    let defaults = PipelineConfig::default();
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (file via --config, override with --set key=value):\n");
    for k in KEYS {
        let _ = writeln!(out, "  {:width$}  {:<14} {}", k.name, (k.get)(&defaults), k.help);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_its_default() {
        let defaults = PipelineConfig::default();
        for k in KEYS {
            let mut c = PipelineConfig::default();
            c.set(k.name, &(k.get)(&defaults)).unwrap();
            assert_eq!(c, defaults, "{}", k.name);
        }
    }

    #[test]
    fn keys_are_unique_and_namespaced() {
        let mut names: Vec<_> = KEYS.iter().map(|k| k.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
        for n in names {
            let section = n.split('.').next().unwrap();
            assert!(["iaif", "model", "fit", "train", "eval", "synth"].contains(&section), "{n}");
        }
    }

    #[test]
    fn dumped_config_reloads() {
        let mut c = PipelineConfig::default();
        c.set("fit.max_iters", "7").unwrap();
        c.set("synth.vowels", "u,a").unwrap();
        c.set("synth.snr_db", "inf").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, c.to_toml()).unwrap();
        let mut back = PipelineConfig::default();
        back.merge_file(&path).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn nested_tables_and_arrays_flatten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 3\narch = \"1,3,8\"\n[synth.positive]\ndelta = [1.2, 1.4]\n").unwrap();
        let mut c = PipelineConfig::default();
        c.merge_file(&path).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.get("train.arch").unwrap(), "1,3,8");
        assert_eq!(c.synth.positive.delta, (1.2, 1.4));
    }

    #[test]
    fn bad_settings_are_invalid() {
        let mut c = PipelineConfig::default();
        assert!(matches!(c.set("fit.nope", "1"), Err(CliError::Invalid(_))));
        assert!(matches!(c.set("fit.max_iters", "many"), Err(CliError::Invalid(_))));
        assert!(matches!(c.set("train.pooling", "max"), Err(CliError::Invalid(_))));
        c.set("eval.folds", "1").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Invalid(_))));
        let mut c = PipelineConfig::default();
        c.set("synth.positive_fraction", "1.5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn dt_is_shared_with_synth() {
        let mut c = PipelineConfig::default();
        c.set("model.dt_per_sample", "0.05").unwrap();
        assert_eq!(c.synth.dt_per_sample, 0.05);
    }

    #[test]
    fn help_table_lists_every_key() {
        let table = key_table();
        for k in KEYS {
            assert!(table.contains(k.name));
        }
        assert!(table.contains("2,5,64"));
    }
}
