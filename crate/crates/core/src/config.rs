//! Flat `key = value` run configuration with namespaced keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; `model.preset` (`default`, `tiny` or `desk`) picks the base model
//! before the remaining keys are applied, whatever their order in the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::Topology;
use crate::data::SinusoidSpec;
use crate::error::{Error, Result};
use crate::forecast::DecoderMode;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Environment variable overriding `run.seed`.
pub const SEED_ENV: &str = "SEFC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Default,
    Tiny,
    Desk,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Fraction of steps in the training split.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub stride: usize,
    pub channel_independent: bool,
    /// Used when a command runs without a data file.
    pub synthetic: SinusoidSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.1,
            stride: 1,
            channel_independent: true,
            synthetic: SinusoidSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub seasonal_period: usize,
    pub dataset: String,
    pub stride: usize,
    pub batch_size: usize,
    /// Caps the number of evaluation windows per horizon.
    pub max_windows: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![96, 192, 336, 720],
            seasonal_period: 24,
            dataset: "series".into(),
            stride: 1,
            batch_size: 64,
            max_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub workers: usize,
    pub precision: Precision,
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Default)
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, bool, String);

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl<V: Value> Value for Option<V> {
    fn parse(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            V::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), Value::render)
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Value for Topology {
    fn parse(s: &str) -> Option<Self> {
        Topology::from_name(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for DecoderMode {
    fn parse(s: &str) -> Option<Self> {
        DecoderMode::from_name(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Precision {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::Single),
            "f64" => Some(Precision::Double),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Precision::Single => "f32".into(),
            Precision::Double => "f64".into(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $t:ty),* $(,)?) => {
        const KEYS: &[&str] = &["model.preset", $($key),*];

        fn assign(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => {
                    cfg.$($field).+ = <$t as Value>::parse(value).ok_or_else(|| {
                        Error::Config(format!("invalid value `{value}` for key `{key}`"))
                    })?;
                })*
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        }

        fn render_all(cfg: &RunConfig) -> Vec<(&'static str, String)> {
            let mut out = vec![("model.preset", cfg.preset.name().to_string())];
            $(out.push(($key, <$t as Value>::render(&cfg.$($field).+)));)*
            out
        }
    };
}

keys! {
    "run.seed" => seed: u64,
    "run.out_dir" => out_dir: Option<String>,
    "run.workers" => workers: usize,
    "run.precision" => precision: Precision,
    "data.train_fraction" => data.train_fraction: f64,
    "data.val_fraction" => data.val_fraction: f64,
    "data.stride" => data.stride: usize,
    "data.channel_independent" => data.channel_independent: bool,
    "data.synthetic_len" => data.synthetic.len: usize,
    "data.synthetic_period" => data.synthetic.period: f64,
    "data.synthetic_noise" => data.synthetic.noise_std: f64,
    "data.synthetic_spike_rate" => data.synthetic.spike_rate: f64,
    "data.synthetic_spike_magnitude" => data.synthetic.spike_magnitude: f64,
    "data.synthetic_channels" => data.synthetic.channels: usize,
    "model.context_len" => model.context_len: usize,
    "model.horizon" => model.horizon: usize,
    "model.segment_len" => model.segment_len: usize,
    "model.width" => model.width: usize,
    "model.encoder_hidden" => model.encoder_hidden: usize,
    "model.vocab" => model.vocab: usize,
    "model.vocab_width" => model.vocab_width: usize,
    "model.vocab_path" => model.vocab_path: Option<String>,
    "model.prototypes" => model.prototypes: usize,
    "model.projection_bias" => model.projection_bias: bool,
    "model.decoder_mode" => model.decoder_mode: DecoderMode,
    "model.decoder_hidden" => model.decoder_hidden: usize,
    "model.norm_eps" => model.norm_eps: f64,
    "model.backbone_layers" => model.backbone.layers: usize,
    "model.backbone_heads" => model.backbone.heads: usize,
    "model.backbone_width" => model.backbone.width: usize,
    "model.backbone_ffn_width" => model.backbone.ffn_width: usize,
    "model.backbone_max_positions" => model.backbone.max_positions: usize,
    "model.backbone_frozen" => model.backbone.frozen: bool,
    "model.backbone_init_std" => model.backbone.init_std: f64,
    "model.backbone_eps" => model.backbone.eps: f64,
    "tscc.enabled" => model.tscc.enabled: bool,
    "tscc.cross_heads" => model.tscc.cross_heads: usize,
    "tscc.vae_hidden" => model.tscc.vae_hidden: usize,
    "tscc.latent" => model.tscc.latent: usize,
    "tscc.k_top" => model.tscc.k_top: usize,
    "tscc.gate_hidden" => model.tscc.gate_hidden: usize,
    "tscc.logvar_clamp" => model.tscc.logvar_clamp: f64,
    "tscc.eps" => model.tscc.eps: f64,
    "adapter.enabled" => model.adapter.enabled: bool,
    "adapter.rank" => model.adapter.rank: usize,
    "adapter.hidden" => model.adapter.hidden: usize,
    "adapter.scale" => model.adapter.scale: f64,
    "adapter.topology" => model.adapter.topology: Topology,
    "train.learning_rate" => train.learning_rate: f64,
    "train.batch_size" => train.batch_size: usize,
    "train.max_epochs" => train.max_epochs: usize,
    "train.patience" => train.patience: usize,
    "train.clip_norm" => train.clip_norm: f64,
    "train.kl_weight" => train.kl_weight: f64,
    "train.max_steps" => train.max_steps: Option<usize>,
    "train.beta1" => train.beta1: f64,
    "train.beta2" => train.beta2: f64,
    "train.adam_eps" => train.adam_eps: f64,
    "train.queue_depth" => train.queue_depth: usize,
    "eval.horizons" => eval.horizons: Vec<usize>,
    "eval.seasonal_period" => eval.seasonal_period: usize,
    "eval.dataset" => eval.dataset: String,
    "eval.stride" => eval.stride: usize,
    "eval.batch_size" => eval.batch_size: usize,
    "eval.max_windows" => eval.max_windows: Option<usize>,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Desk => ModelConfig::desk(96, 24, 24),
        };
        let eval = match preset {
            Preset::Default => EvalConfig::default(),
            _ => EvalConfig {
                horizons: vec![model.horizon, 2 * model.horizon],
                ..EvalConfig::default()
            },
        };
        Self {
            seed: 0,
            out_dir: None,
            workers: 1,
            precision: Precision::Double,
            preset,
            data: DataConfig::default(),
            model,
            train: TrainConfig::default(),
            eval,
        }
    }

    /// Every recognized key.
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parses configuration text; later duplicates of a key are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}` on line {}", n + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}` on line {}", n + 1)));
            }
        }
        let preset = match pairs.remove("model.preset").as_deref() {
            None | Some("default") => Preset::Default,
            Some("tiny") => Preset::Tiny,
            Some("desk") => Preset::Desk,
            Some(other) => return Err(Error::Config(format!("invalid value `{other}` for key `model.preset`"))),
        };
        let mut cfg = Self::with_preset(preset);
        if preset == Preset::Desk {
            let get = |k: &str, d: usize| -> Result<usize> {
                pairs.get(k).map_or(Ok(d), |v| {
                    v.parse()
                        .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{k}`")))
                })
            };
            let (l, t, p) = (
                get("model.context_len", 96)?,
                get("model.horizon", 24)?,
                get("model.segment_len", 24)?,
            );
            cfg.model = ModelConfig::desk(l, t, p);
        }
        for (k, v) in &pairs {
            assign(&mut cfg, k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `SEFC_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Sets one key, as if it appeared in the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "model.preset" {
            return Err(Error::Config("model.preset can only be set in the config text".into()));
        }
        assign(self, key, value)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.val_fraction > 0.0 && d.train_fraction + d.val_fraction < 1.0) {
            return Err(Error::Config(
                "data.train_fraction and data.val_fraction must be positive and sum below 1".into(),
            ));
        }
        if d.stride == 0 || self.eval.stride == 0 || self.eval.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config(
                "strides, eval.batch_size and run.workers must be positive".into(),
            ));
        }
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(Error::Config("eval.horizons must list horizons of at least 1".into()));
        }
        if self.eval.seasonal_period == 0 {
            return Err(Error::Config("eval.seasonal_period must be at least 1".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, one `key = value` line per key.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in render_all(self) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let cfg =
            RunConfig::parse("model.preset = tiny\nadapter.topology = parallel\neval.horizons = 8, 24\n").unwrap();
        assert_eq!(cfg.model.adapter.topology, Topology::Parallel);
        assert_eq!(cfg.eval.horizons, vec![8, 24]);
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let e = RunConfig::parse("model.widht = 3").unwrap_err().to_string();
        assert!(e.contains("model.widht"), "{e}");
        assert!(RunConfig::parse("train.learning_rate = fast").is_err());
        assert!(RunConfig::parse("run.seed = 1\nrun.seed = 2").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn desk_preset_reads_shape_keys() {
        let cfg = RunConfig::parse("model.preset = desk\nmodel.context_len = 48\nmodel.segment_len = 8").unwrap();
        assert_eq!(cfg.model.segments(), 6);
        assert_eq!(cfg.model.backbone.max_positions, 6);
    }
}
