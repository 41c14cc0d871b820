//! Experiment configuration, loaded from TOML and validated up front.

use std::fmt;
use std::path::{Path, PathBuf};

use racnet_core::data::synthetic::{ShapeFamily, SyntheticSpec};
use racnet_core::eval::{AttackConfig, AttackMode};
use racnet_core::lrp::LrpParams;
use racnet_core::nn::io::sha256_hex;
use racnet_core::nn::{ArchSpec, TrainConfig};
use racnet_core::rac::BlcConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives initialization, shuffling, the data split and the attack targets.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lrp: LrpParams,
    #[serde(default)]
    pub rac: RacConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub ood: OodConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Synthetic,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10,
    /// Directory holding the four MNIST-style IDX files.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Class count for IDX data.
    #[serde(default = "default_idx_classes")]
    pub num_classes: usize,
    /// Fractions for datasets without a canonical split. For CIFAR-10 and
    /// IDX data only `val_frac` applies, carved out of the training files.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

fn default_idx_classes() -> usize {
    10
}

fn default_train_frac() -> f64 {
    0.8
}

fn default_val_frac() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub preset: String,
    /// Overrides the preset topology when given.
    pub conv_channels: Option<Vec<usize>>,
    pub pool_after: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            preset: "vgg8-desk".into(),
            conv_channels: None,
            pool_after: None,
            hidden: None,
        }
    }
}

impl ArchConfig {
    /// The architecture for data of the given sample shape and class count.
    pub fn resolve(&self, sample_shape: &[usize], num_classes: usize) -> racnet_core::Result<ArchSpec> {
        let mut spec = ArchSpec::preset(&self.preset, num_classes)?;
        spec.input_shape = sample_shape.to_vec();
        if let Some(c) = &self.conv_channels {
            spec.conv_channels = c.clone();
        }
        if let Some(p) = &self.pool_after {
            spec.pool_after = p.clone();
        }
        if let Some(h) = &self.hidden {
            spec.hidden = h.clone();
        }
        Ok(spec)
    }

    fn depth(&self) -> Option<usize> {
        let base = ArchSpec::preset(&self.preset, 2).ok()?;
        let convs = self.conv_channels.as_ref().map_or(base.conv_channels.len(), Vec::len);
        let hidden = self.hidden.as_ref().map_or(base.hidden.len(), Vec::len);
        Some(convs + hidden + 1)
    }

    fn conv_count(&self) -> Option<usize> {
        let base = ArchSpec::preset(&self.preset, 2).ok()?;
        Some(self.conv_channels.as_ref().map_or(base.conv_channels.len(), Vec::len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacConfig {
    pub layers: Vec<usize>,
    pub k: usize,
    pub delta_th: f64,
    /// Take layers, k and threshold from the sweep selection instead.
    pub from_sweep: bool,
    pub blc: BlcConfig,
}

impl Default for RacConfig {
    fn default() -> Self {
        Self {
            layers: vec![5, 6],
            k: 32,
            delta_th: 0.7,
            from_sweep: false,
            blc: BlcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layer_pairs: Vec<Vec<usize>>,
    pub k: Vec<usize>,
    pub delta_th: Vec<f64>,
    /// Seeds of the classifier training; the backbone stays fixed.
    pub seeds: Vec<u64>,
    /// Selection targets on the validation medians.
    pub target_fnr: f64,
    pub min_normalized_flops: f64,
    pub min_early_exit_pct: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layer_pairs: vec![vec![5, 6], vec![6, 7], vec![7, 8]],
            k: vec![8, 16, 32, 64],
            delta_th: vec![0.5, 0.7, 0.9],
            seeds: vec![0, 1, 2],
            target_fnr: 10.0,
            min_normalized_flops: 1.05,
            min_early_exit_pct: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    #[serde(flatten)]
    pub config: AttackConfig,
    /// Also run the full-knowledge attack on the same samples.
    pub paired: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            config: AttackConfig {
                max_samples: Some(200),
                ..AttackConfig::default()
            },
            paired: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodSource {
    Uniform,
    Gaussian { mean: f64, std: f64 },
    /// Shapes outside the training classes, rendered like the synthetic data.
    NovelShapes,
}

impl OodSource {
    pub fn name(&self) -> String {
        match self {
            OodSource::Uniform => "uniform".into(),
            OodSource::Gaussian { mean, std } => format!("gaussian(mean={mean}, std={std})"),
            OodSource::NovelShapes => "novel-shapes".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub samples: usize,
    pub sources: Vec<OodSource>,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            sources: vec![
                OodSource::Uniform,
                OodSource::Gaussian { mean: 0.5, std: 0.25 },
                OodSource::NovelShapes,
            ],
        }
    }
}

/// All problems found in a configuration, one `field: message` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for line in &self.0 {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    /// Stable digest of a section (or the whole config) for provenance.
    pub fn digest_of<T: Serialize>(value: &T) -> String {
        sha256_hex(serde_json::to_string(value).expect("plain config").as_bytes())
    }

    pub fn hash(&self) -> String {
        Self::digest_of(self)
    }

    /// Digest of everything that determines the trained backbone.
    pub fn training_key(&self) -> String {
        Self::digest_of(&(self.seed, &self.dataset, &self.arch, &self.train))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));

        let d = &self.dataset;
        match d.format {
            DatasetFormat::Synthetic => {
                if let Err(e) = d.synthetic.validate() {
                    bad("dataset.synthetic", e.to_string());
                }
                if d.synthetic.family != ShapeFamily::Standard {
                    bad("dataset.synthetic.family", "training data must use the standard family".into());
                }
                if !(d.train_frac > 0.0 && d.val_frac > 0.0 && d.train_frac + d.val_frac < 1.0) {
                    bad(
                        "dataset.train_frac",
                        format!(
                            "train_frac {} and val_frac {} must be positive and leave room for a test split",
                            d.train_frac, d.val_frac
                        ),
                    );
                }
            }
            DatasetFormat::Cifar10 | DatasetFormat::Idx => {
                match &d.path {
                    None => bad("dataset.path", format!("required for format {:?}", d.format).to_lowercase()),
                    Some(p) if !p.is_dir() => bad("dataset.path", format!("{} is not a directory", p.display())),
                    Some(_) => {}
                }
                if !(d.val_frac > 0.0 && d.val_frac < 1.0) {
                    bad("dataset.val_frac", format!("must lie in (0, 1), got {}", d.val_frac));
                }
                if d.format == DatasetFormat::Idx && d.num_classes < 2 {
                    bad("dataset.num_classes", "at least two classes are required".into());
                }
            }
        }

        let depth = self.arch.depth();
        match depth {
            None => bad("arch.preset", format!("unknown preset {:?} (expected vgg8 or vgg8-desk)", self.arch.preset)),
            Some(_) => {
                if let Some(c) = &self.arch.conv_channels {
                    if c.is_empty() || c.contains(&0) {
                        bad("arch.conv_channels", "must be a non-empty list of positive widths".into());
                    }
                }
            }
        }
        let convs = self.arch.conv_count();

        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            bad("train.learning_rate", "must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            bad("train.momentum", "must lie in [0, 1)".into());
        }
        if t.batch_size == 0 {
            bad("train.batch_size", "must be positive".into());
        }
        if !(t.weight_decay >= 0.0) {
            bad("train.weight_decay", "must be non-negative".into());
        }
        if !(t.bn_momentum > 0.0 && t.bn_momentum <= 1.0) {
            bad("train.bn_momentum", "must lie in (0, 1]".into());
        }
        if let Err(e) = self.lrp.validate() {
            bad("lrp", e.to_string());
        }

        let check_layers = |field: &str, layers: &[usize], errs: &mut Vec<String>| {
            if layers.len() < 2 {
                errs.push(format!("{field}: at least two validation layers are required"));
            } else if layers[0] == 0 || layers.windows(2).any(|w| w[0] >= w[1]) {
                errs.push(format!("{field}: layers must be positive and strictly increasing, got {layers:?}"));
            } else if let Some(n) = convs {
                if let Some(l) = layers.iter().find(|&&l| l > n) {
                    errs.push(format!("{field}: layer {l} is not a conv layer (the net has {n})"));
                }
            }
        };
        let r = &self.rac;
        check_layers("rac.layers", &r.layers, &mut errs);
        let mut bad = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));
        if r.k == 0 {
            bad("rac.k", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&r.delta_th) {
            bad("rac.delta_th", format!("must lie in [0, 1], got {}", r.delta_th));
        }
        if let Err(e) = r.blc.validate() {
            bad("rac.blc", e.to_string());
        }

        let s = &self.sweep;
        if s.layer_pairs.is_empty() {
            bad("sweep.layer_pairs", "grid must not be empty".into());
        }
        if s.k.is_empty() || s.k.contains(&0) {
            bad("sweep.k", "grid must be non-empty with positive entries".into());
        }
        if s.delta_th.is_empty() || s.delta_th.iter().any(|d| !(0.0..=1.0).contains(d)) {
            bad("sweep.delta_th", "grid must be non-empty with entries in [0, 1]".into());
        }
        if s.seeds.is_empty() {
            bad("sweep.seeds", "at least one seed is required".into());
        }
        if !(0.0..=100.0).contains(&s.target_fnr) {
            bad("sweep.target_fnr", "must be a percentage".into());
        }
        for (i, pair) in s.layer_pairs.iter().enumerate() {
            check_layers(&format!("sweep.layer_pairs[{i}]"), pair, &mut errs);
        }

        let mut bad = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));
        if let Err(e) = self.attack.config.validate() {
            bad("attack", e.to_string());
        }
        if self.attack.config.mode != AttackMode::ZeroKnowledge {
            bad("attack.mode", "the primary attack is zero_knowledge; use paired = true for full knowledge".into());
        }
        if self.ood.samples == 0 {
            bad("ood.samples", "must be positive".into());
        }
        if self.ood.sources.is_empty() {
            bad("ood.sources", "at least one source is required".into());
        }
        for (i, src) in self.ood.sources.iter().enumerate() {
            if let OodSource::Gaussian { mean, std } = src {
                if !(mean.is_finite() && *std >= 0.0) {
                    bad(&format!("ood.sources[{i}]"), "gaussian needs a finite mean and std >= 0".into());
                }
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(errs))
        }
    }
}
