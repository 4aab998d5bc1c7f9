//! Experiment configuration: one TOML file per run, with built-in presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blind::SolverConfig;
use crate::codec::CodecKind;
use crate::error::{Error, Result};
use crate::operators::{GroundTruthOperator, SurrogateFamily};

/// Environment variable that overrides the master seed of any config.
pub const SEED_ENV: &str = "BLINDRESTORE_SEED";

/// Built-in presets, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("desk-gaussian-blur", include_str!("../../presets/desk-gaussian-blur.toml")),
    ("desk-jpeg", include_str!("../../presets/desk-jpeg.toml")),
    ("appendix-a-gaussian-blur", include_str!("../../presets/appendix-a-gaussian-blur.toml")),
    ("appendix-a-jpeg", include_str!("../../presets/appendix-a-jpeg.toml")),
];

/// A degradation, either the ground truth or the generic one used to build
/// the prior's "degraded" components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    GaussianBlur { size: usize, std: f64 },
    /// Whitespace-separated kernel file, resolved relative to the config.
    KernelFile { path: PathBuf },
    DctQuantize { quant_factor: f64 },
    Downsample { factor: usize },
    GrayProject,
}

impl OperatorSpec {
    pub fn build(&self, base_dir: &Path) -> Result<GroundTruthOperator> {
        use crate::operators::{dirac_kernel, gaussian_kernel, read_kernel_text};
        match self {
            OperatorSpec::Identity => GroundTruthOperator::conv(dirac_kernel(1)),
            OperatorSpec::GaussianBlur { size, std } => GroundTruthOperator::conv(gaussian_kernel(*size, *std)?),
            OperatorSpec::KernelFile { path } => GroundTruthOperator::conv(read_kernel_text(&base_dir.join(path))?),
            OperatorSpec::DctQuantize { quant_factor } => GroundTruthOperator::dct_quantize(*quant_factor),
            OperatorSpec::Downsample { factor } => {
                if *factor == 0 {
                    return Err(Error::Config("downsample factor must be >= 1".into()));
                }
                Ok(GroundTruthOperator::Downsample { factor: *factor })
            }
            OperatorSpec::GrayProject => Ok(GroundTruthOperator::GrayProject),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Procedural pattern names (see [`crate::harness::problem::pattern`])
    /// or `file:<path>` images; one sharp component each.
    pub patterns: Vec<String>,
    /// Component weights; uniform when empty.
    pub weights: Vec<f64>,
    /// Per-pixel standard deviation of each component.
    pub s: f64,
    /// Generic degradation applied to each pattern to build the
    /// "degraded" components. None disables them.
    pub degraded: Option<OperatorSpec>,
    /// Share of the "sharp" condition's mass placed on the degraded
    /// components, so the conditional prior is not entirely free of
    /// degraded images. 0 keeps the conditions disjoint.
    pub sharp_leak: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            patterns: vec!["bars".into(), "checker".into(), "disc".into(), "rings".into()],
            weights: Vec::new(),
            s: 0.05,
            degraded: Some(OperatorSpec::GaussianBlur { size: 9, std: 2.0 }),
            sharp_leak: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    pub noise_std: f64,
    /// Sharp component the ground truth is drawn from; chosen from the
    /// seed when absent.
    pub truth_component: Option<usize>,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 32,
            width: 32,
            prior: PriorSpec::default(),
            operator: OperatorSpec::GaussianBlur { size: 9, std: 1.5 },
            noise_std: 0.02,
            truth_component: None,
        }
    }
}

impl ProblemSpec {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub codec: CodecKind,
    pub surrogate: SurrogateFamily,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            codec: CodecKind::Identity,
            surrogate: SurrogateFamily::Kernel { size: 9 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub problem: ProblemSpec,
    pub model: ModelSpec,
    pub solver: SolverConfig,
    /// Directory relative paths in the config resolve against. Not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 0,
            problem: ProblemSpec::default(),
            model: ModelSpec::default(),
            solver: SolverConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed with `BLINDRESTORE_SEED` when that is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.channels == 0 || p.height == 0 || p.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if p.prior.patterns.is_empty() {
            return Err(Error::Config("prior needs at least one pattern".into()));
        }
        if !p.prior.weights.is_empty() && p.prior.weights.len() != p.prior.patterns.len() {
            return Err(Error::Config("prior weights must match patterns".into()));
        }
        if !(p.prior.s > 0.0) {
            return Err(Error::Config("prior s must be positive".into()));
        }
        if !(0.0..1.0).contains(&p.prior.sharp_leak) {
            return Err(Error::Config("sharp_leak must lie in [0, 1)".into()));
        }
        if p.prior.sharp_leak > 0.0 && p.prior.degraded.is_none() {
            return Err(Error::Config("sharp_leak needs degraded components".into()));
        }
        if !(p.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if let Some(k) = p.truth_component {
            if k >= p.prior.patterns.len() {
                return Err(Error::Config(format!("truth_component {k} out of range")));
            }
        }
        self.solver.validate()
    }
}

/// SplitMix64 finaliser mixing a master seed with a purpose tag, so each
/// random stream in a run is independent and reproducible.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = master;
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
