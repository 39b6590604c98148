//! Training configuration: TOML with dotted sections, unknown keys rejected,
//! and `section.key=value` overrides applied on top of the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GeneratorSpec, PatchDiscriminatorSpec, PatchPadding, ReviserSpec};
use crate::nn::AdamConfig;
use crate::objectives::ObjectiveWeights;
use crate::region_proposal::GeometryConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub image_size: usize,
    pub region_size: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            image_size: 256,
            region_size: 64,
        }
    }
}

/// Ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    /// The reviser sees the masked fake; otherwise the whole fake.
    pub use_fake_mask: bool,
    pub use_reviser: bool,
    pub use_region_l1: bool,
    /// Use `−E log(1 − D)` for the generator instead of the non-saturating form.
    pub literal_generator_objective: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_fake_mask: true,
            use_reviser: true,
            use_region_l1: true,
            literal_generator_objective: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub base_width: usize,
    pub residual_blocks: usize,
    pub dropout: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = GeneratorSpec::default();
        GeneratorSection {
            base_width: d.base_width,
            residual_blocks: d.residual_blocks,
            dropout: d.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSection {
    pub base_width: usize,
    pub padding: PatchPadding,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        DiscriminatorSection {
            base_width: 64,
            padding: PatchPadding::Same,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviserSection {
    pub base_width: usize,
}

impl Default for ReviserSection {
    fn default() -> Self {
        ReviserSection { base_width: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
    pub reviser: AdamConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of A|B PNG pairs.
    pub dir: Option<PathBuf>,
    /// Random horizontal flips of training pairs.
    pub flip: bool,
    /// Samples held out from the end of the directory for evaluation.
    pub holdout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub checkpoint_every: u64,
    pub sample_every: u64,
    /// Samples per exported grid.
    pub max_samples: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            checkpoint_every: 1,
            sample_every: 1,
            max_samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub geometry: GeometrySection,
    pub weights: ObjectiveWeights,
    pub variant: VariantFlags,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    pub reviser: ReviserSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            batch_size: 1,
            geometry: GeometrySection::default(),
            weights: ObjectiveWeights::default(),
            variant: VariantFlags::default(),
            generator: GeneratorSection::default(),
            discriminator: DiscriminatorSection::default(),
            reviser: ReviserSection::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            in_channels: 3,
            out_channels: 3,
            base_width: self.generator.base_width,
            residual_blocks: self.generator.residual_blocks,
            dropout: self.generator.dropout,
        }
    }

    pub fn discriminator_spec(&self) -> PatchDiscriminatorSpec {
        PatchDiscriminatorSpec {
            in_channels: 3,
            base_width: self.discriminator.base_width,
            padding: self.discriminator.padding,
        }
    }

    pub fn reviser_spec(&self) -> ReviserSpec {
        ReviserSpec {
            in_channels: 3,
            base_width: self.reviser.base_width,
            resolution: self.geometry.image_size,
        }
    }

    /// Region geometry with the score-map size implied by the discriminator.
    pub fn geometry_config(&self) -> Result<GeometryConfig> {
        let image = self.geometry.image_size;
        let s = self.discriminator_spec().scoremap_size(image).ok_or_else(|| {
            Error::Config(format!("image_size {image} is too small for the patch discriminator"))
        })?;
        GeometryConfig::new(image, s, self.geometry.region_size)
    }

    /// Balance actually applied to the generator: 0 without a reviser.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.use_reviser {
            self.weights.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.generator.base_width == 0 || self.discriminator.base_width == 0 || self.reviser.base_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.generator.dropout) {
            return Err(Error::Config(format!(
                "generator.dropout = {} must be in [0, 1)",
                self.generator.dropout
            )));
        }
        if !self.geometry.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 4",
                self.geometry.image_size
            )));
        }
        for (name, a) in [
            ("generator", &self.optim.generator),
            ("discriminator", &self.optim.discriminator),
            ("reviser", &self.optim.reviser),
        ] {
            let ok = a.lr > 0.0
                && (0.0..1.0).contains(&a.beta1)
                && (0.0..1.0).contains(&a.beta2)
                && a.eps > 0.0;
            if !ok {
                return Err(Error::Config(format!("optim.{name} has invalid moments or rates: {a:?}")));
            }
        }
        if self.schedule.checkpoint_every == 0 || self.schedule.sample_every == 0 {
            return Err(Error::Config("schedule intervals must be positive".into()));
        }
        self.weights.validate()?;
        self.reviser_spec().stages()?;
        self.geometry_config()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
