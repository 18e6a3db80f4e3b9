//! Run configuration: a TOML document with sections
//! `{backbone, lora, targets, degradation, train, metrics, paths}`.
//!
//! Every field can be overridden on the command line as
//! `--section.key value`; unknown keys are rejected. Commands echo the
//! fully-resolved config into the run directory so a run is reproducible
//! from that file alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub lora: LoraSection,
    pub targets: TargetsSection,
    pub degradation: DegradationSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
    pub paths: PathsSection,
}

/// Backbone selection plus the union of both architectures' knobs; the
/// chosen `kind` reads the fields it needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub kind: String,
    // transformer knobs
    pub embed_dim: usize,
    pub n_rtlb: usize,
    pub tll_per_rtlb: usize,
    pub n_heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub img_range: f64,
    // CNN knobs
    pub n_feats: usize,
    pub n_resblocks: usize,
    pub res_scale: f64,
    // shared
    pub upscale: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            kind: "tiny-edsr".into(),
            embed_dim: 32,
            n_rtlb: 2,
            tll_per_rtlb: 2,
            n_heads: 4,
            window: 8,
            mlp_ratio: 2.0,
            img_range: 1.0,
            n_feats: 32,
            n_resblocks: 4,
            res_scale: 1.0,
            upscale: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection { rank: 8, alpha: 1.0, init_std: 0.02, seed: 0 }
    }
}

impl LoraSection {
    pub fn to_lora_config(&self) -> crate::lora::LoraConfig {
        crate::lora::LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            init_std: self.init_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TargetsSection {
    /// Named preset; ignored when `patterns` is non-empty.
    pub preset: String,
    /// Explicit dotted-name patterns (`*` wildcards allowed).
    pub patterns: Vec<String>,
}

impl Default for TargetsSection {
    fn default() -> Self {
        TargetsSection { preset: "all".into(), patterns: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSection {
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    pub downscale: usize,
    /// Gaussian noise sigma range in 0–255 units.
    pub noise_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
    pub second_order: bool,
    pub seed: u64,
}

impl Default for DegradationSection {
    fn default() -> Self {
        DegradationSection {
            blur_kernel: 7,
            blur_sigma: [0.2, 2.0],
            downscale: 4,
            noise_sigma: [1.0, 10.0],
            jpeg_quality: [60, 95],
            second_order: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iters: usize,
    pub batch: usize,
    pub lr0: f64,
    /// `[fraction_of_iters, multiplier]` rows; `None` picks the built-in
    /// schedule of the training mode.
    pub milestones: Option<Vec<[f64; 2]>>,
    pub seed: u64,
    pub eval_every: usize,
    /// Data/compute worker count; 1 forces fully sequential execution.
    pub workers: usize,
    /// HR patch side used for training crops.
    pub patch_size: usize,
    /// Probability of degrading a training patch with plain bicubic
    /// instead of the configured pipeline (source-domain mixing).
    pub bicubic_mix: f64,
    // synthetic corpus knobs
    pub corpus_images: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub val_images: usize,
    pub val_size: usize,
    pub val_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            iters: 2000,
            batch: 8,
            lr0: 1e-3,
            milestones: None,
            seed: 0,
            eval_every: 250,
            workers: 2,
            patch_size: 64,
            bicubic_mix: 0.0,
            corpus_images: 24,
            corpus_size: 160,
            corpus_seed: 100,
            val_images: 12,
            val_size: 96,
            val_seed: 900,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub use_y_channel: bool,
    /// Pixels cropped from each border before PSNR/SSIM; `None` uses the
    /// model upscale factor.
    pub crop_border: Option<usize>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            use_y_channel: true,
            crop_border: None,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Output directory of the command (run directory).
    pub run_dir: Option<String>,
    /// Directory of PNG images to use as HR corpus instead of the
    /// procedural generator.
    pub corpus_dir: Option<String>,
    /// Pretrained base checkpoint consumed by adapt/finetune/eval.
    pub base_ckpt: Option<String>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// Build a config from an optional file plus `--section.key value`
    /// overrides, rejecting unknown keys.
    pub fn resolve(file: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(p) => {
                let s = std::fs::read_to_string(p)?;
                toml::from_str(&s).map_err(|e| Error::ConfigParse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::ConfigParse(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Set `section.key = parsed(value)` inside a TOML table.
fn apply_override(table: &mut toml::Table, dotted: &str, value: &str) -> Result<()> {
    let (section, key) = dotted.split_once('.').ok_or_else(|| {
        Error::ConfigParse(format!("override '{dotted}' must be section.key"))
    })?;
    if section.is_empty() || key.is_empty() {
        return Err(Error::ConfigParse(format!("override '{dotted}' must be section.key")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(Error::ConfigParse(format!("'{section}' is not a section")));
    };
    sec.insert(key.to_string(), parse_flag_value(value));
    Ok(())
}

/// Interpret a CLI value string as the most specific TOML value it parses
/// as: bool, integer, float, array, then string.
fn parse_flag_value(s: &str) -> toml::Value {
    match s {
        "true" => return toml::Value::Boolean(true),
        "false" => return toml::Value::Boolean(false),
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if s.starts_with('[') {
        if let Ok(tbl) = toml::from_str::<toml::Table>(&format!("v = {s}")) {
            if let Some(v) = tbl.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[train]\nnot_a_key = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("train.iters".into(), "123".into()),
                ("train.lr0".into(), "0.01".into()),
                ("backbone.kind".into(), "tiny-swin".into()),
                ("degradation.blur_sigma".into(), "[0.5, 1.5]".into()),
                ("metrics.use_y_channel".into(), "false".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.iters, 123);
        assert_eq!(cfg.train.lr0, 0.01);
        assert_eq!(cfg.backbone.kind, "tiny-swin");
        assert_eq!(cfg.degradation.blur_sigma, [0.5, 1.5]);
        assert!(!cfg.metrics.use_y_channel);
    }

    #[test]
    fn bad_override_key_rejected() {
        assert!(RunConfig::resolve(None, &[("train.nope".into(), "1".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("iters".into(), "1".into())]).is_err());
    }
}
