//! Run configuration: one TOML file drives generation, training, and
//! evaluation. Every field is echoed into the run log header.

use super::optim::AdamConfig;
use super::PipelineError;
use crate::io::{PhantomConfig, SplitCounts};
use crate::net::NetConfig;
use crate::perturb::PerturbHyperparams;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which training signals are active in the finetuning phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Transform-equivalence loss on unlabeled inputs.
    pub image: bool,
    /// Perturbation-invariance loss across auxiliary decoders.
    pub feature: bool,
    /// Gate the feature loss by the reliable-voxel mask.
    pub masked: bool,
    pub tau_confidence: f64,
    pub tau_consensus: f64,
    /// Use full binary entropy for the confidence score instead of
    /// `-mu ln mu`.
    pub binary_entropy_confidence: bool,
    /// Detach the main prediction in consistency terms.
    pub stop_gradient_main: bool,
    /// Also apply the image-level term to labeled batches.
    pub image_on_labeled: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            image: true,
            feature: true,
            masked: true,
            tau_confidence: 0.34,
            tau_consensus: 0.12,
            binary_entropy_confidence: false,
            stop_gradient_main: false,
            image_on_labeled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub steps_per_epoch: usize,
    /// Consistency ramp length in finetune steps; 0 means 40% of the
    /// planned finetune steps.
    pub ramp_steps: usize,
    /// Early-stop patience in epochs without a significant validation
    /// improvement.
    pub patience: usize,
    /// Improvement margin in DSC points that resets the patience.
    pub min_improvement: f64,
    /// Sliding-window stride at validation/test time.
    pub eval_stride: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            pretrain_epochs: 20,
            finetune_epochs: 40,
            steps_per_epoch: 10,
            ramp_steps: 0,
            patience: 10,
            min_improvement: 0.1,
            eval_stride: 16,
        }
    }
}

impl ScheduleConfig {
    pub fn ramp_length(&self) -> usize {
        if self.ramp_steps > 0 {
            self.ramp_steps
        } else {
            (self.finetune_epochs * self.steps_per_epoch * 2 / 5).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    /// Probability of steering a labeled patch toward lesion voxels.
    pub lesion_bias: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            labeled: 1,
            unlabeled: 1,
            lesion_bias: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformPoolConfig {
    pub flips: bool,
    pub permutations: bool,
    pub max_shift: i64,
}

impl Default for TransformPoolConfig {
    fn default() -> Self {
        TransformPoolConfig {
            flips: true,
            permutations: true,
            max_shift: 0,
        }
    }
}

impl TransformPoolConfig {
    pub fn to_pool(self) -> crate::transform::TransformConfig {
        use crate::transform::{Transform, TransformConfig};
        let elements = match (self.flips, self.permutations) {
            (true, true) => Transform::cube_symmetries(),
            (true, false) => TransformConfig::flips_only().elements,
            (false, true) => Transform::cube_symmetries()
                .into_iter()
                .filter(|t| t.flip == [false; 3])
                .collect(),
            (false, false) => vec![Transform::identity()],
        };
        TransformConfig {
            elements,
            max_shift: self.max_shift,
        }
    }
}

/// Where the data comes from: an existing manifest, or phantoms
/// generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// Path to a `dcseg-manifest` file; empty means generate phantoms.
    pub manifest: String,
    pub phantom: PhantomConfigToml,
    pub counts: CountsToml,
}

/// TOML mirror of [`PhantomConfig`] (tuples spelled out as arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfigToml {
    pub extent: usize,
    pub lesion_count: [usize; 2],
    pub blobs_per_lesion: [usize; 2],
    pub radius_frac: [f64; 2],
    pub boundary_amp: f64,
    pub background: f32,
    pub contrast: f32,
    pub noise_sigma: f32,
    pub bias_amp: f32,
    pub edge_smoothing: usize,
    pub fg_range: [f64; 2],
    pub spacing: [f32; 3],
}

impl Default for PhantomConfigToml {
    fn default() -> Self {
        let c = PhantomConfig::default();
        PhantomConfigToml {
            extent: c.extent,
            lesion_count: [c.lesion_count.0, c.lesion_count.1],
            blobs_per_lesion: [c.blobs_per_lesion.0, c.blobs_per_lesion.1],
            radius_frac: [c.radius_frac.0, c.radius_frac.1],
            boundary_amp: c.boundary_amp,
            background: c.background,
            contrast: c.contrast,
            noise_sigma: c.noise_sigma,
            bias_amp: c.bias_amp,
            edge_smoothing: c.edge_smoothing,
            fg_range: [c.fg_range.0, c.fg_range.1],
            spacing: c.spacing,
        }
    }
}

impl PhantomConfigToml {
    pub fn to_phantom(&self) -> PhantomConfig {
        PhantomConfig {
            extent: self.extent,
            lesion_count: (self.lesion_count[0], self.lesion_count[1]),
            blobs_per_lesion: (self.blobs_per_lesion[0], self.blobs_per_lesion[1]),
            radius_frac: (self.radius_frac[0], self.radius_frac[1]),
            boundary_amp: self.boundary_amp,
            background: self.background,
            contrast: self.contrast,
            noise_sigma: self.noise_sigma,
            bias_amp: self.bias_amp,
            edge_smoothing: self.edge_smoothing,
            fg_range: (self.fg_range[0], self.fg_range[1]),
            spacing: self.spacing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountsToml {
    pub labeled_train: usize,
    pub unlabeled_train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CountsToml {
    fn default() -> Self {
        CountsToml {
            labeled_train: 10,
            unlabeled_train: 50,
            val: 3,
            test: 10,
        }
    }
}

impl CountsToml {
    pub fn to_counts(self) -> SplitCounts {
        SplitCounts {
            labeled_train: self.labeled_train,
            unlabeled_train: self.unlabeled_train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub net: NetConfig,
    pub data: DataConfig,
    pub optim: AdamConfig,
    pub schedule: ScheduleConfig,
    pub batch: BatchConfig,
    pub consistency: ConsistencyConfig,
    pub transforms: TransformPoolConfig,
    pub perturb: PerturbHyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            seeds: vec![0, 1, 2],
            out_dir: "runs/default".to_string(),
            net: NetConfig::default(),
            data: DataConfig::default(),
            optim: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            batch: BatchConfig::default(),
            consistency: ConsistencyConfig::default(),
            transforms: TransformPoolConfig::default(),
            perturb: PerturbHyperparams::default(),
        }
    }
}

/// Ablation presets over the consistency flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingVariant {
    /// No consistency at all; phase 2 keeps optimizing the supervised
    /// loss only.
    SupervisedOnly,
    ImageOnly,
    FeatureOnly,
    /// Both consistencies, no uncertainty gating.
    DualUnmasked,
    /// Both consistencies, reliable-voxel gating.
    Full,
}

impl TrainingVariant {
    pub const ALL: [TrainingVariant; 5] = [
        TrainingVariant::SupervisedOnly,
        TrainingVariant::ImageOnly,
        TrainingVariant::FeatureOnly,
        TrainingVariant::DualUnmasked,
        TrainingVariant::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainingVariant::SupervisedOnly => "supervised",
            TrainingVariant::ImageOnly => "image_consistency",
            TrainingVariant::FeatureOnly => "feature_consistency",
            TrainingVariant::DualUnmasked => "dual_unmasked",
            TrainingVariant::Full => "full",
        }
    }

    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            TrainingVariant::SupervisedOnly => (false, false, false),
            TrainingVariant::ImageOnly => (true, false, false),
            TrainingVariant::FeatureOnly => (false, true, false),
            TrainingVariant::DualUnmasked => (true, true, false),
            TrainingVariant::Full => (true, true, true),
        }
    }
}

impl RunConfig {
    pub fn with_variant(mut self, v: TrainingVariant) -> Self {
        let (image, feature, masked) = v.flags();
        self.consistency.image = image;
        self.consistency.feature = feature;
        self.consistency.masked = masked;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.net
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(PipelineError::Config("seeds must not be empty".into()));
        }
        if self.schedule.steps_per_epoch == 0 {
            return Err(PipelineError::Config("steps_per_epoch must be >= 1".into()));
        }
        if self.batch.labeled == 0 {
            return Err(PipelineError::Config("labeled batch must be >= 1".into()));
        }
        if self.consistency.tau_confidence <= 0.0 || self.consistency.tau_consensus <= 0.0 {
            return Err(PipelineError::Config("thresholds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.batch.lesion_bias) {
            return Err(PipelineError::Config("lesion_bias must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seeds = [7]
            [net]
            levels = 2
            patch = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.net.levels, 2);
        assert_eq!(cfg.net.patch, 16);
        assert_eq!(cfg.net.base_channels, NetConfig::default().base_channels);
        assert!((cfg.consistency.tau_confidence - 0.34).abs() < 1e-12);
        assert!((cfg.consistency.tau_consensus - 0.12).abs() < 1e-12);
        assert!((cfg.optim.lr - 1e-3).abs() < 1e-15);
        assert!((cfg.optim.decay_per_epoch - 0.95).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml_str("seeds = []").is_err());
        assert!(RunConfig::from_toml_str(
            r#"
            [net]
            patch = 30
            "#
        )
        .is_err());
        assert!(RunConfig::from_toml_str(
            r#"
            [consistency]
            tau_confidence = 0.0
            "#
        )
        .is_err());
    }

    #[test]
    fn variants_toggle_the_right_flags() {
        let base = RunConfig::default();
        let s = base.clone().with_variant(TrainingVariant::SupervisedOnly);
        assert!(!s.consistency.image && !s.consistency.feature && !s.consistency.masked);
        let ic = base.clone().with_variant(TrainingVariant::ImageOnly);
        assert!(ic.consistency.image && !ic.consistency.feature);
        let full = base.clone().with_variant(TrainingVariant::Full);
        assert!(full.consistency.image && full.consistency.feature && full.consistency.masked);
        let dual = base.with_variant(TrainingVariant::DualUnmasked);
        assert!(dual.consistency.image && dual.consistency.feature && !dual.consistency.masked);
    }

    #[test]
    fn ramp_default_is_forty_percent_of_finetune_steps() {
        let s = ScheduleConfig {
            finetune_epochs: 50,
            steps_per_epoch: 10,
            ramp_steps: 0,
            ..ScheduleConfig::default()
        };
        assert_eq!(s.ramp_length(), 200);
        let explicit = ScheduleConfig {
            ramp_steps: 77,
            ..s
        };
        assert_eq!(explicit.ramp_length(), 77);
    }

    #[test]
    fn transform_pool_configs() {
        assert_eq!(TransformPoolConfig::default().to_pool().elements.len(), 48);
        let none = TransformPoolConfig {
            flips: false,
            permutations: false,
            max_shift: 0,
        };
        let pool = none.to_pool();
        assert_eq!(pool.elements.len(), 1);
        assert!(pool.elements[0].is_identity());
        let flips = TransformPoolConfig {
            flips: true,
            permutations: false,
            max_shift: 0,
        };
        assert_eq!(flips.to_pool().elements.len(), 8);
        let perms = TransformPoolConfig {
            flips: false,
            permutations: true,
            max_shift: 0,
        };
        assert_eq!(perms.to_pool().elements.len(), 6);
    }
}
