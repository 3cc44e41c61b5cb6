//! Desk-scale laboratory for mitigating background shortcut learning in
//! sectored-image classification.
//!
//! The crate generates synthetic ultrasound-like frames with a planted
//! background shortcut, trains a small residual classifier with background
//! augmentations (BackMix and friends), and measures where the trained model
//! looks via GradCAM-based focus metrics.
//!
//! Modules mirror the pipeline stages:
//! - [`data`]: synthetic dataset generation, manifests, patient-level splits
//! - [`sector`]: sector/background decomposition and classical mask estimation
//! - [`augment`]: standard augmentations, BackMix, baseline background swaps
//! - [`objective`]: example-level loss weighting and weighted cross-entropy
//! - [`classifier`]: residual CNN, training loop, checkpoints
//! - [`attribution`]: GradCAM activation maps
//! - [`evaluation`]: focus metrics (%E, %F) and classification metrics
//! - [`harness`]: config-driven experiments, sweeps and reports

pub mod attribution;
pub mod augment;
pub mod classifier;
pub mod data;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod sector;

pub use attribution::ActivationMap;
pub use augment::{AugmentationPlan, AugmentedExample};
pub use classifier::{Model, ModelSpec, TrainConfig};
pub use data::{DatasetManifest, Domain, Frame, SyntheticSpec};
pub use evaluation::{ClassificationReport, FocusReport};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use objective::WeightingConfig;
pub use sector::SectorMask;
