//! Screening of 3D scans by segmentation-for-classification.
//!
//! The pipeline trains multi-scale deeply-supervised 3D segmentation
//! networks on synthetic abdominal phantoms, runs coarse-to-fine
//! sliding-window inference, filters the predicted mask by connected
//! components, and classifies a volume as abnormal when enough voxels
//! are segmented as tumor. Stages:
//!
//! 1. [`phantom`] – deterministic synthetic phantom volumes (normal and
//!    tumor-bearing) with ground-truth masks.
//! 2. [`nn`] – from-scratch 3D conv/deconv/pool/batchnorm kernels with
//!    analytic backward passes, and the deeply-supervised
//!    encoder-decoder built from them.
//! 3. [`train`] – balanced patch sampling, flip/rotate augmentation,
//!    polynomial LR decay, and SGD with momentum.
//! 4. [`infer`] – full-volume coarse scan, ROI extraction, fine scans
//!    inside the ROI, and probability fusion.
//! 5. [`postprocess`] – 6-connected component filtering, the K-voxel
//!    decision rule, and confidence scoring.
//! 6. [`metrics`] – DSC, sensitivity/specificity, ROC curves, and the
//!    cross-validation split protocol.

pub mod infer;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod postprocess;
pub mod train;
pub mod volume;

mod error;

pub use error::{Error, Result};
// TEMP pub use infer::{enumerate_windows, run_cascade, CascadeNets, InferenceConfig, WindowPlan};
pub use io::{load_manifest, load_volume, save_manifest, CaseEntry, CaseManifest, Volume};
// TEMP pub use metrics::{dsc, evaluate, make_splits, roc, sens_spec, EvalReport, SplitPlan};
pub use nn::network::{build_network, load_weights, save_weights, Network, NetworkConfig};
pub use phantom::{generate_case, generate_dataset, PhantomSpec};
// TEMP pub use postprocess::{
    classify, confidence_score, connected_components, filter_components, ComponentSet,
    ConfidenceParams, ScreeningResult,
};
// TEMP pub use train::{train_scale, TrainConfig};
pub use volume::{Box3, CtVolume, Dims, LabelVolume, ProbVolume};
