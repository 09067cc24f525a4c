//! Trigger patches in diffusion initial noise: entropy of object positions,
//! energy two-sample tests, a calibrated sliding-window detector, patch
//! synthesis and reject-sampling workflows over a pluggable backend.

pub mod annotations;
pub mod backend;
pub mod detector;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod npy;
pub mod rng;
pub mod sampling;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use annotations::{BBoxAnnotation, DatasetManifest, NoiseRecord, Prompt, Space};
pub use backend::{
    Backend, ExternalBackend, GenerationRequest, GenerationResponse, SyntheticBackend,
    SyntheticParams,
};
pub use detector::{Detection, NullCalibration, WindowStatistic};
pub use error::{Error, Result};
pub use metrics::{EntropyReport, Side};
pub use tensor::{LatentTensor, Patch, Region, Shape};
