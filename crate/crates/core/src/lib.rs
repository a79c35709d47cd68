//! Model-agnostic explanations for face verification.
//!
//! Given any embedding backend, [`xmap`] explains a verification decision
//! with occlusion-based similarity maps, and [`confidence`] turns the pair's
//! cosine distance into a calibrated confidence score.

pub mod confidence;
pub mod embedding;
pub mod imaging;
pub mod occlusion;
pub mod params;
pub mod synthetic;
pub mod xmap;

pub use confidence::{c_score, CScore, ConfidenceModel, DistanceSample, Label, SigmoidParams};
pub use embedding::{cosine_distance, EmbeddingBackend, FeatureVector, ReferenceEmbedder, SubprocessBackend};
pub use imaging::{Image, ScalarMap, FACE_SIZE};
pub use occlusion::{occlude_sweep, PatchFill, PatchShape, PatchSpec};
pub use params::SweepParams;
pub use synthetic::{synthetic_face, synthetic_face_variant};
pub use xmap::{explain_pair, explain_pair_methods, MethodKind, PairExplainContext, XMapResult};
