//! Class-targeted data poisoning against online-trained MLP classifiers.
//!
//! * [`nn`]: the MLP, its gradients, SGD and checkpoints.
//! * [`datasets`]: synthetic blobs, IDX (MNIST) loading, splits and batching.
//! * [`attacks`]: All-Supplanter and Only-Victim poison generators plus baselines.
//! * [`metrics`]: CTT / CFT / accuracy against a frozen pre-attack snapshot.
//! * [`harness`]: pretraining and online poisoning sessions.

pub mod attacks;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod textio;

pub use attacks::{ASConfig, OVConfig, PoisonedExample, Provenance, StopReason};
pub use datasets::{BlobSpec, Dataset, DatasetRole, LabeledExample};
pub use error::{Error, Result};
pub use harness::{
    ASExperiment, AsMethod, AttackSession, CurveMetric, CurvePoint, OVExperiment, OvMethod, PretrainConfig,
    Pretrained, SessionInputs,
};
pub use metrics::{EvalReport, Phase, PredictionSnapshot};
pub use nn::{GradientBundle, LogitVector, LrSchedule, MlpModel, TensorImage};
