//! Protection toolkit for small image classifiers: an authorization gate in
//! front of the model, per-user fingerprint images, a weight watermark, and
//! an attack bench to measure how well all of it holds up.

pub mod attacks;
pub mod auth;
pub mod checkpoint;
pub mod cw;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod nn;
pub mod scalar;
pub mod train;
pub mod watermark;

pub use attacks::{
    finetune_attack, forgery_attack, predict_wm_survival, prune_attack, prune_layers, prune_sweep,
    AttackReport, ForgeryMethod,
};
pub use auth::{
    authenticate, authorized_predict, gate, unauthorized_predict, GateDecision, Session,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_mnist, ImageBatch};
pub use error::{Error, Result};
pub use fingerprint::{
    allocate, build_library, capacity, evaluate_fo, generate_fingerprint, Allocation, AuthPolicy,
    Fingerprint, FingerprintLibrary, FingerprintRecord, Fo, FoEvaluation, GenConfig, LibraryConfig,
};
pub use nn::{build_lenet5, build_small_cifar_cnn, Classifier, DEFAULT_WATERMARK_LAYER};
pub use scalar::Real;
pub use train::{evaluate, train, OptimizerKind, TrainConfig, TrainReport};
pub use watermark::{
    embed, extract, solve_map, wm_regularizer, EmbedMode, EmbedReport, MapParams, MapRange,
    VerificationResult, WatermarkPlan, WatermarkSpec, WM1, WM2,
};
