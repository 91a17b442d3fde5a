//! Benchmark construction and evaluation toolkit for 3D hand pose
//! estimation, organised around controlled train/test splits over
//! viewpoint, articulation, shape and object axes.
//!
//! The crate provides:
//!
//! * [`data`] / [`io`] — the 21-joint skeleton model, dataset frames and
//!   predictions, JSONL ingestion with line-anchored errors, atomic output;
//! * [`hand`] — a differentiable capsule-based parametric hand (shape,
//!   global similarity, per-joint articulation) with a fixed joint
//!   regressor and mesh Laplacian;
//! * [`fit`] — fixed-step gradient-descent fitting of the hand model to
//!   target skeletons, with analytic gradients;
//! * [`annotate`] — viewpoint (azimuth/elevation bins), per-finger curl
//!   and 32-way articulation clusters, per-frame axis labels;
//! * [`split`] — seen/unseen axis specifications and the six-criterion
//!   benchmark split with an independent verifier;
//! * [`eval`] — mean joint error, frame/joint success curves, method
//!   ranking and per-label breakdowns;
//! * [`refine`] — SVD subspace refinement, temporal smoothing, prediction
//!   averaging and rotation ensembling;
//! * [`synth`] — parameter sampling around fitted poses and z-buffer depth
//!   rendering with real/synthetic depth mixing;
//! * [`demo`] — a seeded end-to-end corpus generator exercising the whole
//!   pipeline;
//! * [`cli`] — the `handbench` command-line front end.

pub mod annotate;
pub mod cli;
pub mod data;
pub mod demo;
pub mod eval;
pub mod fit;
pub mod hand;
pub mod io;
pub mod refine;
pub mod split;
pub mod synth;

pub use data::{CameraIntrinsics, Frame, Prediction, Skeleton, JOINT_COUNT};
pub use hand::{HandParams, TemplateMesh};

/// Toolkit version, mirrored by the CLI `--version` output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Data format versions, one per file kind the toolkit reads or writes.
pub const FORMAT_VERSIONS: &[(&str, &str)] = &[
    ("frames", "v1"),
    ("predictions", "v1"),
    ("labels", "v1"),
    ("fits", "v1"),
    ("split", "v1"),
    ("report", "v1"),
    ("template", "v1"),
];
