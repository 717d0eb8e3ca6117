//! Core library for single-reference 6D pose estimation.
//!
//! Given one annotated RGB-D reference view of an object, the pipeline
//! estimates the object's pose in any query view by iteratively aligning
//! both point clouds in the object coordinate system:
//!
//! 1. [`geom`] — back-projection of depth maps, rigid-pose algebra,
//!    focalization into the object frame, and the weighted-SVD solver.
//! 2. [`seqmodel`] — state-space sequence kernels (zero-order-hold
//!    discretization, selective scans) and the two feature extractors
//!    built on them: a point-cloud scan and a multi-scale image scan.
//! 3. [`align`] — feature refinement, affinity matching, correspondence
//!    selection, pose solving, the iterative estimation loop, and the
//!    bidirectional cross-entropy training objective.
//! 4. [`synth`] — procedural scenes with exact ground truth, a z-buffer
//!    depth renderer, oracle feature injection, and pose-accuracy metrics.
//!
//! File formats and the command-line driver live in the companion
//! `refpose-cli` crate.

pub mod align;
pub mod geom;
pub mod rng;
pub mod seqmodel;
pub mod synth;
pub mod tensor;
pub mod view;
