//! Synthetic test bench for studying how the choice of reference poses
//! ("pseudo ground truth", pGT) changes the apparent ranking of visual
//! re-localisation methods.
//!
//! Real re-localisation benchmarks do not have access to perfect camera
//! poses; their reference poses come from a reference algorithm such as a
//! depth-based SLAM system or a feature-based SfM reconstruction. This crate
//! builds fully synthetic scenes where the true poses *are* known, derives
//! pseudo ground truth with both families of reference algorithms, and
//! measures how localiser rankings move when the reference changes.
//!
//! Building blocks:
//!
//! - [`geom`]: pinhole camera model, poses, rigid/similarity alignment
//! - [`scene`]: planar scenes, smooth trajectories, depth and feature rendering
//! - [`slam`]: depth pipeline (TSDF fusion, projective ICP, global refinement)
//! - [`sfm`]: feature pipeline (triangulation, robust bundle adjustment)
//! - [`reloc`]: re-localiser archetypes (P3P/PnP, 3D-3D, dense reprojection)
//! - [`metrics`]: pose recall, alignment RMSE, dense reprojection error, CDFs
//! - [`pipeline`]: experiment orchestration behind the `pgt-lab` binary
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --release -p pgt-lab --example generate_bundle
//! cargo run --release -p pgt-lab --example slam_reference
//! cargo run --release -p pgt-lab --example sfm_reference
//! cargo run --release -p pgt-lab --example localize_queries
//! cargo run --release -p pgt-lab --example evaluate_report
//! cargo run --release -p pgt-lab --example ranking_inversion
//! ```
//!
//! The same functionality is reachable through the thin `pgt-lab` binary
//! (`generate`, `make-pgt`, `localize`, `evaluate`, `inversion`).

pub mod geom;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod reloc;
pub mod rng;
pub mod scene;
pub mod sfm;
pub mod slam;
pub mod spatial;
