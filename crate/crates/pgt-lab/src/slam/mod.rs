//! Depth-based reference mapping: volumetric depth fusion, projective
//! point-to-plane ICP tracking, scan-to-scan registration, and joint
//! sparse-plus-geometric pose refinement.
//!
//! Tracking is deliberately incremental: each frame is aligned only against
//! the model fused so far, so depth noise accumulates into trajectory drift.
//! That drift is the raw material for everything downstream; the refinement
//! step reduces it but inherits the same geometric cost family.

mod icp;
mod refine;
mod tsdf;

pub use icp::{
    icp_point_plane, point_plane_cost, register_scans, track_sequence, IcpResult, TrackResult,
};
pub use refine::{
    build_geo_associations, global_refine, refine_gradient, refine_objective, GeoAssociation,
    SparseMatch,
};
pub use tsdf::{depth_cloud, DenseTsdf, DepthCloud, ModelView, TsdfVolume};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("icp degenerate: {0}")]
    IcpDegenerate(String),
    #[error("scan registration failed: {0}")]
    RegistrationFailed(String),
    #[error("pose refinement failed: {0}")]
    RefineSingular(String),
}

/// Parameters of the depth-based reference pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    /// Grid resolution of the fusion volume, metres.
    pub voxel_size: f64,
    /// Truncation distance of the signed distance field, metres.
    pub truncation: f64,
    /// Maximum Gauss-Newton steps per ICP solve.
    pub icp_iterations: usize,
    /// Correspondence distance gate for projective ICP, metres.
    pub icp_max_correspondence: f64,
    /// Weight of the sparse 3D feature term in the joint refinement.
    pub w_sprs: f64,
    /// Weight of the dense point-to-plane term in the joint refinement.
    pub w_geo: f64,
    /// Outer re-association rounds of the joint refinement.
    pub refine_iterations: usize,
}

impl Default for SlamConfig {
    fn default() -> SlamConfig {
        SlamConfig {
            voxel_size: 0.02,
            truncation: 0.10,
            icp_iterations: 30,
            icp_max_correspondence: 0.25,
            w_sprs: 1.0,
            w_geo: 1.0,
            refine_iterations: 3,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<(), SlamError> {
        if !(self.voxel_size > 0.0) {
            return Err(SlamError::ConfigInvalid("voxel_size must be positive".into()));
        }
        if !(self.truncation > self.voxel_size) {
            return Err(SlamError::ConfigInvalid(
                "truncation must exceed voxel_size".into(),
            ));
        }
        if self.icp_iterations < 1 || self.refine_iterations < 1 {
            return Err(SlamError::ConfigInvalid("iteration counts must be at least 1".into()));
        }
        if !(self.icp_max_correspondence > 0.0) {
            return Err(SlamError::ConfigInvalid(
                "icp_max_correspondence must be positive".into(),
            ));
        }
        if !(self.w_sprs >= 0.0) || !(self.w_geo >= 0.0) {
            return Err(SlamError::ConfigInvalid("term weights must be non-negative".into()));
        }
        Ok(())
    }
}
