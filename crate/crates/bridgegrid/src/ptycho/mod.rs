//! Ptychographic phase retrieval: the forward model, the modulus and
//! overlap projections, difference-map and RAAR solvers with
//! frame-partitioned distributed updates, and a synthetic dataset
//! generator for desk-scale verification.

mod fft;
mod field;
mod io;
mod ops;
mod simulate;
mod solver;

pub use fft::{fft2, ifft2};
pub use field::{ComplexField, DiffractionFrame, RealField, ScanPosition};
pub use io::{
    frame_file_name, load_frame, load_frames, load_meta, load_positions, read_complex_field,
    read_f64_le, render_amplitude, render_field, render_phase, write_complex_field, write_dataset,
    write_f64_le, write_pgm, DatasetMeta, META_FILE, POSITIONS_FILE,
};
pub use ops::{
    apply_object_constraints, error_metric, exit_wave, forward_intensity, modulus_projection,
    object_update, overlap_projection, probe_update, OverlapParams, AMP_FLOOR,
};
pub use simulate::{
    raster_positions, simulate_dataset, SimulateSpec, SimulatedDataset, MAX_STEP_FRAC,
};
pub use solver::{
    aperture_guess, dm_step, partition_frames, raar_step, reconstruct, Algorithm,
    ObjectConstraints, ReconstructionState, SolverConfig, APERTURE_RADIUS_FRAC,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PtychoError {
    #[error("probe window of frame {j} at ({x}, {y}) leaves the object bounds")]
    WindowOutOfBounds { j: usize, x: i32, y: i32 },
    #[error("shape mismatch: expected {expected:?}, got {got_len} samples")]
    ShapeMismatch {
        expected: (usize, usize),
        got_len: usize,
    },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dataset not found at {0}")]
    DataNotFound(String),
    #[error("diverged at iteration {iteration}: normalized error {error}")]
    Diverged { iteration: usize, error: f64 },
    #[error(transparent)]
    Collective(#[from] crate::collectives::CollectiveError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PtychoError {
    pub fn class(&self) -> &'static str {
        match self {
            PtychoError::WindowOutOfBounds { .. } => "WINDOW_OUT_OF_BOUNDS",
            PtychoError::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            PtychoError::InvalidConfig(_) => "INVALID_CONFIG",
            PtychoError::InvalidData(_) => "INVALID_DATA",
            PtychoError::DataNotFound(_) => "DATA_NOT_FOUND",
            PtychoError::Diverged { .. } => "DIVERGED",
            PtychoError::Collective(e) => e.class(),
            PtychoError::Io(_) => "IO",
            PtychoError::Json(_) => "JSON",
        }
    }
}
