//! Iterative projection solvers: difference map and relaxed averaged
//! alternating reflections, both bulk-synchronous per iteration with all
//! cross-rank traffic inside the probe/object updates and the error sum.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::collectives::{AllreduceVariant, Communicator};

use super::field::{ComplexField, DiffractionFrame, ScanPosition};
use super::ops::{
    error_metric, exit_wave, modulus_projection, overlap_projection, OverlapParams,
};
use super::PtychoError;

type Result<T> = std::result::Result<T, PtychoError>;

/// Aperture radius as a fraction of the probe grid; shared by the
/// synthetic generator's true probe and the solver's initial guess.
pub const APERTURE_RADIUS_FRAC: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dm,
    Raar,
}

/// Amplitude and phase clamp boxes applied after each object update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectConstraints {
    pub amp_min: f64,
    pub amp_max: f64,
    pub phase_min: f64,
    pub phase_max: f64,
    pub enabled: bool,
}

impl Default for ObjectConstraints {
    fn default() -> Self {
        ObjectConstraints {
            amp_min: 0.0,
            amp_max: 1.0,
            phase_min: -std::f64::consts::FRAC_PI_2,
            phase_max: std::f64::consts::FRAC_PI_2,
            enabled: false,
        }
    }
}

impl ObjectConstraints {
    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        if self.amp_min > self.amp_max
            || self.phase_min > self.phase_max
            || self.phase_min < -pi
            || self.phase_max > pi
        {
            return Err(PtychoError::InvalidConfig(format!(
                "bad constraint box: amp [{}, {}], phase [{}, {}]",
                self.amp_min, self.amp_max, self.phase_min, self.phase_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub beta: f64,
    /// Difference-map relaxation; `-1/beta` when absent.
    pub gamma1: Option<f64>,
    /// Difference-map relaxation; `1/beta` when absent.
    pub gamma2: Option<f64>,
    pub iterations: usize,
    /// Absolute denominator regularizer for the probe/object updates.
    pub eps_reg: f64,
    pub allreduce_variant: AllreduceVariant,
    pub constraints: ObjectConstraints,
    /// Object-only warm-up: the probe stays fixed before this iteration.
    pub probe_update_start: usize,
    /// Abort with DIVERGED when the error exceeds 10x its initial value.
    pub diverge_abort: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            algorithm: Algorithm::Raar,
            beta: 0.9,
            gamma1: None,
            gamma2: None,
            iterations: 300,
            eps_reg: 1e-8,
            allreduce_variant: AllreduceVariant::Tree,
            constraints: ObjectConstraints::default(),
            probe_update_start: 10,
            diverge_abort: true,
        }
    }
}

impl SolverConfig {
    pub fn dm_defaults() -> Self {
        SolverConfig {
            algorithm: Algorithm::Dm,
            beta: 1.0,
            ..SolverConfig::default()
        }
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1.unwrap_or(-1.0 / self.beta)
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2.unwrap_or(1.0 / self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(PtychoError::InvalidConfig(format!(
                "beta {} outside (0, 1]",
                self.beta
            )));
        }
        if self.iterations < 1 {
            return Err(PtychoError::InvalidConfig("iterations < 1".into()));
        }
        if !(self.eps_reg > 0.0) {
            return Err(PtychoError::InvalidConfig("eps_reg must be > 0".into()));
        }
        self.constraints.validate()
    }
}

/// Current estimates plus the per-iteration error history; the history
/// length equals the number of completed iterations.
#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub probe: ComplexField,
    pub object: ComplexField,
    pub exit_waves: Vec<ComplexField>,
    pub error_history: Vec<f64>,
}

impl ReconstructionState {
    pub fn iteration(&self) -> usize {
        self.error_history.len()
    }
}

fn constraints_opt(config: &SolverConfig) -> Option<&ObjectConstraints> {
    config.constraints.enabled.then_some(&config.constraints)
}

fn overlap_params<'a>(config: &'a SolverConfig, iteration: usize) -> OverlapParams<'a> {
    OverlapParams {
        eps_reg: config.eps_reg,
        constraints: constraints_opt(config),
        update_probe: iteration >= config.probe_update_start,
    }
}

/// One difference-map iteration:
/// `psi += beta * (pi_1(f_2(psi)) - pi_2(f_1(psi)))` with
/// `f_i(psi) = (1 + gamma_i) pi_i(psi) - gamma_i psi`, where `pi_1` is the
/// modulus projection and `pi_2` the overlap projection. Estimates are
/// taken from the overlap projection of the incoming iterate, and the
/// appended error measures the distance between the two projected
/// branches.
pub fn dm_step(
    state: &mut ReconstructionState,
    frames: &[DiffractionFrame],
    positions: &[ScanPosition],
    config: &SolverConfig,
    comm: &Communicator,
) -> Result<()> {
    let iteration = state.iteration();
    let params = overlap_params(config, iteration);
    let variant = config.allreduce_variant;
    let (g1, g2, beta) = (config.gamma1(), config.gamma2(), config.beta);

    // pi_2(psi) and f_2 = (1+g2) pi_2(psi) - g2 psi
    let (pi2_psi, o_est, p_est) = overlap_projection(
        &state.exit_waves,
        &state.object,
        &state.probe,
        positions,
        params,
        comm,
        variant,
    )?;
    let f2: Vec<ComplexField> = pi2_psi
        .iter()
        .zip(&state.exit_waves)
        .map(|(p, s)| ComplexField::combine(&[(1.0 + g2, p), (-g2, s)]))
        .collect();

    // t1 = pi_1(f_2)
    let mut t1 = Vec::with_capacity(f2.len());
    for (f, frame) in f2.iter().zip(frames) {
        t1.push(modulus_projection(f, &frame.intensity)?);
    }

    // f_1 = (1+g1) pi_1(psi) - g1 psi
    let mut f1 = Vec::with_capacity(state.exit_waves.len());
    for (psi, frame) in state.exit_waves.iter().zip(frames) {
        let proj = modulus_projection(psi, &frame.intensity)?;
        f1.push(ComplexField::combine(&[(1.0 + g1, &proj), (-g1, psi)]));
    }

    // t2 = pi_2(f_1)
    let (t2, o_t2, p_t2) = overlap_projection(
        &f1,
        &state.object,
        &state.probe,
        positions,
        params,
        comm,
        variant,
    )?;

    for ((psi, a), b) in state.exit_waves.iter_mut().zip(&t1).zip(&t2) {
        *psi = ComplexField::combine(&[(1.0, psi), (beta, a), (-beta, b)]);
    }
    state.object = o_est;
    state.probe = p_est;

    let err = error_metric(&t1, &p_t2, &o_t2, positions, frames, comm, variant)?;
    state.error_history.push(err);
    Ok(())
}

/// One RAAR iteration, exactly as the operator form is written:
/// `psi <- 2 beta pi_0(pi_a(psi)) + (1 - 2 beta) pi_a(psi)
///         + beta (psi - pi_0(psi))`
/// with `pi_a` the modulus projection and `pi_0` the overlap projection.
pub fn raar_step(
    state: &mut ReconstructionState,
    frames: &[DiffractionFrame],
    positions: &[ScanPosition],
    config: &SolverConfig,
    comm: &Communicator,
) -> Result<()> {
    let iteration = state.iteration();
    let params = overlap_params(config, iteration);
    let variant = config.allreduce_variant;
    let beta = config.beta;

    // pi_a(psi)
    let mut pa = Vec::with_capacity(state.exit_waves.len());
    for (psi, frame) in state.exit_waves.iter().zip(frames) {
        pa.push(modulus_projection(psi, &frame.intensity)?);
    }
    // pi_0(pi_a(psi)): the solution branch, which also refreshes the
    // probe/object estimates.
    let (po_pa, o_est, p_est) = overlap_projection(
        &pa,
        &state.object,
        &state.probe,
        positions,
        params,
        comm,
        variant,
    )?;
    // pi_0(psi)
    let (po_psi, _, _) = overlap_projection(
        &state.exit_waves,
        &state.object,
        &state.probe,
        positions,
        params,
        comm,
        variant,
    )?;

    for (((psi, a), b), c) in state
        .exit_waves
        .iter_mut()
        .zip(&po_pa)
        .zip(&pa)
        .zip(&po_psi)
    {
        *psi = ComplexField::combine(&[
            (2.0 * beta, a),
            (1.0 - 2.0 * beta, b),
            (beta, psi),
            (-beta, c),
        ]);
    }
    state.object = o_est.clone();
    state.probe = p_est.clone();

    let err = error_metric(&pa, &p_est, &o_est, positions, frames, comm, variant)?;
    state.error_history.push(err);
    Ok(())
}

/// Initial probe guess: a hard circular aperture with unit amplitude.
pub fn aperture_guess(width: usize, height: usize) -> ComplexField {
    let radius = APERTURE_RADIUS_FRAC * width.min(height) as f64;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    ComplexField::from_fn(width, height, |x, y| {
        let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        if r <= radius {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Contiguous block partition of `total` frames over `size` ranks:
/// ceil(total/size) frames to the leading ranks.
pub fn partition_frames(total: usize, size: u32) -> Vec<std::ops::Range<usize>> {
    let size = size as usize;
    let block = total.div_ceil(size.max(1));
    (0..size)
        .map(|r| {
            let start = (r * block).min(total);
            let end = ((r + 1) * block).min(total);
            start..end
        })
        .collect()
}

/// Run the configured solver over this rank's frame block. Deterministic
/// given the inputs, partitioning, and the tree allreduce variant.
pub fn reconstruct(
    frames_local: &[DiffractionFrame],
    positions_local: &[ScanPosition],
    probe_shape: (usize, usize),
    object_shape: (usize, usize),
    config: &SolverConfig,
    comm: &Communicator,
) -> Result<ReconstructionState> {
    config.validate()?;
    if frames_local.len() != positions_local.len() {
        return Err(PtychoError::InvalidData(format!(
            "{} frames but {} positions",
            frames_local.len(),
            positions_local.len()
        )));
    }

    let probe = aperture_guess(probe_shape.0, probe_shape.1);
    let object = ComplexField::ones(object_shape.0, object_shape.1);
    let mut exit_waves = Vec::with_capacity(positions_local.len());
    for pos in positions_local {
        exit_waves.push(exit_wave(&probe, &object, pos)?);
    }
    let mut state = ReconstructionState {
        probe,
        object,
        exit_waves,
        error_history: Vec::new(),
    };

    let mut initial_error = None;
    for _ in 0..config.iterations {
        match config.algorithm {
            Algorithm::Dm => dm_step(&mut state, frames_local, positions_local, config, comm)?,
            Algorithm::Raar => raar_step(&mut state, frames_local, positions_local, config, comm)?,
        }
        let err = *state.error_history.last().expect("step appends an error");
        let initial = *initial_error.get_or_insert(err);
        if config.diverge_abort && err > 10.0 * initial && initial > 0.0 {
            return Err(PtychoError::Diverged {
                iteration: state.iteration(),
                error: err,
            });
        }
    }
    Ok(state)
}
