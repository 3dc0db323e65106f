//! Seeded synthetic dataset generator for desk-scale verification: a
//! smooth random object, an aperture probe with quadratic phase, and a
//! raster scan with at least 60% linear overlap.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{ComplexField, DiffractionFrame, ScanPosition};
use super::ops::{exit_wave, forward_intensity};
use super::solver::APERTURE_RADIUS_FRAC;
use super::PtychoError;

/// Maximum raster step as a fraction of the probe width.
pub const MAX_STEP_FRAC: f64 = 0.4;

/// Peak quadratic phase (radians) at the aperture edge of the true probe.
const PROBE_QUAD_PHASE: f64 = std::f64::consts::FRAC_PI_3;

/// Control-point cells per axis for the smooth random object.
const OBJECT_CELLS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub frames: usize,
    pub probe_size: usize,
    pub object_size: usize,
    pub step: usize,
    pub seed: u64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec {
            frames: 25,
            probe_size: 16,
            object_size: 64,
            step: 6,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub spec: SimulateSpec,
    pub probe: ComplexField,
    pub object: ComplexField,
    pub positions: Vec<ScanPosition>,
    pub frames: Vec<DiffractionFrame>,
}

/// Bilinear interpolation over a (cells+1)^2 lattice of random control
/// points, yielding a smooth field in [0, 1].
struct SmoothNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 1;
        SmoothNoise {
            cells,
            lattice: (0..n * n).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    fn sample(&self, fx: f64, fy: f64) -> f64 {
        let n = self.cells + 1;
        let gx = fx * self.cells as f64;
        let gy = fy * self.cells as f64;
        let x0 = (gx.floor() as usize).min(self.cells - 1);
        let y0 = (gy.floor() as usize).min(self.cells - 1);
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let v = |x: usize, y: usize| self.lattice[y * n + x];
        let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
        let bottom = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn true_object(size: usize, rng: &mut ChaCha8Rng) -> ComplexField {
    let amp_noise = SmoothNoise::new(rng, OBJECT_CELLS);
    let phase_noise = SmoothNoise::new(rng, OBJECT_CELLS);
    let denom = (size - 1).max(1) as f64;
    ComplexField::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 / denom, y as f64 / denom);
        let amp = 0.8 + 0.2 * amp_noise.sample(fx, fy);
        let phase = (2.0 * phase_noise.sample(fx, fy) - 1.0) * std::f64::consts::FRAC_PI_3;
        Complex64::from_polar(amp, phase)
    })
}

fn true_probe(size: usize) -> ComplexField {
    let radius = APERTURE_RADIUS_FRAC * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    ComplexField::from_fn(size, size, |x, y| {
        let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        if r <= radius {
            Complex64::from_polar(1.0, PROBE_QUAD_PHASE * (r / radius).powi(2))
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Raster positions, row-major, centered in the object.
pub fn raster_positions(spec: &SimulateSpec) -> Result<Vec<ScanPosition>, PtychoError> {
    let side = (spec.frames as f64).sqrt().ceil() as usize;
    let extent = (side - 1) * spec.step + spec.probe_size;
    if extent > spec.object_size {
        return Err(PtychoError::InvalidConfig(format!(
            "scan extent {extent} exceeds object size {}",
            spec.object_size
        )));
    }
    let origin = ((spec.object_size - extent) / 2) as i32;
    let mut positions = Vec::with_capacity(spec.frames);
    'grid: for row in 0..side {
        for col in 0..side {
            let j = row * side + col;
            if j >= spec.frames {
                break 'grid;
            }
            positions.push(ScanPosition::new(
                j,
                origin + (col * spec.step) as i32,
                origin + (row * spec.step) as i32,
            ));
        }
    }
    Ok(positions)
}

/// Deterministic generator: identical spec yields bitwise identical
/// probe, object, positions and frames.
pub fn simulate_dataset(spec: &SimulateSpec) -> Result<SimulatedDataset, PtychoError> {
    if spec.frames == 0 || spec.probe_size == 0 || spec.step == 0 {
        return Err(PtychoError::InvalidConfig(
            "frames, probe_size and step must be positive".into(),
        ));
    }
    let max_step = (MAX_STEP_FRAC * spec.probe_size as f64).floor() as usize;
    if spec.step > max_step {
        return Err(PtychoError::InvalidConfig(format!(
            "step {} exceeds {max_step} (40% of probe width {}); overlap would drop below 60%",
            spec.step, spec.probe_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let object = true_object(spec.object_size, &mut rng);
    let probe = true_probe(spec.probe_size);
    let positions = raster_positions(spec)?;

    let mut frames = Vec::with_capacity(positions.len());
    for pos in &positions {
        let psi = exit_wave(&probe, &object, pos)?;
        frames.push(DiffractionFrame::new(pos.j, forward_intensity(&psi))?);
    }
    Ok(SimulatedDataset {
        spec: *spec,
        probe,
        object,
        positions,
        frames,
    })
}
