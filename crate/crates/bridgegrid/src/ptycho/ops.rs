//! The forward model and the two projections, plus the distributed
//! probe/object updates whose partial sums travel over allreduce.

use num_complex::Complex64;

use crate::collectives::{AllreduceVariant, Communicator, ReduceOp};

use super::fft::{fft2, ifft2};
use super::field::{check_window, ComplexField, DiffractionFrame, RealField, ScanPosition};
use super::{ObjectConstraints, PtychoError};

type Result<T> = std::result::Result<T, PtychoError>;

/// Below this Fourier magnitude a bin's phase is treated as undefined and
/// the projection assigns phase zero.
pub const AMP_FLOOR: f64 = 1e-300;

/// Exit wave of frame `pos`: the probe times the object window at the
/// scan offset, on the probe grid.
pub fn exit_wave(
    probe: &ComplexField,
    object: &ComplexField,
    pos: &ScanPosition,
) -> Result<ComplexField> {
    check_window(object, probe.shape(), pos)?;
    let (pw, ph) = probe.shape();
    let (ox, oy) = (pos.x as usize, pos.y as usize);
    Ok(ComplexField::from_fn(pw, ph, |u, v| {
        probe.at(u, v) * object.at(ox + u, oy + v)
    }))
}

/// Measured intensity model: squared modulus of the unitary Fourier
/// transform of the exit wave.
pub fn forward_intensity(psi: &ComplexField) -> RealField {
    let spectrum = fft2(psi);
    RealField {
        width: psi.width(),
        height: psi.height(),
        data: spectrum.as_slice().iter().map(|z| z.norm_sqr()).collect(),
    }
}

/// Modulus projection: rescale the Fourier magnitudes of `psi` to match
/// `intensity`, keeping phases; degenerate bins get phase zero.
pub fn modulus_projection(psi: &ComplexField, intensity: &RealField) -> Result<ComplexField> {
    if (intensity.width, intensity.height) != psi.shape() {
        return Err(PtychoError::ShapeMismatch {
            expected: psi.shape(),
            got_len: intensity.data.len(),
        });
    }
    let mut spectrum = fft2(psi);
    for (z, i) in spectrum.as_mut_slice().iter_mut().zip(&intensity.data) {
        let target = i.max(0.0).sqrt();
        let m = z.norm();
        *z = if m > AMP_FLOOR {
            *z * (target / m)
        } else {
            Complex64::new(target, 0.0)
        };
    }
    Ok(ifft2(&spectrum))
}

/// One fused SUM allreduce of a complex accumulator and a real one.
fn reduce_sums(
    num: &mut [Complex64],
    den: &mut [f64],
    comm: &Communicator,
    variant: AllreduceVariant,
) -> Result<()> {
    let n = num.len();
    let mut packed = Vec::with_capacity(n * 2 + den.len());
    for z in num.iter() {
        packed.push(z.re);
        packed.push(z.im);
    }
    packed.extend_from_slice(den);
    let reduced = comm.allreduce(&packed, ReduceOp::Sum, variant)?;
    for (k, z) in num.iter_mut().enumerate() {
        *z = Complex64::new(reduced[2 * k], reduced[2 * k + 1]);
    }
    den.copy_from_slice(&reduced[n * 2..]);
    Ok(())
}

fn divide_regularized(num: &[Complex64], den: &[f64], eps_reg: f64) -> Vec<Complex64> {
    num.iter()
        .zip(den)
        .map(|(z, d)| {
            let divisor = d + eps_reg;
            if divisor > 0.0 {
                z / divisor
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Probe update: local sums of `psi_j * conj(O window)` and `|O window|^2`
/// accumulated in ascending frame order, allreduced, then divided with
/// the absolute regularizer `eps_reg`.
pub fn probe_update(
    psi_local: &[ComplexField],
    object: &ComplexField,
    positions_local: &[ScanPosition],
    probe_shape: (usize, usize),
    eps_reg: f64,
    comm: &Communicator,
    variant: AllreduceVariant,
) -> Result<ComplexField> {
    if psi_local.len() != positions_local.len() {
        return Err(PtychoError::InvalidData(format!(
            "{} exit waves but {} positions",
            psi_local.len(),
            positions_local.len()
        )));
    }
    // The shape is a parameter so ranks holding no frames still agree on
    // the reduction length.
    let (pw, ph) = probe_shape;
    let mut num = vec![Complex64::new(0.0, 0.0); pw * ph];
    let mut den = vec![0.0f64; pw * ph];
    for (psi, pos) in psi_local.iter().zip(positions_local) {
        if psi.shape() != (pw, ph) {
            return Err(PtychoError::ShapeMismatch {
                expected: (pw, ph),
                got_len: psi.len(),
            });
        }
        check_window(object, (pw, ph), pos)?;
        let (ox, oy) = (pos.x as usize, pos.y as usize);
        for v in 0..ph {
            for u in 0..pw {
                let i = v * pw + u;
                let ow = object.at(ox + u, oy + v);
                num[i] += psi.at(u, v) * ow.conj();
                den[i] += ow.norm_sqr();
            }
        }
    }
    reduce_sums(&mut num, &mut den, comm, variant)?;
    ComplexField::from_data(pw, ph, divide_regularized(&num, &den, eps_reg))
}

/// Object update: local sums of `psi_j * conj(P)` and `|P|^2` scattered to
/// object coordinates, allreduced, then divided with `eps_reg`. The probe
/// shift convention matches the derivative of the distance functional.
pub fn object_update(
    psi_local: &[ComplexField],
    probe: &ComplexField,
    positions_local: &[ScanPosition],
    object_shape: (usize, usize),
    eps_reg: f64,
    comm: &Communicator,
    variant: AllreduceVariant,
) -> Result<ComplexField> {
    let (ow_w, ow_h) = object_shape;
    let (pw, ph) = probe.shape();
    let mut num = vec![Complex64::new(0.0, 0.0); ow_w * ow_h];
    let mut den = vec![0.0f64; ow_w * ow_h];
    for (psi, pos) in psi_local.iter().zip(positions_local) {
        if psi.shape() != (pw, ph) {
            return Err(PtychoError::ShapeMismatch {
                expected: (pw, ph),
                got_len: psi.len(),
            });
        }
        if pos.x < 0
            || pos.y < 0
            || pos.x as usize + pw > ow_w
            || pos.y as usize + ph > ow_h
        {
            return Err(PtychoError::WindowOutOfBounds {
                j: pos.j,
                x: pos.x,
                y: pos.y,
            });
        }
        let (ox, oy) = (pos.x as usize, pos.y as usize);
        for v in 0..ph {
            for u in 0..pw {
                let p = probe.at(u, v);
                let oi = (oy + v) * ow_w + (ox + u);
                num[oi] += psi.at(u, v) * p.conj();
                den[oi] += p.norm_sqr();
            }
        }
    }
    reduce_sums(&mut num, &mut den, comm, variant)?;
    ComplexField::from_data(ow_w, ow_h, divide_regularized(&num, &den, eps_reg))
}

/// Parameters threaded through the overlap projection.
#[derive(Debug, Clone, Copy)]
pub struct OverlapParams<'a> {
    pub eps_reg: f64,
    pub constraints: Option<&'a ObjectConstraints>,
    /// The probe is held fixed during the object-only warm-up.
    pub update_probe: bool,
}

/// Overlap projection: one object update, one probe update (unless held),
/// then recomputed exit waves from the refreshed pair.
pub fn overlap_projection(
    psi_local: &[ComplexField],
    object: &ComplexField,
    probe: &ComplexField,
    positions_local: &[ScanPosition],
    params: OverlapParams<'_>,
    comm: &Communicator,
    variant: AllreduceVariant,
) -> Result<(Vec<ComplexField>, ComplexField, ComplexField)> {
    let mut new_object = object_update(
        psi_local,
        probe,
        positions_local,
        object.shape(),
        params.eps_reg,
        comm,
        variant,
    )?;
    if let Some(c) = params.constraints {
        if c.enabled {
            new_object = apply_object_constraints(&new_object, c);
        }
    }
    let new_probe = if params.update_probe {
        probe_update(
            psi_local,
            &new_object,
            positions_local,
            probe.shape(),
            params.eps_reg,
            comm,
            variant,
        )?
    } else {
        probe.clone()
    };
    let mut new_psi = Vec::with_capacity(psi_local.len());
    for pos in positions_local {
        new_psi.push(exit_wave(&new_probe, &new_object, pos)?);
    }
    Ok((new_psi, new_object, new_probe))
}

/// Distance between the exit-wave set and the factorized model, summed
/// across all ranks and normalized by the total measured intensity.
pub fn error_metric(
    psi_local: &[ComplexField],
    probe: &ComplexField,
    object: &ComplexField,
    positions_local: &[ScanPosition],
    frames_local: &[DiffractionFrame],
    comm: &Communicator,
    variant: AllreduceVariant,
) -> Result<f64> {
    let mut residual = 0.0f64;
    for (psi, pos) in psi_local.iter().zip(positions_local) {
        let model = exit_wave(probe, object, pos)?;
        for (a, b) in psi.as_slice().iter().zip(model.as_slice()) {
            residual += (a - b).norm_sqr();
        }
    }
    let intensity: f64 = frames_local.iter().map(|f| f.intensity.sum()).sum();
    let reduced = comm.allreduce(&[residual, intensity], ReduceOp::Sum, variant)?;
    let (residual, intensity) = (reduced[0], reduced[1]);
    Ok(if intensity > 0.0 {
        residual / intensity
    } else {
        residual
    })
}

/// Clamp amplitude and phase per pixel into the configured boxes.
pub fn apply_object_constraints(object: &ComplexField, c: &ObjectConstraints) -> ComplexField {
    let (w, h) = object.shape();
    ComplexField::from_fn(w, h, |x, y| {
        let z = object.at(x, y);
        let amp = z.norm().clamp(c.amp_min, c.amp_max);
        let phase = z.arg().clamp(c.phase_min, c.phase_max);
        Complex64::from_polar(amp, phase)
    })
}

