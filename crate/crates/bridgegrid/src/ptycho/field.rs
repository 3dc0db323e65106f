//! Grid types for phase retrieval: complex fields, real intensity grids,
//! scan positions, and diffraction frames.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PtychoError;

/// A 2D complex grid in row-major order; houses the probe and object
/// estimates as well as per-frame exit waves.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    width: usize,
    height: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(width: usize, height: usize) -> Self {
        ComplexField {
            width,
            height,
            data: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        ComplexField {
            width,
            height,
            data: vec![Complex64::new(1.0, 0.0); width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<Complex64>) -> Result<Self, PtychoError> {
        if data.len() != width * height {
            return Err(PtychoError::ShapeMismatch {
                expected: (width, height),
                got_len: data.len(),
            });
        }
        Ok(ComplexField {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ComplexField {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Complex64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Sum of squared moduli.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.power().sqrt()
    }

    /// Elementwise linear combination of same-shaped fields.
    pub fn combine(terms: &[(f64, &ComplexField)]) -> ComplexField {
        let (w, h) = terms[0].1.shape();
        let mut out = ComplexField::zeros(w, h);
        for (coef, field) in terms {
            debug_assert_eq!(field.shape(), (w, h));
            for (o, z) in out.data.iter_mut().zip(&field.data) {
                *o += *coef * z;
            }
        }
        out
    }

    /// Interleaved `re, im` doubles, row-major.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for z in &self.data {
            out.push(z.re);
            out.push(z.im);
        }
        out
    }

    pub fn from_interleaved(width: usize, height: usize, raw: &[f64]) -> Result<Self, PtychoError> {
        if raw.len() != width * height * 2 {
            return Err(PtychoError::ShapeMismatch {
                expected: (width, height),
                got_len: raw.len() / 2,
            });
        }
        let data = raw
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Ok(ComplexField {
            width,
            height,
            data,
        })
    }
}

/// A 2D real grid, row-major; houses measured intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RealField {
    pub fn zeros(width: usize, height: usize) -> Self {
        RealField {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Scan offset of frame `j`: the probe window sits at integer pixel
/// offset `(x, y)` inside the object grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanPosition {
    pub j: usize,
    pub x: i32,
    pub y: i32,
}

impl ScanPosition {
    pub fn new(j: usize, x: i32, y: i32) -> Self {
        ScanPosition { j, x, y }
    }
}

/// One measured diffraction pattern, same shape as the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionFrame {
    pub j: usize,
    pub intensity: RealField,
}

impl DiffractionFrame {
    pub fn new(j: usize, intensity: RealField) -> Result<Self, PtychoError> {
        if intensity.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(PtychoError::InvalidData(format!(
                "frame {j} has negative or non-finite intensity"
            )));
        }
        Ok(DiffractionFrame { j, intensity })
    }
}

/// Check that the probe window at `pos` lies fully inside the object.
pub(crate) fn check_window(
    object: &ComplexField,
    probe_shape: (usize, usize),
    pos: &ScanPosition,
) -> Result<(), PtychoError> {
    let (pw, ph) = probe_shape;
    let ok = pos.x >= 0
        && pos.y >= 0
        && (pos.x as usize + pw) <= object.width()
        && (pos.y as usize + ph) <= object.height();
    if ok {
        Ok(())
    } else {
        Err(PtychoError::WindowOutOfBounds {
            j: pos.j,
            x: pos.x,
            y: pos.y,
        })
    }
}
