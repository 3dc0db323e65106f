//! Unitary 2D FFT on complex fields. Both directions scale by
//! `1/sqrt(width*height)` so Parseval holds exactly and intensities are
//! scale-stable.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::field::ComplexField;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(field: &ComplexField, forward: bool) -> ComplexField {
    let (w, h) = field.shape();
    let mut data = field.as_slice().to_vec();

    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = if forward {
            planner.plan_fft_forward(w)
        } else {
            planner.plan_fft_inverse(w)
        };
        let col_fft = if forward {
            planner.plan_fft_forward(h)
        } else {
            planner.plan_fft_inverse(h)
        };

        // Rows, then columns via transpose.
        row_fft.process(&mut data);
        let mut t = transpose(&data, w, h);
        col_fft.process(&mut t);
        data = transpose(&t, h, w);
    });

    let scale = 1.0 / ((w * h) as f64).sqrt();
    for z in data.iter_mut() {
        *z *= scale;
    }
    ComplexField::from_data(w, h, data).expect("shape preserved")
}

fn transpose(data: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = data[y * w + x];
        }
    }
    out
}

/// Forward unitary 2D DFT.
pub fn fft2(field: &ComplexField) -> ComplexField {
    transform(field, true)
}

/// Inverse unitary 2D DFT.
pub fn ifft2(field: &ComplexField) -> ComplexField {
    transform(field, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) DFT with the same unitary normalization; the
    /// independent oracle for the fast path.
    fn naive_dft(field: &ComplexField, forward: bool) -> ComplexField {
        let (w, h) = field.shape();
        let sign = if forward { -1.0 } else { 1.0 };
        let scale = 1.0 / ((w * h) as f64).sqrt();
        ComplexField::from_fn(w, h, |qx, qy| {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let angle = sign
                        * 2.0
                        * std::f64::consts::PI
                        * (qx as f64 * x as f64 / w as f64 + qy as f64 * y as f64 / h as f64);
                    acc += field.at(x, y) * Complex64::new(angle.cos(), angle.sin());
                }
            }
            acc * scale
        })
    }

    fn random_field(w: usize, h: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_fn(w, h, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn matches_naive_dft_oracle() {
        for (w, h, seed) in [(4, 4, 1), (8, 4, 2), (5, 7, 3)] {
            let f = random_field(w, h, seed);
            let fast = fft2(&f);
            let slow = naive_dft(&f, true);
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).norm() <= 1e-12, "{a} vs {b}");
            }
            let inv_fast = ifft2(&f);
            let inv_slow = naive_dft(&f, false);
            for (a, b) in inv_fast.as_slice().iter().zip(inv_slow.as_slice()) {
                assert!((a - b).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn roundtrip_recovers_input() {
        let f = random_field(16, 16, 9);
        let back = ifft2(&fft2(&f));
        for (a, b) in back.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn parseval_energy_conservation() {
        for seed in 0..20 {
            let f = random_field(16, 12, seed);
            let transformed = fft2(&f);
            let a = f.power();
            let b = transformed.power();
            assert!(
                ((a - b) / a).abs() <= 1e-12,
                "energy not conserved: {a} vs {b}"
            );
        }
    }
}
