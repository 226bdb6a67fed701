//! Thin n-dimensional wrapper over `rustfft` for square periodic grids.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Unnormalised transform of an `side^dim` row-major array in place.
pub(crate) fn transform(data: &mut [Complex64], dim: usize, side: usize, inverse: bool) {
    debug_assert_eq!(data.len(), side.pow(dim as u32));
    let fft = plan(side, inverse);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(data, &mut scratch);
    if dim == 2 {
        transpose(data, side);
        fft.process_with_scratch(data, &mut scratch);
        transpose(data, side);
    }
}

fn transpose(data: &mut [Complex64], side: usize) {
    const BLOCK: usize = 32;
    for bi in (0..side).step_by(BLOCK) {
        for bj in (bi..side).step_by(BLOCK) {
            for i in bi..(bi + BLOCK).min(side) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + BLOCK).min(side) {
                    data.swap(i * side + j, j * side + i);
                }
            }
        }
    }
}

pub(crate) fn forward_real(values: &[f64], dim: usize, side: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, dim, side, false);
    data
}

/// Inverse transform including the `1/len` normalisation.
pub(crate) fn inverse_in_place(data: &mut [Complex64], dim: usize, side: usize) {
    transform(data, dim, side, true);
    let scale = 1.0 / data.len() as f64;
    for z in data.iter_mut() {
        *z *= scale;
    }
}
