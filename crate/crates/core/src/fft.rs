//! Centered, unitary 3D discrete Fourier transform on x-fastest buffers.
//!
//! DC sits at index `n/2` on every axis. The forward and inverse transforms
//! are both scaled by `1/sqrt(N)`, so the inverse is the adjoint.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;
use crate::volume::Dims3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Pre-planned centered 3D transform for one volume shape.
#[derive(Clone)]
pub struct CenteredFft3<T: Real> {
    dims: Dims3,
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
    scale: T,
}

impl<T: Real> std::fmt::Debug for CenteredFft3<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CenteredFft3")
            .field("dims", &self.dims)
            .finish()
    }
}

impl<T: Real> CenteredFft3<T> {
    pub fn new(dims: Dims3) -> Self {
        let mut planner = FftPlanner::new();
        let lens = dims.as_array();
        let forward = lens.map(|n| planner.plan_fft_forward(n));
        let inverse = lens.map(|n| planner.plan_fft_inverse(n));
        let scale = T::one() / T::from_usize_lossy(dims.len()).sqrt();
        Self {
            dims,
            forward,
            inverse,
            scale,
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    /// Transforms one volume in place.
    pub fn process(&self, buf: &mut [Complex<T>], dir: Direction) {
        assert_eq!(
            buf.len(),
            self.dims.len(),
            "buffer does not match planned dims"
        );
        let plans = match dir {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        let [nx, ny, nz] = self.dims.as_array();
        let strides = [1, nx, nx * ny];
        let lens = [nx, ny, nz];
        let max_len = nx.max(ny).max(nz);
        let mut lane = vec![Complex::new(T::zero(), T::zero()); max_len];
        let mut scratch = Vec::new();

        for axis in 0..3 {
            let n = lens[axis];
            if n == 1 {
                continue;
            }
            let stride = strides[axis];
            let plan = &plans[axis];
            let need = plan.get_inplace_scratch_len();
            if scratch.len() < need {
                scratch.resize(need, Complex::new(T::zero(), T::zero()));
            }
            let half = n / 2;
            // Enumerate lane start offsets: every index whose coordinate on `axis` is 0.
            for start in lane_starts(self.dims, axis) {
                let lane = &mut lane[..n];
                for (j, v) in lane.iter_mut().enumerate() {
                    *v = buf[start + ((j + half) % n) * stride];
                }
                plan.process_with_scratch(lane, &mut scratch[..need]);
                for (i, v) in lane.iter().enumerate() {
                    buf[start + ((i + half) % n) * stride] = *v;
                }
            }
        }
        for v in buf.iter_mut() {
            *v = *v * self.scale;
        }
    }
}

fn lane_starts(dims: Dims3, axis: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims.as_array();
    let (a, b) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    (0..a * b).map(move |k| {
        let (i, j) = (k % a, k / a);
        match axis {
            0 => dims.index(0, i, j),
            1 => dims.index(i, 0, j),
            _ => dims.index(i, j, 0),
        }
    })
}
