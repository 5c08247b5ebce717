//! Voxelwise Patlak fitting.
//!
//! The Patlak model is linear in `(v_p, K^trans)`, so the least-squares fit
//! reduces to one 2×2 normal system shared by every voxel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PkError, Result};
use crate::model::{PatlakBasis, PkMaps, VascularInputFunction};
use crate::scalar::Real;
use crate::volume::{DynamicSeries, SeriesKind, Volume};

/// Sum of squared Patlak residuals for one voxel curve.
pub fn patlak_objective<T: Real>(curve: &[T], basis: &PatlakBasis<T>, ktrans: T, vp: T) -> T {
    curve
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let r = c - basis.concentration(t, ktrans, vp);
            r * r
        })
        .sum()
}

/// Inverse of the Patlak normal matrix.
#[derive(Debug, Clone, Copy)]
struct NormalInverse<T> {
    // rows/cols ordered (vp, ktrans)
    a00: T,
    a01: T,
    a11: T,
}

impl<T: Real> NormalInverse<T> {
    fn new(basis: &PatlakBasis<T>) -> Result<Self> {
        let mut s_pp = T::zero();
        let mut s_pi = T::zero();
        let mut s_ii = T::zero();
        for (&p, &i) in basis.cp.iter().zip(&basis.cumint) {
            s_pp = s_pp + p * p;
            s_pi = s_pi + p * i;
            s_ii = s_ii + i * i;
        }
        let det = s_pp * s_ii - s_pi * s_pi;
        let trace = s_pp + s_ii;
        if !(det > T::lit(1e-12) * trace * trace) {
            return Err(PkError::Degenerate(format!(
                "Patlak normal matrix is singular (det = {det}, trace = {trace}); \
                 the input function carries no information at these frames"
            )));
        }
        Ok(Self {
            a00: s_ii / det,
            a01: -s_pi / det,
            a11: s_pp / det,
        })
    }

    /// Returns `(ktrans, vp)`.
    #[inline]
    fn solve(&self, curve: &[T], basis: &PatlakBasis<T>) -> (T, T) {
        let mut b_p = T::zero();
        let mut b_i = T::zero();
        for (t, &c) in curve.iter().enumerate() {
            b_p = b_p + basis.cp[t] * c;
            b_i = b_i + basis.cumint[t] * c;
        }
        let vp = self.a00 * b_p + self.a01 * b_i;
        let kt = self.a01 * b_p + self.a11 * b_i;
        (kt, vp)
    }
}

fn prepare<T: Real>(
    c: &DynamicSeries<T>,
    vif: &VascularInputFunction<T>,
    frame_times: &[T],
) -> Result<PatlakBasis<T>> {
    if c.kind() != SeriesKind::Concentration {
        return Err(invalid("Patlak fitting expects a concentration series"));
    }
    if frame_times.len() < 2 {
        return Err(invalid("Patlak fitting needs at least 2 frames"));
    }
    if frame_times.len() != c.nt() {
        return Err(invalid(format!(
            "{} frame times given for a {}-frame series",
            frame_times.len(),
            c.nt()
        )));
    }
    vif.basis_at(frame_times)
}

fn fit_voxels<T: Real>(
    c: &DynamicSeries<T>,
    per_voxel: impl Fn(&[T]) -> (T, T) + Sync,
) -> Result<PkMaps<T>> {
    let dims = c.dims();
    let (kt, vp): (Vec<T>, Vec<T>) = (0..dims.len())
        .into_par_iter()
        .map(|v| per_voxel(&c.curve(v)))
        .unzip();
    PkMaps::new(Volume::from_vec(dims, kt)?, Volume::from_vec(dims, vp)?)
}

/// Closed-form unconstrained least-squares Patlak fit of every voxel.
pub fn fit_patlak_lls<T: Real>(
    c: &DynamicSeries<T>,
    vif: &VascularInputFunction<T>,
    frame_times: &[T],
) -> Result<PkMaps<T>> {
    let basis = prepare(c, vif, frame_times)?;
    let inv = NormalInverse::new(&basis)?;
    fit_voxels(c, |curve| inv.solve(curve, &basis))
}

/// One axis of a search grid: `lo, lo + step, …` up to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self { lo, hi, step }
    }

    pub fn len(&self) -> usize {
        if !(self.step > 0.0) || !(self.hi >= self.lo) {
            return 0;
        }
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ktrans: GridAxis,
    pub vp: GridAxis,
}

/// Exhaustive grid search over `(ktrans, vp)` minimizing the Patlak objective.
/// Ties keep the first grid point in ktrans-major order.
pub fn fit_patlak_oracle<T: Real>(
    c: &DynamicSeries<T>,
    vif: &VascularInputFunction<T>,
    frame_times: &[T],
    grid: &GridSpec,
) -> Result<PkMaps<T>> {
    if grid.ktrans.is_empty() || grid.vp.is_empty() {
        return Err(invalid("search grid is empty"));
    }
    let basis = prepare(c, vif, frame_times)?;
    let kts: Vec<T> = (0..grid.ktrans.len())
        .map(|i| T::lit(grid.ktrans.value(i)))
        .collect();
    let vps: Vec<T> = (0..grid.vp.len())
        .map(|i| T::lit(grid.vp.value(i)))
        .collect();
    fit_voxels(c, |curve| {
        let mut best = (T::infinity(), kts[0], vps[0]);
        for &kt in &kts {
            for &vp in &vps {
                let j = patlak_objective(curve, &basis, kt, vp);
                if j < best.0 {
                    best = (j, kt, vp);
                }
            }
        }
        (best.1, best.2)
    })
}
