//! Randomized golden-angle radial undersampling patterns on a Cartesian
//! `(kx, ky)` grid.
//!
//! Every frame after the first is built from radial spokes through the DC
//! point. Consecutive spokes advance by the golden angle, and each frame's
//! spoke sequence is rotated by a random offset drawn from the seeded RNG.
//! The final spoke of a frame is shortened symmetrically around DC so the
//! sampled fraction lands on `1/R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kspace::SamplingMask;

/// Golden angle increment between successive spokes, in degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 111.246;

const MAX_SPOKES_PER_FRAME: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub nkx: usize,
    pub nky: usize,
    pub nt: usize,
    /// Target undersampling factor `R`.
    pub accel: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.accel >= 1.0) || !self.accel.is_finite() {
            return Err(invalid(format!(
                "acceleration must be >= 1, got {}",
                self.accel
            )));
        }
        if self.nt < 1 {
            return Err(invalid("mask needs at least one frame"));
        }
        if self.nkx < 8 || self.nky < 8 {
            return Err(invalid(format!(
                "mask grid must be at least 8x8, got {}x{}",
                self.nkx, self.nky
            )));
        }
        Ok(())
    }

    /// Number of points each undersampled frame should contain.
    pub fn target_count(&self) -> usize {
        ((self.nkx * self.nky) as f64 / self.accel).round() as usize
    }
}

/// Grid points along the spoke through DC at `angle` (radians), nearest to DC first.
fn rasterize_spoke(nkx: usize, nky: usize, angle: f64) -> Vec<(usize, f64)> {
    let (s, c) = angle.sin_cos();
    let (cx, cy) = ((nkx / 2) as f64, (nky / 2) as f64);
    let mut pts = Vec::with_capacity(nkx.max(nky));
    if c.abs() >= s.abs() {
        let slope = s / c;
        for x in 0..nkx {
            let dx = x as f64 - cx;
            let y = (cy + dx * slope).round();
            if y >= 0.0 && y < nky as f64 {
                let dy = y - cy;
                pts.push((x + nkx * y as usize, dx.hypot(dy)));
            }
        }
    } else {
        let slope = c / s;
        for y in 0..nky {
            let dy = y as f64 - cy;
            let x = (cx + dy * slope).round();
            if x >= 0.0 && x < nkx as f64 {
                let dx = x - cx;
                pts.push((x as usize + nkx * y, dx.hypot(dy)));
            }
        }
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    pts
}

/// Builds a golden-angle radial mask. Frame 0 is fully sampled.
pub fn golden_angle_mask(spec: &MaskSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let (nkx, nky, nt) = (spec.nkx, spec.nky, spec.nt);
    let plane = nkx * nky;
    if spec.accel == 1.0 {
        return SamplingMask::new(nkx, nky, nt, vec![1; plane * nt], 1.0);
    }
    let target = spec.target_count();
    if target < nkx.max(nky) {
        return Err(invalid(format!(
            "acceleration {} leaves {target} samples per frame, less than one spoke",
            spec.accel
        )));
    }

    let golden = GOLDEN_ANGLE_DEG.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pattern = vec![0u8; plane * nt];
    pattern[..plane].fill(1);
    let mut spoke_index = 0u64;

    for t in 1..nt {
        let jitter: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let frame = &mut pattern[t * plane..(t + 1) * plane];
        let mut count = 0usize;
        let mut spokes = 0usize;
        while count < target {
            if spokes == MAX_SPOKES_PER_FRAME {
                return Err(invalid(format!(
                    "could not reach {target} samples in frame {t} with radial spokes"
                )));
            }
            let angle = jitter + spoke_index as f64 * golden;
            spoke_index += 1;
            spokes += 1;
            for (idx, _) in rasterize_spoke(nkx, nky, angle) {
                if count == target {
                    break;
                }
                if frame[idx] == 0 {
                    frame[idx] = 1;
                    count += 1;
                }
            }
        }
    }
    SamplingMask::new(nkx, nky, nt, pattern, spec.accel)
}
