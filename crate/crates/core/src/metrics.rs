//! Agreement metrics for parameter maps and images: CCC, SSIM and PSNR.

use crate::error::{invalid, PkError, Result};
use crate::scalar::Real;
use crate::volume::Volume;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Lin's concordance correlation coefficient over the voxels selected by `roi`
/// (all voxels when `None`), using population moments.
pub fn ccc<T: Real>(x: &Volume<T>, y: &Volume<T>, roi: Option<&[bool]>) -> Result<T> {
    if x.dims() != y.dims() {
        return Err(invalid("CCC inputs differ in shape"));
    }
    if let Some(r) = roi {
        if r.len() != x.dims().len() {
            return Err(invalid("CCC region does not match input shape"));
        }
    }
    ccc_slices(x.as_slice(), y.as_slice(), roi)
}

pub fn ccc_slices<T: Real>(x: &[T], y: &[T], roi: Option<&[bool]>) -> Result<T> {
    if x.len() != y.len() {
        return Err(invalid("CCC inputs differ in length"));
    }
    let pairs: Vec<(T, T)> = x
        .iter()
        .zip(y)
        .enumerate()
        .filter(|(i, _)| roi.is_none_or(|r| r[*i]))
        .map(|(_, (&a, &b))| (a, b))
        .collect();
    if pairs.len() < 2 {
        return Err(invalid("CCC needs at least 2 voxels in the region"));
    }
    let n = T::from_usize_lossy(pairs.len());
    let mx = pairs.iter().map(|p| p.0).sum::<T>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<T>() / n;
    let (mut vx, mut vy, mut cov) = (T::zero(), T::zero(), T::zero());
    for &(a, b) in &pairs {
        vx = vx + (a - mx) * (a - mx);
        vy = vy + (b - my) * (b - my);
        cov = cov + (a - mx) * (b - my);
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == T::zero() {
        return if pairs.iter().all(|p| p.0 == p.1) {
            Ok(T::one())
        } else {
            Err(PkError::Degenerate("CCC undefined for these inputs".into()))
        };
    }
    Ok((cov + cov) / denom)
}

fn gaussian_window<T: Real>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(T::lit(gx * gy / total));
        }
    }
    w
}

/// Mean SSIM over every window position fully inside one `nx × ny` slice.
fn ssim_slice<T: Real>(x: &[T], y: &[T], nx: usize, ny: usize, data_range: T, w: &[T]) -> T {
    let c1 = (T::lit(SSIM_K1) * data_range).powi(2);
    let c2 = (T::lit(SSIM_K2) * data_range).powi(2);
    let two = T::lit(2.0);
    let mut acc = T::zero();
    let mut count = 0usize;
    for oy in 0..=(ny - SSIM_WINDOW) {
        for ox in 0..=(nx - SSIM_WINDOW) {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) =
                (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = w[wx + SSIM_WINDOW * wy];
                    let i = (ox + wx) + nx * (oy + wy);
                    let (a, b) = (x[i], y[i]);
                    mx = mx + k * a;
                    my = my + k * b;
                    sxx = sxx + k * a * a;
                    syy = syy + k * b * b;
                    sxy = sxy + k * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            acc = acc
                + ((two * mx * my + c1) * (two * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / T::from_usize_lossy(count)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03. Volumes are scored slice by slice along z and averaged.
pub fn ssim<T: Real>(x: &Volume<T>, y: &Volume<T>, data_range: T) -> Result<T> {
    if x.dims() != y.dims() {
        return Err(invalid("SSIM inputs differ in shape"));
    }
    if !(data_range > T::zero()) {
        return Err(invalid("SSIM data range must be positive"));
    }
    let d = x.dims();
    if d.nx < SSIM_WINDOW || d.ny < SSIM_WINDOW {
        return Err(invalid(format!(
            "SSIM window {SSIM_WINDOW}x{SSIM_WINDOW} exceeds slice {}x{}",
            d.nx, d.ny
        )));
    }
    let w = gaussian_window::<T>();
    let plane = d.nx * d.ny;
    let total: T = (0..d.nz)
        .map(|z| {
            let r = z * plane..(z + 1) * plane;
            ssim_slice(
                &x.as_slice()[r.clone()],
                &y.as_slice()[r],
                d.nx,
                d.ny,
                data_range,
                &w,
            )
        })
        .sum();
    Ok(total / T::from_usize_lossy(d.nz))
}

/// Peak signal-to-noise ratio in dB, `10·log10(range² / MSE)`.
pub fn psnr<T: Real>(reference: &[T], test: &[T], data_range: T) -> Result<T> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(invalid("PSNR inputs differ in length or are empty"));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        / T::from_usize_lossy(reference.len());
    if mse == T::zero() {
        return Err(PkError::InfinitePsnr);
    }
    Ok(T::lit(10.0) * (data_range * data_range / mse).log10())
}
