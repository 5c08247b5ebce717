//! Undersampled Fourier encoding `F_u` and its adjoint.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::fft::{CenteredFft3, Direction};
use crate::scalar::Real;
use crate::volume::{Dims3, DynamicSeries, SeriesKind};

/// Binary `(kx, ky, t)` acquisition pattern, broadcast along `kz`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    nkx: usize,
    nky: usize,
    nt: usize,
    pattern: Vec<u8>,
    accel_target: f64,
}

impl SamplingMask {
    pub fn new(
        nkx: usize,
        nky: usize,
        nt: usize,
        pattern: Vec<u8>,
        accel_target: f64,
    ) -> Result<Self> {
        if pattern.len() != nkx * nky * nt {
            return Err(invalid(format!(
                "mask pattern has {} entries, expected {nkx}x{nky}x{nt}",
                pattern.len()
            )));
        }
        if pattern.iter().any(|&v| v > 1) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            nkx,
            nky,
            nt,
            pattern,
            accel_target,
        })
    }

    pub fn full(nkx: usize, nky: usize, nt: usize) -> Self {
        Self {
            nkx,
            nky,
            nt,
            pattern: vec![1; nkx * nky * nt],
            accel_target: 1.0,
        }
    }

    pub fn nkx(&self) -> usize {
        self.nkx
    }

    pub fn nky(&self) -> usize {
        self.nky
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn accel_target(&self) -> f64 {
        self.accel_target
    }

    pub fn pattern(&self) -> &[u8] {
        &self.pattern
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.nkx * self.nky;
        &self.pattern[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn is_sampled(&self, kx: usize, ky: usize, t: usize) -> bool {
        self.pattern[kx + self.nkx * (ky + self.nky * t)] != 0
    }

    /// Fraction of sampled `(kx, ky)` points in frame `t`.
    pub fn density(&self, t: usize) -> f64 {
        let f = self.frame(t);
        f.iter().filter(|&&v| v != 0).count() as f64 / f.len() as f64
    }
}

/// Measured acceleration `total / sampled`, per frame and over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Acceleration {
    pub per_frame: Vec<f64>,
    pub overall: f64,
}

pub fn acceleration_of(mask: &SamplingMask) -> Result<Acceleration> {
    let n = mask.nkx * mask.nky;
    let mut per_frame = Vec::with_capacity(mask.nt);
    let mut sampled_total = 0usize;
    for t in 0..mask.nt {
        let sampled = mask.frame(t).iter().filter(|&&v| v != 0).count();
        if sampled == 0 {
            return Err(invalid(format!("mask frame {t} samples nothing")));
        }
        sampled_total += sampled;
        per_frame.push(n as f64 / sampled as f64);
    }
    Ok(Acceleration {
        per_frame,
        overall: (n * mask.nt) as f64 / sampled_total as f64,
    })
}

/// Complex `(kx, ky, kz, t)` samples together with the pattern that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSeries<T> {
    dims: Dims3,
    frame_times: Vec<T>,
    data: Vec<Complex<T>>,
    mask: SamplingMask,
}

impl<T: Real> KSpaceSeries<T> {
    /// Assembles a series, zeroing nothing: off-mask samples must already be zero.
    pub fn new(
        dims: Dims3,
        frame_times: Vec<T>,
        data: Vec<Complex<T>>,
        mask: SamplingMask,
    ) -> Result<Self> {
        check_mask_dims(dims, frame_times.len(), &mask)?;
        if data.len() != dims.len() * frame_times.len() {
            return Err(invalid("k-space data length does not match dims"));
        }
        let s = Self {
            dims,
            frame_times,
            data,
            mask,
        };
        if let Some((i, _)) = s
            .data
            .iter()
            .enumerate()
            .find(|(i, v)| !s.sampled_flat(*i) && (v.re != T::zero() || v.im != T::zero()))
        {
            return Err(invalid(format!(
                "k-space sample {i} is nonzero outside the mask"
            )));
        }
        Ok(s)
    }

    /// Builds a series from raw data, deriving the pattern from nonzero samples.
    pub fn from_data_infer_mask(
        dims: Dims3,
        frame_times: Vec<T>,
        data: Vec<Complex<T>>,
    ) -> Result<Self> {
        let nt = frame_times.len();
        if data.len() != dims.len() * nt {
            return Err(invalid("k-space data length does not match dims"));
        }
        let plane = dims.nx * dims.ny;
        let mut pattern = vec![0u8; plane * nt];
        for (i, v) in data.iter().enumerate() {
            if v.re != T::zero() || v.im != T::zero() {
                let t = i / dims.len();
                pattern[t * plane + (i % dims.len()) % plane] = 1;
            }
        }
        let mask = SamplingMask::new(dims.nx, dims.ny, nt, pattern, f64::NAN)?;
        Self::new(dims, frame_times, data, mask)
    }

    #[inline]
    fn sampled_flat(&self, i: usize) -> bool {
        let n = self.dims.len();
        let (t, v) = (i / n, i % n);
        let plane = self.dims.nx * self.dims.ny;
        self.mask.frame(t)[v % plane] != 0
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn nt(&self) -> usize {
        self.frame_times.len()
    }

    pub fn frame_times(&self) -> &[T] {
        &self.frame_times
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let n = self.dims.len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Applies `f` to every sampled location; off-mask entries stay zero.
    pub fn map_sampled(&self, mut f: impl FnMut(usize, Complex<T>) -> Complex<T>) -> Self {
        let mut out = self.clone();
        for i in 0..out.data.len() {
            if self.sampled_flat(i) {
                out.data[i] = f(i, out.data[i]);
            }
        }
        out
    }

    pub fn norm_sqr(&self) -> T {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

fn check_mask_dims(dims: Dims3, nt: usize, mask: &SamplingMask) -> Result<()> {
    if mask.nkx != dims.nx || mask.nky != dims.ny {
        return Err(invalid(format!(
            "mask plane {}x{} does not match volume {}x{}",
            mask.nkx, mask.nky, dims.nx, dims.ny
        )));
    }
    if mask.nt != nt {
        return Err(invalid(format!(
            "mask has {} frames, series has {nt}",
            mask.nt
        )));
    }
    Ok(())
}

/// The undersampled Fourier operator `F_u` for one geometry and pattern.
#[derive(Debug, Clone)]
pub struct FourierOperator<T: Real> {
    fft: CenteredFft3<T>,
    mask: SamplingMask,
}

impl<T: Real> FourierOperator<T> {
    pub fn new(dims: Dims3, mask: SamplingMask) -> Result<Self> {
        check_mask_dims(dims, mask.nt, &mask)?;
        Ok(Self {
            fft: CenteredFft3::new(dims),
            mask,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.fft.dims()
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    fn apply_mask(&self, t: usize, frame: &mut [Complex<T>]) {
        let plane = self.mask.frame(t);
        let np = plane.len();
        let zero = Complex::new(T::zero(), T::zero());
        for (i, v) in frame.iter_mut().enumerate() {
            if plane[i % np] == 0 {
                *v = zero;
            }
        }
    }

    /// `F_u x` for complex frames stored back to back.
    pub fn forward_complex(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.dims().len();
        assert_eq!(x.len(), n * self.mask.nt, "operand length mismatch");
        let mut out = x.to_vec();
        out.par_chunks_mut(n).enumerate().for_each(|(t, frame)| {
            self.fft.process(frame, Direction::Forward);
            self.apply_mask(t, frame);
        });
        out
    }

    /// `F_u x` for real frames.
    pub fn forward(&self, x: &[T]) -> Vec<Complex<T>> {
        let cx: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward_complex(&cx)
    }

    /// `F_uᴴ y`: mask, then inverse unitary transform.
    pub fn adjoint(&self, y: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.dims().len();
        assert_eq!(y.len(), n * self.mask.nt, "operand length mismatch");
        let mut out = y.to_vec();
        out.par_chunks_mut(n).enumerate().for_each(|(t, frame)| {
            self.apply_mask(t, frame);
            self.fft.process(frame, Direction::Inverse);
        });
        out
    }
}

/// `S(k,t) = F_u S(r,t)`.
pub fn undersample<T: Real>(s: &DynamicSeries<T>, mask: &SamplingMask) -> Result<KSpaceSeries<T>> {
    check_mask_dims(s.dims(), s.nt(), mask)?;
    let op = FourierOperator::new(s.dims(), mask.clone())?;
    let data = op.forward(s.as_slice());
    Ok(KSpaceSeries {
        dims: s.dims(),
        frame_times: s.frame_times().to_vec(),
        data,
        mask: mask.clone(),
    })
}

/// Zero-filled adjoint reconstruction `S_u(r,t) = Re(F_uᴴ S(k,t))`.
pub fn zero_fill_recon<T: Real>(k: &KSpaceSeries<T>) -> Result<DynamicSeries<T>> {
    let op = FourierOperator::new(k.dims, k.mask.clone())?;
    let img = op.adjoint(&k.data);
    DynamicSeries::from_vec(
        k.dims,
        k.frame_times.clone(),
        SeriesKind::Image,
        img.into_iter().map(|v| v.re).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(dims: Dims3, nt: usize, rng: &mut ChaCha8Rng) -> DynamicSeries<f64> {
        let data = (0..dims.len() * nt)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DynamicSeries::from_vec(
            dims,
            (0..nt).map(|t| t as f64).collect(),
            SeriesKind::Image,
            data,
        )
        .unwrap()
    }

    fn random_mask(nx: usize, ny: usize, nt: usize, rng: &mut ChaCha8Rng) -> SamplingMask {
        let p = (0..nx * ny * nt)
            .map(|_| rng.random_bool(0.3) as u8)
            .collect();
        SamplingMask::new(nx, ny, nt, p, 3.0).unwrap()
    }

    fn cdot(a: &[Complex<f64>], b: &[Complex<f64>]) -> Complex<f64> {
        a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
    }

    #[test]
    fn full_mask_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims3::new(6, 5, 3);
        let s = random_series(dims, 2, &mut rng);
        let k = undersample(&s, &SamplingMask::full(6, 5, 2)).unwrap();
        let e_img: f64 = s.as_slice().iter().map(|v| v * v).sum();
        assert!((k.norm_sqr().sqrt() - e_img.sqrt()).abs() <= 1e-10 * e_img.sqrt());
        let back = zero_fill_recon(&k).unwrap();
        for (a, b) in back.as_slice().iter().zip(s.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_frame_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims3::new(4, 4, 2);
        let mut p = vec![1u8; 32];
        p[16..].fill(0);
        let mask = SamplingMask::new(4, 4, 2, p, 2.0).unwrap();
        let k = undersample(&random_series(dims, 2, &mut rng), &mask).unwrap();
        assert!(k.frame(1).iter().all(|v| v.re == 0.0 && v.im == 0.0));
        assert!(k.frame(0).iter().any(|v| v.norm() > 0.0));
    }

    #[test]
    fn adjoint_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims3::new(8, 6, 3);
        for _ in 0..5 {
            let mask = random_mask(8, 6, 2, &mut rng);
            let op = FourierOperator::<f64>::new(dims, mask).unwrap();
            let n = dims.len() * 2;
            let x: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let y: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let lhs = cdot(&op.forward_complex(&x), &y);
            let rhs = cdot(&x, &op.adjoint(&y));
            let nx = cdot(&x, &x).re.sqrt();
            let ny = cdot(&y, &y).re.sqrt();
            assert!((lhs - rhs).norm() <= 1e-10 * nx * ny);
        }
    }

    #[test]
    fn acceleration_counts() {
        assert_eq!(
            acceleration_of(&SamplingMask::full(4, 4, 3))
                .unwrap()
                .overall,
            1.0
        );
        let checker = (0..32).map(|i| ((i % 4 + (i / 4) % 4) % 2) as u8).collect();
        let m = SamplingMask::new(4, 4, 2, checker, 2.0).unwrap();
        let a = acceleration_of(&m).unwrap();
        assert_eq!(a.per_frame, vec![2.0, 2.0]);
        assert_eq!(a.overall, 2.0);
        let mut p = vec![1u8; 32];
        p[16..].fill(0);
        assert!(acceleration_of(&SamplingMask::new(4, 4, 2, p, 2.0).unwrap()).is_err());
    }

    #[test]
    fn series_enforces_mask_invariant() {
        let dims = Dims3::new(2, 2, 1);
        let mask = SamplingMask::new(2, 2, 1, vec![1, 0, 0, 1], 2.0).unwrap();
        let one = Complex::new(1.0, 0.0);
        let zero = Complex::new(0.0, 0.0);
        assert!(
            KSpaceSeries::new(dims, vec![0.0], vec![one, zero, zero, one], mask.clone()).is_ok()
        );
        assert!(
            KSpaceSeries::new(dims, vec![0.0], vec![one, one, zero, one], mask.clone()).is_err()
        );
        let inferred =
            KSpaceSeries::from_data_infer_mask(dims, vec![0.0], vec![one, zero, zero, one])
                .unwrap();
        assert_eq!(inferred.mask().pattern(), mask.pattern());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = DynamicSeries::<f64>::zeros(Dims3::new(4, 4, 1), vec![0.0, 1.0], SeriesKind::Image);
        assert!(undersample(&s, &SamplingMask::full(4, 5, 2)).is_err());
        assert!(undersample(&s, &SamplingMask::full(4, 4, 3)).is_err());
        assert!(SamplingMask::new(2, 2, 1, vec![0, 1, 2, 1], 1.0).is_err());
        assert!(SamplingMask::new(2, 2, 1, vec![0, 1, 1], 1.0).is_err());
    }
}
