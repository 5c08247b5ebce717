//! Forward physical model: PK maps → concentration → SPGR signal, and the
//! closed-form signal → concentration inverse used by indirect pipelines.
//!
//! Kinetic quantities use minutes (`ktrans` in min⁻¹, `cp` in mM, times in
//! min); sequence parameters use seconds (`tr`, `t10`), so `L = r1·C·TR`
//! is dimensionless with `r1` in s⁻¹mM⁻¹.

use rayon::prelude::*;

use crate::error::{invalid, PkError, Result};
use crate::kspace::{undersample, KSpaceSeries, SamplingMask};
use crate::scalar::Real;
use crate::volume::{Dims3, DynamicSeries, SeriesKind, Volume};

/// Per-voxel Patlak parameters `(K^trans, v_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PkMaps<T> {
    ktrans: Volume<T>,
    vp: Volume<T>,
}

impl<T: Real> PkMaps<T> {
    pub fn new(ktrans: Volume<T>, vp: Volume<T>) -> Result<Self> {
        if ktrans.dims() != vp.dims() {
            return Err(invalid("ktrans and vp dimensions differ"));
        }
        if !ktrans.all_finite() || !vp.all_finite() {
            return Err(invalid("PK maps must be finite"));
        }
        Ok(Self { ktrans, vp })
    }

    pub fn zeros(dims: Dims3) -> Self {
        Self {
            ktrans: Volume::zeros(dims),
            vp: Volume::zeros(dims),
        }
    }

    pub fn uniform(dims: Dims3, ktrans: T, vp: T) -> Result<Self> {
        Self::new(Volume::filled(dims, ktrans), Volume::filled(dims, vp))
    }

    pub fn dims(&self) -> Dims3 {
        self.ktrans.dims()
    }

    pub fn ktrans(&self) -> &Volume<T> {
        &self.ktrans
    }

    pub fn vp(&self) -> &Volume<T> {
        &self.vp
    }

    pub fn ktrans_mut(&mut self) -> &mut [T] {
        self.ktrans.as_mut_slice()
    }

    pub fn vp_mut(&mut self) -> &mut [T] {
        self.vp.as_mut_slice()
    }

    pub fn into_parts(self) -> (Volume<T>, Volume<T>) {
        (self.ktrans, self.vp)
    }

    /// Elementwise `self - other`, e.g. the residual `θ_u − θ_t`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(invalid("PK map dimensions differ"));
        }
        let diff = |a: &Volume<T>, b: &Volume<T>| {
            let data = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| x - y)
                .collect();
            Volume::from_vec(a.dims(), data)
        };
        Self::new(
            diff(&self.ktrans, &other.ktrans)?,
            diff(&self.vp, &other.vp)?,
        )
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims3) -> Result<Self> {
        Self::new(self.ktrans.crop(origin, size)?, self.vp.crop(origin, size)?)
    }
}

/// Sampled vascular input function `C_p(t)`: times in minutes, concentration in mM.
#[derive(Debug, Clone, PartialEq)]
pub struct VascularInputFunction<T> {
    times: Vec<T>,
    cp: Vec<T>,
}

impl<T: Real> VascularInputFunction<T> {
    pub fn new(times: Vec<T>, cp: Vec<T>) -> Result<Self> {
        if times.len() != cp.len() {
            return Err(invalid("VIF times and samples differ in length"));
        }
        if times.len() < 2 {
            return Err(invalid("VIF needs at least 2 samples"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("VIF times must be strictly increasing"));
        }
        if times.iter().chain(&cp).any(|v| !v.is_finite()) {
            return Err(invalid("VIF must be finite"));
        }
        Ok(Self { times, cp })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn cp(&self) -> &[T] {
        &self.cp
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `C_p` and its running integral, linearly interpolated to `frame_times`.
    pub fn basis_at(&self, frame_times: &[T]) -> Result<PatlakBasis<T>> {
        let cum = cumulative_trapezoid(&self.times, &self.cp);
        let lo = self.times[0];
        let hi = *self.times.last().unwrap();
        let mut cp = Vec::with_capacity(frame_times.len());
        let mut cumint = Vec::with_capacity(frame_times.len());
        for &t in frame_times {
            if !(t >= lo && t <= hi) {
                return Err(PkError::OutOfRange {
                    time: t.as_f64(),
                    lo: lo.as_f64(),
                    hi: hi.as_f64(),
                });
            }
            // first index with times[j] >= t
            let j = self.times.partition_point(|&s| s < t);
            if j == 0 || self.times[j] == t {
                cp.push(self.cp[j]);
                cumint.push(cum[j]);
            } else {
                let (t0, t1) = (self.times[j - 1], self.times[j]);
                let w = (t - t0) / (t1 - t0);
                cp.push(self.cp[j - 1] + w * (self.cp[j] - self.cp[j - 1]));
                cumint.push(cum[j - 1] + w * (cum[j] - cum[j - 1]));
            }
        }
        Ok(PatlakBasis { cp, cumint })
    }
}

/// The two Patlak regressors evaluated at frame times: `C_p(t)` and `∫₀ᵗ C_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatlakBasis<T> {
    pub cp: Vec<T>,
    pub cumint: Vec<T>,
}

impl<T: Real> PatlakBasis<T> {
    pub fn len(&self) -> usize {
        self.cp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cp.is_empty()
    }

    #[inline]
    pub fn concentration(&self, t: usize, ktrans: T, vp: T) -> T {
        vp * self.cp[t] + ktrans * self.cumint[t]
    }
}

fn cumulative_trapezoid<T: Real>(times: &[T], values: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(times.len());
    let mut acc = T::zero();
    out.push(acc);
    for i in 1..times.len() {
        acc = acc + half * (times[i] - times[i - 1]) * (values[i] + values[i - 1]);
        out.push(acc);
    }
    out
}

/// Running integral of the VIF at each of its own time stamps (mM·min),
/// by the cumulative trapezoidal rule. Element 0 is zero.
pub fn integrate_vif<T: Real>(vif: &VascularInputFunction<T>) -> Result<Vec<T>> {
    if vif.len() < 2 {
        return Err(invalid("VIF needs at least 2 samples"));
    }
    Ok(cumulative_trapezoid(&vif.times, &vif.cp))
}

/// Patlak concentration `C = v_p·C_p(t) + K^trans·∫₀ᵗ C_p` at every voxel and frame.
pub fn patlak_forward<T: Real>(
    pk: &PkMaps<T>,
    vif: &VascularInputFunction<T>,
    frame_times: &[T],
) -> Result<DynamicSeries<T>> {
    let basis = vif.basis_at(frame_times)?;
    Ok(patlak_with_basis(pk, &basis, frame_times))
}

pub(crate) fn patlak_with_basis<T: Real>(
    pk: &PkMaps<T>,
    basis: &PatlakBasis<T>,
    frame_times: &[T],
) -> DynamicSeries<T> {
    let dims = pk.dims();
    let mut out = DynamicSeries::zeros(dims, frame_times.to_vec(), SeriesKind::Concentration);
    let kt = pk.ktrans.as_slice();
    let vp = pk.vp.as_slice();
    out.as_mut_slice()
        .par_chunks_mut(dims.len())
        .enumerate()
        .for_each(|(t, frame)| {
            for (i, c) in frame.iter_mut().enumerate() {
                *c = basis.concentration(t, kt[i], vp[i]);
            }
        });
    out
}

/// Fixed acquisition quantities of an SPGR DCE protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionContext<T> {
    /// Repetition time (s).
    pub tr: T,
    /// Flip angle (rad).
    pub flip: T,
    /// Contrast relaxivity (s⁻¹ mM⁻¹).
    pub r1: T,
    /// Pre-contrast T1 (s).
    pub t10: Volume<T>,
    /// Equilibrium magnetization.
    pub m0: Volume<T>,
    /// Baseline pre-contrast signal.
    pub s0: Volume<T>,
    /// Frame acquisition times (min).
    pub frame_times: Vec<T>,
}

impl<T: Real> AcquisitionContext<T> {
    pub fn new(
        tr: T,
        flip: T,
        r1: T,
        t10: Volume<T>,
        m0: Volume<T>,
        s0: Volume<T>,
        frame_times: Vec<T>,
    ) -> Result<Self> {
        let ctx = Self {
            tr,
            flip,
            r1,
            t10,
            m0,
            s0,
            frame_times,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    /// Builds a context whose baseline `s0` is the model signal at zero concentration.
    pub fn with_model_baseline(
        tr: T,
        flip: T,
        r1: T,
        t10: Volume<T>,
        m0: Volume<T>,
        frame_times: Vec<T>,
    ) -> Result<Self> {
        let mut ctx = Self {
            tr,
            flip,
            r1,
            s0: Volume::zeros(t10.dims()),
            t10,
            m0,
            frame_times,
        };
        ctx.validate()?;
        let (sin_a, cos_a) = ctx.flip.sin_cos();
        let s0: Vec<T> = ctx
            .t10
            .as_slice()
            .iter()
            .zip(ctx.m0.as_slice())
            .map(|(&t10, &m0)| spgr_fraction(m0, sin_a, cos_a, ctx.tr / t10))
            .collect();
        ctx.s0 = Volume::from_vec(ctx.t10.dims(), s0)?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr > T::zero()) {
            return Err(invalid("TR must be positive"));
        }
        if !(self.flip > T::zero() && self.flip < T::FRAC_PI_2()) {
            return Err(invalid("flip angle must lie in (0, pi/2)"));
        }
        if !(self.r1 > T::zero()) {
            return Err(invalid("relaxivity must be positive"));
        }
        let dims = self.t10.dims();
        if self.m0.dims() != dims || self.s0.dims() != dims {
            return Err(invalid("t10, m0 and s0 dimensions differ"));
        }
        if self
            .t10
            .as_slice()
            .iter()
            .any(|&v| !(v > T::zero()) || !v.is_finite())
        {
            return Err(invalid("all T10 values must be positive and finite"));
        }
        if self
            .m0
            .as_slice()
            .iter()
            .any(|&v| !(v >= T::zero()) || !v.is_finite())
        {
            return Err(invalid("all M0 values must be non-negative and finite"));
        }
        if !self.s0.all_finite() {
            return Err(invalid("S0 must be finite"));
        }
        if self.frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("frame times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims3 {
        self.t10.dims()
    }

    pub fn nt(&self) -> usize {
        self.frame_times.len()
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims3) -> Result<Self> {
        Self::new(
            self.tr,
            self.flip,
            self.r1,
            self.t10.crop(origin, size)?,
            self.m0.crop(origin, size)?,
            self.s0.crop(origin, size)?,
            self.frame_times.clone(),
        )
    }
}

/// `m0·sin α·(1−e^{−x})/(1−cos α·e^{−x})`, the steady-state SPGR signal for `x = TR·R1`.
#[inline]
pub fn spgr_fraction<T: Real>(m0: T, sin_a: T, cos_a: T, x: T) -> T {
    let e = (-x).exp();
    m0 * sin_a * (-(-x).exp_m1()) / (T::one() - cos_a * e)
}

/// Derivative of the SPGR signal with respect to concentration.
///
/// With `E = e^{−(K+L)}` and `L = r1·C·TR`:
/// `dS/dC = m0·sin α·(1−cos α)·r1·TR·E / (1−cos α·E)²`.
#[inline]
pub fn spgr_signal_derivative<T: Real>(m0: T, sin_a: T, cos_a: T, k: T, l: T, r1_tr: T) -> T {
    let e = (-(k + l)).exp();
    let d = T::one() - cos_a * e;
    m0 * sin_a * (T::one() - cos_a) * r1_tr * e / (d * d)
}

fn check_series_ctx<T: Real>(s: &DynamicSeries<T>, ctx: &AcquisitionContext<T>) -> Result<()> {
    if s.dims() != ctx.dims() {
        return Err(invalid(format!(
            "series dims {:?} differ from context dims {:?}",
            s.dims().as_array(),
            ctx.dims().as_array()
        )));
    }
    if s.frame_times() != ctx.frame_times.as_slice() {
        return Err(invalid("series and context frame times differ"));
    }
    Ok(())
}

/// Concentration series → SPGR image series, voxelwise.
pub fn spgr_forward<T: Real>(
    c: &DynamicSeries<T>,
    ctx: &AcquisitionContext<T>,
) -> Result<DynamicSeries<T>> {
    if c.kind() != SeriesKind::Concentration {
        return Err(invalid("spgr_forward expects a concentration series"));
    }
    check_series_ctx(c, ctx)?;
    let dims = c.dims();
    let n = dims.len();
    let (sin_a, cos_a) = ctx.flip.sin_cos();
    let r1_tr = ctx.r1 * ctx.tr;
    let offset: Vec<T> = (0..n)
        .map(|i| {
            let k = ctx.tr / ctx.t10.as_slice()[i];
            ctx.s0.as_slice()[i] - spgr_fraction(ctx.m0.as_slice()[i], sin_a, cos_a, k)
        })
        .collect();

    let mut out = DynamicSeries::zeros(dims, c.frame_times().to_vec(), SeriesKind::Image);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(t, frame)| {
            let conc = c.frame(t);
            for i in 0..n {
                let k = ctx.tr / ctx.t10.as_slice()[i];
                let l = r1_tr * conc[i];
                let s = spgr_fraction(ctx.m0.as_slice()[i], sin_a, cos_a, k + l) + offset[i];
                if !s.is_finite() {
                    return Err(PkError::NumericDomain {
                        voxel: dims.coords(i),
                        frame: t,
                        detail: format!("SPGR signal {s} (T10 = {})", ctx.t10.as_slice()[i]),
                    });
                }
                frame[i] = s;
            }
            Ok(())
        })?;
    Ok(out)
}

/// How [`spgr_inverse`] treats signals the SPGR model cannot produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonPhysicalPolicy {
    /// Record zero concentration and count the voxel-frame.
    #[default]
    ZeroAndCount,
    /// Fail on the first non-physical voxel-frame.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpgrInversion<T> {
    pub concentration: DynamicSeries<T>,
    /// Number of voxel-frames whose signal fell outside the model range.
    pub nonphysical: usize,
}

/// Image series → concentration series by solving the SPGR equation for `C`
/// in closed form. Negative concentrations are kept.
pub fn spgr_inverse<T: Real>(
    s: &DynamicSeries<T>,
    ctx: &AcquisitionContext<T>,
    policy: NonPhysicalPolicy,
) -> Result<SpgrInversion<T>> {
    if s.kind() != SeriesKind::Image {
        return Err(invalid("spgr_inverse expects an image series"));
    }
    check_series_ctx(s, ctx)?;
    let dims = s.dims();
    let n = dims.len();
    let (sin_a, cos_a) = ctx.flip.sin_cos();
    let r1_tr = ctx.r1 * ctx.tr;

    let mut conc = DynamicSeries::zeros(dims, s.frame_times().to_vec(), SeriesKind::Concentration);
    let mut nonphysical = 0usize;
    for t in 0..s.nt() {
        let sig = s.frame(t);
        let out = conc.frame_mut(t);
        for i in 0..n {
            let m0 = ctx.m0.as_slice()[i];
            let k = ctx.tr / ctx.t10.as_slice()[i];
            let a = m0 * sin_a;
            let b = sig[i] - ctx.s0.as_slice()[i] + spgr_fraction(m0, sin_a, cos_a, k);
            // b = a(1-E)/(1-cos·E)  ⇒  E = (a-b)/(a-b·cos)
            let e = (a - b) / (a - b * cos_a);
            if e > T::zero() && e < T::one() {
                out[i] = (-e.ln() - k) / r1_tr;
            } else {
                match policy {
                    NonPhysicalPolicy::Strict => {
                        return Err(PkError::NonPhysicalSignal {
                            voxel: dims.coords(i),
                            frame: t,
                        })
                    }
                    NonPhysicalPolicy::ZeroAndCount => {
                        out[i] = T::zero();
                        nonphysical += 1;
                    }
                }
            }
        }
    }
    Ok(SpgrInversion {
        concentration: conc,
        nonphysical,
    })
}

/// PK maps → dynamic image series (Patlak followed by SPGR).
pub fn image_forward<T: Real>(
    pk: &PkMaps<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
) -> Result<DynamicSeries<T>> {
    let c = patlak_forward(pk, vif, &ctx.frame_times)?;
    spgr_forward(&c, ctx)
}

/// PK maps → undersampled (k,t)-space.
pub fn forward_model<T: Real>(
    pk: &PkMaps<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
    mask: &SamplingMask,
) -> Result<KSpaceSeries<T>> {
    let s = image_forward(pk, vif, ctx)?;
    undersample(&s, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::SamplingMask;
    use crate::phantom::BolusVif;
    use proptest::prelude::*;

    fn flat_vif(times: &[f64], value: f64) -> VascularInputFunction<f64> {
        VascularInputFunction::new(times.to_vec(), vec![value; times.len()]).unwrap()
    }

    fn ctx_1vox(t10: f64, nt: usize) -> AcquisitionContext<f64> {
        let d = Dims3::new(1, 1, 1);
        AcquisitionContext::with_model_baseline(
            0.00824,
            12f64.to_radians(),
            4.2,
            Volume::filled(d, t10),
            Volume::filled(d, 1000.0),
            (0..nt).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    fn conc(dims: Dims3, times: Vec<f64>, data: Vec<f64>) -> DynamicSeries<f64> {
        DynamicSeries::from_vec(dims, times, SeriesKind::Concentration, data).unwrap()
    }

    #[test]
    fn integrate_trivial_inputs() {
        let v = flat_vif(&[0.0, 0.5, 2.0], 0.0);
        assert_eq!(integrate_vif(&v).unwrap(), vec![0.0; 3]);
        let v = flat_vif(&[0.0, 1.0, 2.0], 1.0);
        assert_eq!(integrate_vif(&v).unwrap(), vec![0.0, 1.0, 2.0]);
        assert!(VascularInputFunction::new(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn integrate_matches_fine_riemann_sum() {
        let bolus = BolusVif::default();
        let vif = bolus.sample::<f64>(24.0).unwrap();
        let cum = integrate_vif(&vif).unwrap();
        let times = vif.times();
        let max = cum.iter().cloned().fold(0.0, f64::max);
        // midpoint sum on a grid 1000x finer than the VIF sampling
        let mut acc = 0.0;
        for i in 1..times.len() {
            let h = (times[i] - times[i - 1]) / 1000.0;
            for j in 0..1000 {
                acc += h * bolus.eval(times[i - 1] + (j as f64 + 0.5) * h);
            }
            assert!(
                (cum[i] - acc).abs() <= 0.005 * max,
                "t = {}: {} vs {acc}",
                times[i],
                cum[i]
            );
        }
    }

    #[test]
    fn patlak_closed_forms() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let vif = flat_vif(&times, 1.0);
        let d = Dims3::new(2, 1, 1);
        let c = patlak_forward(&PkMaps::zeros(d), &vif, &[0.0, 2.0]).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.0));
        let pk = PkMaps::uniform(d, 0.0, 0.05).unwrap();
        let c = patlak_forward(&pk, &vif, &[0.5, 2.5]).unwrap();
        assert!(c.as_slice().iter().all(|&v| (v - 0.05).abs() < 1e-15));
        let pk = PkMaps::uniform(d, 0.1, 0.05).unwrap();
        let c = patlak_forward(&pk, &vif, &[2.0]).unwrap();
        assert!((c.at(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn patlak_interpolates_between_stamps() {
        let vif = VascularInputFunction::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 2.0]).unwrap();
        let b = vif.basis_at(&[0.5, 1.5]).unwrap();
        assert_eq!(b.cp, vec![1.0, 2.0]);
        // stamps: cumint = [0, 1, 3]; linear between them
        assert_eq!(b.cumint, vec![0.5, 2.0]);
    }

    #[test]
    fn patlak_refuses_extrapolation() {
        let vif = flat_vif(&[0.0, 1.0, 2.0], 1.0);
        let pk = PkMaps::zeros(Dims3::new(1, 1, 1));
        let err = patlak_forward(&pk, &vif, &[0.0, 2.5]).unwrap_err();
        assert!(matches!(err, PkError::OutOfRange { .. }));
        assert!(patlak_forward(&pk, &vif, &[-0.1]).is_err());
    }

    #[test]
    fn spgr_zero_concentration_gives_baseline() {
        let ctx = ctx_1vox(1.2, 3);
        let c = conc(ctx.dims(), ctx.frame_times.clone(), vec![0.0; 3]);
        let s = spgr_forward(&c, &ctx).unwrap();
        for &v in s.as_slice() {
            assert!((v - ctx.s0.as_slice()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn spgr_saturation_limit() {
        let ctx = ctx_1vox(1.0, 1);
        let c = conc(ctx.dims(), ctx.frame_times.clone(), vec![1e9]);
        let s = spgr_forward(&c, &ctx).unwrap().as_slice()[0];
        let (sa, ca) = ctx.flip.sin_cos();
        let k = ctx.tr / 1.0;
        let limit = 1000.0 * sa + ctx.s0.as_slice()[0]
            - 1000.0 * sa * (1.0 - (-k).exp()) / (1.0 - ca * (-k).exp());
        assert!((s - limit).abs() < 1e-9 * limit.abs());
    }

    #[test]
    fn spgr_scalar_oracle() {
        let (tr, flip, r1, t10, m0, c): (f64, f64, f64, f64, f64, f64) =
            (0.00824, 12f64.to_radians(), 4.2, 1.0, 1000.0, 1.0);
        let k = tr / t10;
        let l = r1 * c * tr;
        let s0 = 250.0;
        let oracle =
            m0 * flip.sin() * (1.0 - (-(k + l)).exp()) / (1.0 - flip.cos() * (-(k + l)).exp()) + s0
                - m0 * flip.sin() * (1.0 - (-k).exp()) / (1.0 - flip.cos() * (-k).exp());
        let d = Dims3::new(1, 1, 1);
        let ctx = AcquisitionContext::new(
            tr,
            flip,
            r1,
            Volume::filled(d, t10),
            Volume::filled(d, m0),
            Volume::filled(d, s0),
            vec![0.0],
        )
        .unwrap();
        let s = spgr_forward(&conc(d, vec![0.0], vec![c]), &ctx)
            .unwrap()
            .as_slice()[0];
        assert!(
            (s - oracle).abs() <= 1e-12 * oracle.abs(),
            "{s} vs {oracle}"
        );
    }

    #[test]
    fn spgr_derivative_matches_finite_difference() {
        let (sa, ca) = 12f64.to_radians().sin_cos();
        let (tr, r1) = (0.00824, 4.2);
        let k = tr / 1.1;
        for &c in &[0.0, 0.3, 2.0, 9.0] {
            let h = 1e-6;
            let f = |c: f64| spgr_fraction(1000.0, sa, ca, k + r1 * c * tr);
            let fd = (f(c + h) - f(c - h)) / (2.0 * h);
            let an = spgr_signal_derivative(1000.0, sa, ca, k, r1 * c * tr, r1 * tr);
            assert!((fd - an).abs() <= 1e-7 * an.abs(), "C = {c}: {fd} vs {an}");
        }
    }

    #[test]
    fn spgr_reports_offending_voxel() {
        // a large negative concentration overflows e^{-(K+L)}
        let d = Dims3::new(2, 1, 1);
        let ctx = AcquisitionContext::with_model_baseline(
            0.00824,
            0.2,
            4.2,
            Volume::filled(d, 1.0),
            Volume::filled(d, 1000.0),
            vec![0.0],
        )
        .unwrap();
        let err = spgr_forward(&conc(d, vec![0.0], vec![0.0, -1e6]), &ctx).unwrap_err();
        assert!(
            matches!(
                err,
                PkError::NumericDomain {
                    voxel: [1, 0, 0],
                    frame: 0,
                    ..
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn spgr_round_trip_on_grid() {
        let n = 101;
        let d = Dims3::new(n, 1, 1);
        let ctx = AcquisitionContext::with_model_baseline(
            0.00824,
            12f64.to_radians(),
            4.2,
            Volume::from_fn(d, |x, _, _| 0.8 + 0.7 * x as f64 / (n - 1) as f64),
            Volume::filled(d, 1000.0),
            vec![0.0],
        )
        .unwrap();
        let data: Vec<f64> = (0..n).map(|i| 10.0 * i as f64 / (n - 1) as f64).collect();
        let c = conc(d, vec![0.0], data.clone());
        let s = spgr_forward(&c, &ctx).unwrap();
        let back = spgr_inverse(&s, &ctx, NonPhysicalPolicy::Strict).unwrap();
        assert_eq!(back.nonphysical, 0);
        for (a, b) in back.concentration.as_slice().iter().zip(&data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spgr_inverse_baseline_and_nonphysical() {
        let ctx = ctx_1vox(1.0, 3);
        let s0 = ctx.s0.as_slice()[0];
        let (sa, _) = ctx.flip.sin_cos();
        // beyond the saturation limit, and far below zero signal
        let sig = vec![s0, s0 + 1000.0 * sa, -1e6];
        let s =
            DynamicSeries::from_vec(ctx.dims(), ctx.frame_times.clone(), SeriesKind::Image, sig)
                .unwrap();
        let inv = spgr_inverse(&s, &ctx, NonPhysicalPolicy::ZeroAndCount).unwrap();
        assert!(inv.concentration.as_slice()[0].abs() < 1e-12);
        assert_eq!(&inv.concentration.as_slice()[1..], &[0.0, 0.0]);
        assert_eq!(inv.nonphysical, 2);
        let err = spgr_inverse(&s, &ctx, NonPhysicalPolicy::Strict).unwrap_err();
        assert_eq!(
            err,
            PkError::NonPhysicalSignal {
                voxel: [0, 0, 0],
                frame: 1
            }
        );
    }

    #[test]
    fn spgr_inverse_keeps_negative_concentration() {
        let ctx = ctx_1vox(1.0, 1);
        let c = conc(ctx.dims(), ctx.frame_times.clone(), vec![-0.05]);
        let s = spgr_forward(&c, &ctx).unwrap();
        let back = spgr_inverse(&s, &ctx, NonPhysicalPolicy::Strict).unwrap();
        assert!((back.concentration.as_slice()[0] + 0.05).abs() < 1e-9);
    }

    #[test]
    fn kind_and_dims_are_checked() {
        let ctx = ctx_1vox(1.0, 2);
        let img = DynamicSeries::zeros(ctx.dims(), ctx.frame_times.clone(), SeriesKind::Image);
        assert!(spgr_forward(&img, &ctx).is_err());
        let c = DynamicSeries::zeros(
            Dims3::new(2, 1, 1),
            ctx.frame_times.clone(),
            SeriesKind::Concentration,
        );
        assert!(spgr_forward(&c, &ctx).is_err());
        let c = DynamicSeries::zeros(ctx.dims(), vec![0.0, 2.0], SeriesKind::Concentration);
        assert!(spgr_forward(&c, &ctx).is_err());
    }

    #[test]
    fn forward_model_is_the_composition() {
        let d = Dims3::new(4, 4, 2);
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let vif = VascularInputFunction::new(
            times.clone(),
            times.iter().map(|t| t * (-t).exp()).collect(),
        )
        .unwrap();
        let ft = vec![0.0, 1.0, 2.0];
        let ctx = AcquisitionContext::with_model_baseline(
            0.00824,
            0.2,
            4.2,
            Volume::from_fn(d, |x, y, _| 1.0 + 0.05 * (x + y) as f64),
            Volume::filled(d, 1000.0),
            ft.clone(),
        )
        .unwrap();
        let pk = PkMaps::new(
            Volume::from_fn(d, |x, _, z| 0.01 * (x + z) as f64),
            Volume::from_fn(d, |_, y, _| 0.02 * y as f64),
        )
        .unwrap();
        let mask =
            SamplingMask::new(4, 4, 3, (0..48).map(|i| (i % 3 != 1) as u8).collect(), 1.5).unwrap();
        let composed = forward_model(&pk, &vif, &ctx, &mask).unwrap();
        let c = patlak_forward(&pk, &vif, &ft).unwrap();
        let s = spgr_forward(&c, &ctx).unwrap();
        assert_eq!(image_forward(&pk, &vif, &ctx).unwrap(), s);
        let k = undersample(&s, &mask).unwrap();
        assert_eq!(composed, k);

        // zero parameters give the masked k-space of the baseline image
        let zero = forward_model(&PkMaps::zeros(d), &vif, &ctx, &mask).unwrap();
        let base = DynamicSeries::from_vec(
            d,
            ft.clone(),
            SeriesKind::Image,
            ctx.s0.as_slice().repeat(3),
        )
        .unwrap();
        assert_eq!(zero, undersample(&base, &mask).unwrap());
    }

    #[test]
    fn f32_agrees_with_f64() {
        let times: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let cp: Vec<f64> = times.iter().map(|t| 5.0 * t * (-t).exp()).collect();
        let v64 = VascularInputFunction::new(times.clone(), cp.clone()).unwrap();
        let v32 = VascularInputFunction::new(
            times.iter().map(|&t| t as f32).collect(),
            cp.iter().map(|&c| c as f32).collect(),
        )
        .unwrap();
        let d = Dims3::new(3, 1, 1);
        let ft = [0.0, 1.0, 3.0, 5.0];
        let pk64 = PkMaps::new(
            Volume::from_vec(d, vec![0.0, 0.05, 0.2]).unwrap(),
            Volume::from_vec(d, vec![0.1, 0.0, 0.03]).unwrap(),
        )
        .unwrap();
        let pk32 = PkMaps::new(
            Volume::from_vec(d, vec![0.0f32, 0.05, 0.2]).unwrap(),
            Volume::from_vec(d, vec![0.1f32, 0.0, 0.03]).unwrap(),
        )
        .unwrap();
        let c64 = patlak_forward(&pk64, &v64, &ft).unwrap();
        let c32 = patlak_forward(&pk32, &v32, &ft.map(|t| t as f32)).unwrap();
        for (a, b) in c64.as_slice().iter().zip(c32.as_slice()) {
            assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
        }
    }

    fn small_vif() -> VascularInputFunction<f64> {
        let times: Vec<f64> = (0..25).map(|i| i as f64 * 0.25).collect();
        let cp = times
            .iter()
            .map(|t| 4.0 * t * (-t).exp() + 0.5 * (1.0 - (-t).exp()))
            .collect();
        VascularInputFunction::new(times, cp).unwrap()
    }

    proptest! {
        #[test]
        fn patlak_superposition(
            k1 in -1.0f64..1.0, v1 in -1.0f64..1.0, k2 in -1.0f64..1.0, v2 in -1.0f64..1.0,
        ) {
            let vif = small_vif();
            let ft = [0.0, 0.6, 1.9, 3.3, 6.0];
            let d = Dims3::new(1, 1, 1);
            let f = |k: f64, v: f64| patlak_forward(&PkMaps::uniform(d, k, v).unwrap(), &vif, &ft).unwrap();
            let (a, b, ab, z) = (f(k1, v1), f(k2, v2), f(k1 + k2, v1 + v2), f(0.0, 0.0));
            for t in 0..ft.len() {
                let lhs = ab.as_slice()[t];
                let rhs = a.as_slice()[t] + b.as_slice()[t] - z.as_slice()[t];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }

        #[test]
        fn patlak_monotone_in_ktrans(k in 0.0f64..0.5, dk in 0.0f64..0.5, v in 0.0f64..0.2) {
            let vif = small_vif();
            let ft = [0.0, 1.0, 2.5, 6.0];
            let d = Dims3::new(1, 1, 1);
            let lo = patlak_forward(&PkMaps::uniform(d, k, v).unwrap(), &vif, &ft).unwrap();
            let hi = patlak_forward(&PkMaps::uniform(d, k + dk, v).unwrap(), &vif, &ft).unwrap();
            for (a, b) in lo.as_slice().iter().zip(hi.as_slice()) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn spgr_round_trip(c in 0.0f64..10.0, t10 in 0.3f64..3.0, flip_deg in 2.0f64..40.0, m0 in 10.0f64..5000.0) {
            let d = Dims3::new(1, 1, 1);
            let ctx = AcquisitionContext::with_model_baseline(
                0.00824, flip_deg.to_radians(), 4.2,
                Volume::filled(d, t10), Volume::filled(d, m0), vec![0.0],
            ).unwrap();
            let s = spgr_forward(&conc(d, vec![0.0], vec![c]), &ctx).unwrap();
            let back = spgr_inverse(&s, &ctx, NonPhysicalPolicy::Strict).unwrap();
            prop_assert!((back.concentration.as_slice()[0] - c).abs() < 1e-9);
        }
    }
}
