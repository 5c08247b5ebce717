//! Synthetic ground truth: ellipsoidal PK maps, a parametric bolus input
//! function and an SPGR acquisition context, plus noisy undersampled
//! acquisitions of them.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kspace::{KSpaceSeries, SamplingMask};
use crate::model::{forward_model, AcquisitionContext, PkMaps, VascularInputFunction};
use crate::scalar::Real;
use crate::volume::{Dims3, Volume};

/// Repetition time of the reference protocol (s).
pub const DEFAULT_TR_S: f64 = 0.00824;
/// Flip angle of the reference protocol (degrees).
pub const DEFAULT_FLIP_DEG: f64 = 12.0;
/// Gd relaxivity (s⁻¹ mM⁻¹).
pub const DEFAULT_R1: f64 = 4.2;
pub const DEFAULT_NT: usize = 21;
/// Frame spacing (s).
pub const DEFAULT_TEMPORAL_RESOLUTION_S: f64 = 73.0;
pub const DEFAULT_M0: f64 = 1000.0;

pub const KTRANS_RANGE: (f64, f64) = (0.0, 0.2);
pub const VP_RANGE: (f64, f64) = (0.0, 0.1);
pub const T10_RANGE: (f64, f64) = (0.8, 1.5);
/// Outer tissue (intact barrier) draws from the low end of the PK ranges.
pub const TISSUE_KTRANS_RANGE: (f64, f64) = (0.0, 0.02);
pub const TISSUE_VP_RANGE: (f64, f64) = (0.0, 0.03);

/// Sampling interval of the phantom input function (min).
const VIF_DT_MIN: f64 = 1.0 / 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims3,
    pub nt: usize,
    /// Frame spacing in seconds.
    pub temporal_resolution: f64,
    pub seed: u64,
    /// Complex k-space noise std relative to the frame-0 DC magnitude.
    pub noise_sigma: f64,
    pub accel: f64,
    pub tr: f64,
    pub flip_deg: f64,
    pub r1: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims3::new(32, 32, 8),
            nt: DEFAULT_NT,
            temporal_resolution: DEFAULT_TEMPORAL_RESOLUTION_S,
            seed: 0,
            noise_sigma: 0.0,
            accel: 10.0,
            tr: DEFAULT_TR_S,
            flip_deg: DEFAULT_FLIP_DEG,
            r1: DEFAULT_R1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nt < 2 {
            return Err(invalid("phantom needs at least 2 frames"));
        }
        let d = self.dims;
        if d.nx < 8 || d.ny < 8 || d.nz < 8 {
            return Err(invalid(format!(
                "phantom dims must be at least 8 per axis, got {:?}",
                d.as_array()
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be non-negative"));
        }
        if !(self.temporal_resolution > 0.0) {
            return Err(invalid("temporal resolution must be positive"));
        }
        Ok(())
    }

    /// Frame times in minutes, starting at 0.
    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.nt)
            .map(|i| i as f64 * self.temporal_resolution / 60.0)
            .collect()
    }
}

/// Gamma-variate first pass plus a slowly washing-out plateau:
///
/// `Cp(t) = A·(t/tp)^α·e^{α(1−t/tp)} + B·(1−e^{−t/τ})·e^{−k·t}`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BolusVif {
    pub amplitude: f64,
    pub peak_time: f64,
    pub shape: f64,
    pub plateau: f64,
    pub rise: f64,
    pub washout: f64,
}

impl Default for BolusVif {
    fn default() -> Self {
        Self {
            amplitude: 4.4,
            peak_time: 1.0,
            shape: 3.0,
            plateau: 0.9,
            rise: 0.5,
            washout: 0.04,
        }
    }
}

impl BolusVif {
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let u = t / self.peak_time;
        let first_pass = self.amplitude * u.powf(self.shape) * (self.shape * (1.0 - u)).exp();
        let tail = self.plateau * -(-t / self.rise).exp_m1() * (-self.washout * t).exp();
        first_pass + tail
    }

    /// Samples the curve on `[0, end]` (min) at a spacing of at most one second.
    pub fn sample<T: Real>(&self, end: f64) -> Result<VascularInputFunction<T>> {
        if !(end > 0.0) {
            return Err(invalid("input function span must be positive"));
        }
        let intervals = (end / VIF_DT_MIN).ceil() as usize;
        let mut times: Vec<f64> = (0..=intervals)
            .map(|i| end * i as f64 / intervals as f64)
            .collect();
        times[intervals] = end;
        let cp = times.iter().map(|&t| T::lit(self.eval(t))).collect();
        VascularInputFunction::new(times.into_iter().map(T::lit).collect(), cp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub pk: PkMaps<T>,
    pub vif: VascularInputFunction<T>,
    pub ctx: AcquisitionContext<T>,
    /// Voxels inside the outer tissue ellipsoid.
    pub support: Vec<bool>,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

/// Generates a seeded phantom: an outer tissue ellipsoid holding several
/// smaller ellipsoidal lesions, each region with its own constant
/// `(ktrans, vp, T10)`. Lesions span the full PK ranges; the outer tissue
/// stays near the low end. Outside the tissue the PK maps are zero.
pub fn make_phantom<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let outer = Ellipsoid {
        center: [0.0; 3],
        radii: [0.44, 0.44, 0.45],
    };
    let n_lesions = rng.random_range(4..=7);
    let mut regions: Vec<(Ellipsoid, [f64; 3])> = Vec::new();
    let draw_values = |rng: &mut ChaCha8Rng, kt: (f64, f64), vp: (f64, f64)| {
        [uniform(rng, kt), uniform(rng, vp), uniform(rng, T10_RANGE)]
    };
    let background_t10 = uniform(&mut rng, T10_RANGE);
    let tissue = draw_values(&mut rng, TISSUE_KTRANS_RANGE, TISSUE_VP_RANGE);
    for _ in 0..n_lesions {
        let radii = [
            rng.random_range(0.06..0.16),
            rng.random_range(0.06..0.16),
            rng.random_range(0.12..0.3),
        ];
        let center = [
            rng.random_range(-0.22..0.22),
            rng.random_range(-0.22..0.22),
            rng.random_range(-0.15..0.15),
        ];
        regions.push((
            Ellipsoid { center, radii },
            draw_values(&mut rng, KTRANS_RANGE, VP_RANGE),
        ));
    }

    let n = dims.len();
    let (mut kt, mut vp, mut t10) = (vec![0.0; n], vec![0.0; n], vec![background_t10; n]);
    let mut support = vec![false; n];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let p = [
                    (x as f64 + 0.5) / dims.nx as f64 - 0.5,
                    (y as f64 + 0.5) / dims.ny as f64 - 0.5,
                    (z as f64 + 0.5) / dims.nz as f64 - 0.5,
                ];
                if !outer.contains(p) {
                    continue;
                }
                let i = dims.index(x, y, z);
                support[i] = true;
                let mut vals = tissue;
                for (e, v) in &regions {
                    if e.contains(p) {
                        vals = *v;
                    }
                }
                kt[i] = vals[0];
                vp[i] = vals[1];
                t10[i] = vals[2];
            }
        }
    }

    let conv = |v: Vec<f64>| Volume::from_vec(dims, v.into_iter().map(T::lit).collect());
    let pk = PkMaps::new(conv(kt)?, conv(vp)?)?;
    let frame_times = spec.frame_times();
    let vif = BolusVif::default().sample(*frame_times.last().unwrap())?;
    let ctx = AcquisitionContext::with_model_baseline(
        T::lit(spec.tr),
        T::lit(spec.flip_deg.to_radians()),
        T::lit(spec.r1),
        conv(t10)?,
        Volume::filled(dims, T::lit(DEFAULT_M0)),
        frame_times.into_iter().map(T::lit).collect(),
    )?;
    Ok(Phantom {
        pk,
        vif,
        ctx,
        support,
    })
}

/// `f_m(θ)` plus circular complex Gaussian noise on sampled locations.
///
/// The noise has total complex std `noise_sigma·|DC|`, where DC is the
/// frame-0 sample at the k-space center (each of real and imaginary part
/// carries `1/√2` of it).
pub fn synthesize_acquisition<T: Real>(
    pk: &PkMaps<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceSeries<T>> {
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    let clean = forward_model(pk, vif, ctx, mask)?;
    if noise_sigma == 0.0 {
        return Ok(clean);
    }
    add_kspace_noise(&clean, noise_sigma, seed)
}

/// Adds seeded circular complex Gaussian noise to the sampled entries of `k`.
pub fn add_kspace_noise<T: Real>(
    k: &KSpaceSeries<T>,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceSeries<T>> {
    let d = k.dims();
    let dc = k.frame(0)[d.index(d.nx / 2, d.ny / 2, d.nz / 2)]
        .norm()
        .as_f64();
    let std = noise_sigma * dc / std::f64::consts::SQRT_2;
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(k.map_sampled(|_, v| {
        let re = normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        v + Complex::new(T::lit(re), T::lit(im))
    }))
}
