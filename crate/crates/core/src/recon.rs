//! Model-based direct reconstruction of PK maps from undersampled
//! (k,t)-space.
//!
//! Minimizes `J(θ) = ½‖y − F_u S(C(θ))‖²` by steepest descent with Armijo
//! backtracking. The gradient is assembled by the chain rule:
//! `∂J/∂S = −Re F_uᴴ r`, then the voxelwise SPGR derivative `∂S/∂C`, then the
//! Patlak regressors `∂C/∂K^trans = ∫C_p` and `∂C/∂v_p = C_p`.

use std::fmt::Write as _;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kspace::{zero_fill_recon, FourierOperator, KSpaceSeries, SamplingMask};
use crate::model::{
    patlak_with_basis, spgr_forward, spgr_inverse, spgr_signal_derivative, AcquisitionContext,
    NonPhysicalPolicy, PatlakBasis, PkMaps, VascularInputFunction,
};
use crate::patlak::fit_patlak_lls;
use crate::scalar::Real;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    Zeros,
    /// Patlak fit of the SPGR-inverted zero-filled series (the indirect estimate).
    PatlakOfCorrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconOptions {
    /// Iteration cap. The problem is close to square at high acceleration, so on
    /// noisy data the iterates fit noise after a handful of Gauss–Newton steps;
    /// the small default stops early on purpose.
    pub max_iters: usize,
    /// Stop once the relative objective decrease of an accepted step falls below this.
    pub tol: f64,
    pub init: InitPolicy,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub max_halvings: usize,
    /// Trial step for the first iteration; `None` scales it from the gradient.
    pub initial_step: Option<f64>,
    /// Use the Barzilai–Borwein step as the trial step after the first iteration.
    pub barzilai_borwein: bool,
    pub scaling: ParameterScaling,
    /// Discrepancy-principle stop: halt once `J ≤ τ·½·σ̂²·(sampled count)`,
    /// with `σ̂²` estimated from frame 0 (see [`noise_variance_estimate`]).
    /// `None` disables the rule.
    pub discrepancy: Option<f64>,
}

/// Fixed linear change of variables applied before steepest descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParameterScaling {
    /// Descend along the raw gradient.
    Identity,
    /// Whiten each voxel's `(K^trans, v_p)` pair with the inverse Gram matrix of
    /// the Patlak regressors, which differ in scale by an order of magnitude.
    PatlakGram,
    /// Per-voxel 2×2 Gauss–Newton block: the Patlak regressors weighted by
    /// `(∂S/∂C)²` at the current iterate and by each frame's sampled fraction.
    /// Re-evaluated every iteration.
    VoxelGaussNewton,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            max_iters: 8,
            tol: 1e-9,
            init: InitPolicy::PatlakOfCorrupted,
            armijo_c1: 1e-4,
            max_halvings: 50,
            initial_step: None,
            barzilai_borwein: true,
            scaling: ParameterScaling::VoxelGaussNewton,
            discrepancy: None,
        }
    }
}

impl ReconOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(invalid("Armijo constant must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    /// Objective reached the noise level of the data.
    Discrepancy,
    MaxIterations,
    /// Backtracking exhausted its halvings without sufficient decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// Entry 0 is the initial objective with step 0.
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl IterationLog {
    /// One JSON object per line: `{"iteration":…,"objective":…,"step":…}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(r).expect("record serializes")
            );
        }
        out
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

/// Data-fidelity objective through the full forward model, with everything
/// that does not depend on `θ` precomputed.
#[derive(Debug, Clone)]
pub struct DirectProblem<'a, T: Real> {
    op: FourierOperator<T>,
    measured: &'a KSpaceSeries<T>,
    ctx: &'a AcquisitionContext<T>,
    basis: PatlakBasis<T>,
}

impl<'a, T: Real> DirectProblem<'a, T> {
    pub fn new(
        measured: &'a KSpaceSeries<T>,
        vif: &VascularInputFunction<T>,
        ctx: &'a AcquisitionContext<T>,
    ) -> Result<Self> {
        if measured.dims() != ctx.dims() {
            return Err(invalid("k-space and context dimensions differ"));
        }
        if measured.frame_times() != ctx.frame_times.as_slice() {
            return Err(invalid("k-space and context frame times differ"));
        }
        let op = FourierOperator::new(measured.dims(), measured.mask().clone())?;
        let basis = vif.basis_at(&ctx.frame_times)?;
        Ok(Self {
            op,
            measured,
            ctx,
            basis,
        })
    }

    fn residual(&self, pk: &PkMaps<T>) -> Result<(Vec<Complex<T>>, T)> {
        let c = patlak_with_basis(pk, &self.basis, &self.ctx.frame_times);
        let s = spgr_forward(&c, self.ctx)?;
        let pred = self.op.forward(s.as_slice());
        let r: Vec<Complex<T>> = self
            .measured
            .as_slice()
            .iter()
            .zip(&pred)
            .map(|(&y, &p)| y - p)
            .collect();
        let j = T::lit(0.5) * r.iter().map(|v| v.norm_sqr()).sum::<T>();
        Ok((r, j))
    }

    pub fn objective(&self, pk: &PkMaps<T>) -> Result<T> {
        self.check(pk)?;
        Ok(self.residual(pk)?.1)
    }

    fn check(&self, pk: &PkMaps<T>) -> Result<()> {
        if pk.dims() != self.op.dims() {
            return Err(invalid("PK map dimensions differ from k-space"));
        }
        Ok(())
    }

    pub fn objective_and_gradient(&self, pk: &PkMaps<T>) -> Result<(T, PkMaps<T>)> {
        self.check(pk)?;
        let (r, j) = self.residual(pk)?;
        let back = self.op.adjoint(&r);
        let dims = pk.dims();
        let n = dims.len();
        let (sin_a, cos_a) = self.ctx.flip.sin_cos();
        let r1_tr = self.ctx.r1 * self.ctx.tr;
        let mut g_kt = vec![T::zero(); n];
        let mut g_vp = vec![T::zero(); n];
        for v in 0..n {
            let m0 = self.ctx.m0.as_slice()[v];
            let k = self.ctx.tr / self.ctx.t10.as_slice()[v];
            let (kt, vp) = (pk.ktrans().as_slice()[v], pk.vp().as_slice()[v]);
            for t in 0..self.basis.len() {
                let c = self.basis.concentration(t, kt, vp);
                let ds_dc = spgr_signal_derivative(m0, sin_a, cos_a, k, r1_tr * c, r1_tr);
                let g_c = -back[t * n + v].re * ds_dc;
                g_kt[v] = g_kt[v] + g_c * self.basis.cumint[t];
                g_vp[v] = g_vp[v] + g_c * self.basis.cp[t];
            }
        }
        let grad = PkMaps::new(Volume::from_vec(dims, g_kt)?, Volume::from_vec(dims, g_vp)?)?;
        Ok((j, grad))
    }
}

/// Per-sample complex noise variance `E|n|²`, estimated from frame 0.
///
/// At the first frame the concentration is zero for any `θ`, so the image is
/// the known baseline `s0` and `y₀ − F_u s0` is pure noise. Returns `None` when
/// the first frame is not at zero input-function exposure.
pub fn noise_variance_estimate<T: Real>(
    k_meas: &KSpaceSeries<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
) -> Result<Option<T>> {
    let basis = vif.basis_at(&ctx.frame_times)?;
    if basis.cp[0] != T::zero() || basis.cumint[0] != T::zero() {
        return Ok(None);
    }
    let dims = k_meas.dims();
    let single = SamplingMask::new(
        dims.nx,
        dims.ny,
        1,
        k_meas.mask().frame(0).to_vec(),
        k_meas.mask().accel_target(),
    )?;
    let op = FourierOperator::new(dims, single)?;
    let pred = op.forward(ctx.s0.as_slice());
    let sampled = k_meas.mask().frame(0).iter().filter(|&&v| v != 0).count() * dims.nz;
    if sampled == 0 {
        return Ok(None);
    }
    let energy: T = k_meas
        .frame(0)
        .iter()
        .zip(&pred)
        .map(|(&y, &p)| (y - p).norm_sqr())
        .sum();
    Ok(Some(energy / T::from_usize_lossy(sampled)))
}

/// `J(θ)` and `∂J/∂θ` for measured k-space `k_meas`.
pub fn objective_and_gradient<T: Real>(
    pk: &PkMaps<T>,
    k_meas: &KSpaceSeries<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
) -> Result<(T, PkMaps<T>)> {
    DirectProblem::new(k_meas, vif, ctx)?.objective_and_gradient(pk)
}

/// The indirect estimate `θ_u`: zero-fill, invert SPGR, fit Patlak.
pub fn indirect_estimate<T: Real>(
    k_meas: &KSpaceSeries<T>,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
) -> Result<PkMaps<T>> {
    let su = zero_fill_recon(k_meas)?;
    let conc = spgr_inverse(&su, ctx, NonPhysicalPolicy::ZeroAndCount)?.concentration;
    fit_patlak_lls(&conc, vif, &ctx.frame_times)
}

fn axpy<T: Real>(pk: &PkMaps<T>, alpha: T, dir: &PkMaps<T>) -> Result<PkMaps<T>> {
    let step = |a: &Volume<T>, d: &Volume<T>| {
        Volume::from_vec(
            a.dims(),
            a.as_slice()
                .iter()
                .zip(d.as_slice())
                .map(|(&x, &g)| x + alpha * g)
                .collect(),
        )
    };
    PkMaps::new(step(pk.ktrans(), dir.ktrans())?, step(pk.vp(), dir.vp())?)
}

fn dot<T: Real>(a: &PkMaps<T>, b: &PkMaps<T>) -> T {
    let d = |x: &Volume<T>, y: &Volume<T>| {
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| p * q)
            .sum::<T>()
    };
    d(a.ktrans(), b.ktrans()) + d(a.vp(), b.vp())
}

const GN_DAMPING: f64 = 1e-2;

/// Symmetric positive definite 2×2 maps applied per voxel to `(ktrans, vp)`;
/// one entry `[kk, kv, vv]` per voxel, or a single shared entry.
#[derive(Debug, Clone)]
struct VoxelMetric<T> {
    blocks: Vec<[T; 3]>,
}

fn invert_spd<T: Real>(a: T, b: T, c: T) -> Option<[T; 3]> {
    let det = a * c - b * b;
    let tr = a + c;
    if !(det > T::lit(1e-12) * tr * tr) {
        return None;
    }
    Some([c / det, -b / det, a / det])
}

impl<T: Real> VoxelMetric<T> {
    fn fixed(scaling: ParameterScaling, basis: &PatlakBasis<T>) -> Result<Option<Self>> {
        match scaling {
            ParameterScaling::Identity => Ok(Some(Self {
                blocks: vec![[T::one(), T::zero(), T::one()]],
            })),
            ParameterScaling::PatlakGram => {
                let (mut gkk, mut gkv, mut gvv) = (T::zero(), T::zero(), T::zero());
                for (&i, &p) in basis.cumint.iter().zip(&basis.cp) {
                    gkk = gkk + i * i;
                    gkv = gkv + i * p;
                    gvv = gvv + p * p;
                }
                let inv = invert_spd(gkk, gkv, gvv).ok_or_else(|| {
                    crate::error::PkError::Degenerate(
                        "Patlak regressors are collinear; cannot scale parameters".into(),
                    )
                })?;
                Ok(Some(Self { blocks: vec![inv] }))
            }
            ParameterScaling::VoxelGaussNewton => Ok(None),
        }
    }

    fn gauss_newton(problem: &DirectProblem<'_, T>, pk: &PkMaps<T>) -> Self {
        let ctx = problem.ctx;
        let n = pk.dims().len();
        let (sin_a, cos_a) = ctx.flip.sin_cos();
        let r1_tr = ctx.r1 * ctx.tr;
        let density: Vec<T> = (0..problem.basis.len())
            .map(|t| T::lit(problem.op.mask().density(t)))
            .collect();
        let raw: Vec<[T; 3]> = (0..n)
            .map(|v| {
                let m0 = ctx.m0.as_slice()[v];
                let k = ctx.tr / ctx.t10.as_slice()[v];
                let (kt, vp) = (pk.ktrans().as_slice()[v], pk.vp().as_slice()[v]);
                let (mut a, mut b, mut c) = (T::zero(), T::zero(), T::zero());
                for t in 0..problem.basis.len() {
                    let conc = problem.basis.concentration(t, kt, vp);
                    let d = spgr_signal_derivative(m0, sin_a, cos_a, k, r1_tr * conc, r1_tr);
                    let w = density[t] * d * d;
                    let (i, p) = (problem.basis.cumint[t], problem.basis.cp[t]);
                    a = a + w * i * i;
                    b = b + w * i * p;
                    c = c + w * p * p;
                }
                [a, b, c]
            })
            .collect();
        // Damping shared by all voxels: where the signal saturates the local
        // curvature vanishes and the step must fall back to a gradient step.
        let mean_trace = raw.iter().map(|m| m[0] + m[2]).sum::<T>() / T::from_usize_lossy(n.max(1));
        let mu = T::lit(GN_DAMPING) * mean_trace + T::min_positive_value();
        let blocks = raw
            .into_iter()
            .map(|[a, b, c]| {
                invert_spd(a + mu, b, c + mu).unwrap_or([T::one() / mu, T::zero(), T::one() / mu])
            })
            .collect();
        Self { blocks }
    }

    fn apply(&self, g: &PkMaps<T>) -> Result<PkMaps<T>> {
        let (gk, gv) = (g.ktrans().as_slice(), g.vp().as_slice());
        let block = |i: usize| self.blocks[if self.blocks.len() == 1 { 0 } else { i }];
        let kt = (0..gk.len())
            .map(|i| {
                let [kk, kv, _] = block(i);
                kk * gk[i] + kv * gv[i]
            })
            .collect();
        let vp = (0..gk.len())
            .map(|i| {
                let [_, kv, vv] = block(i);
                kv * gk[i] + vv * gv[i]
            })
            .collect();
        PkMaps::new(
            Volume::from_vec(g.dims(), kt)?,
            Volume::from_vec(g.dims(), vp)?,
        )
    }
}

fn max_abs<T: Real>(a: &PkMaps<T>) -> T {
    a.ktrans()
        .as_slice()
        .iter()
        .chain(a.vp().as_slice())
        .fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Steepest descent in the metric chosen by `opts.scaling`, with Armijo
/// backtracking, from `opts.init`.
pub fn reconstruct_direct<T: Real>(
    k_meas: &KSpaceSeries<T>,
    mask: &SamplingMask,
    vif: &VascularInputFunction<T>,
    ctx: &AcquisitionContext<T>,
    opts: &ReconOptions,
) -> Result<(PkMaps<T>, IterationLog)> {
    opts.validate()?;
    if mask != k_meas.mask() {
        return Err(invalid(
            "sampling mask differs from the one recorded with the k-space data",
        ));
    }
    let problem = DirectProblem::new(k_meas, vif, ctx)?;
    let fixed_metric = VoxelMetric::fixed(opts.scaling, &problem.basis)?;
    let metric_at = |pk: &PkMaps<T>| match &fixed_metric {
        Some(m) => m.clone(),
        None => VoxelMetric::gauss_newton(&problem, pk),
    };
    let mut theta = match opts.init {
        InitPolicy::Zeros => PkMaps::zeros(k_meas.dims()),
        InitPolicy::PatlakOfCorrupted => indirect_estimate(k_meas, vif, ctx)?,
    };

    let stop_level = match opts.discrepancy {
        Some(tau) => noise_variance_estimate(k_meas, vif, ctx)?.map(|var| {
            let sampled: usize = (0..mask.nt())
                .map(|t| mask.frame(t).iter().filter(|&&v| v != 0).count())
                .sum::<usize>()
                * k_meas.dims().nz;
            T::lit(0.5 * tau) * var * T::from_usize_lossy(sampled)
        }),
        None => None,
    };
    let c1 = T::lit(opts.armijo_c1);
    let half = T::lit(0.5);
    let (mut j, mut grad) = problem.objective_and_gradient(&theta)?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        objective: j.as_f64(),
        step: 0.0,
    }];
    let mut dir = metric_at(&theta).apply(&grad)?;
    let mut prev: Option<(PkMaps<T>, PkMaps<T>)> = None;
    let mut last_step = T::zero();
    let mut g_prev_dir = T::zero();
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=opts.max_iters {
        if stop_level.is_some_and(|level| j <= level) {
            stop = StopReason::Discrepancy;
            break;
        }
        // g·Pg, the directional derivative along the scaled descent direction
        let g2 = dot(&grad, &dir);
        if !(g2 > T::zero()) || j == T::zero() {
            stop = StopReason::Converged;
            break;
        }
        let mut alpha = match (&prev, opts.barzilai_borwein) {
            // the Gauss-Newton block already carries the curvature scale
            _ if fixed_metric.is_none() => T::one(),
            (Some((theta_prev, grad_prev)), true) => {
                let s = axpy(&theta, -T::one(), theta_prev)?;
                let y = axpy(&grad, -T::one(), grad_prev)?;
                // BB step measured in the metric P⁻¹: s = −αPg, so sᵀP⁻¹s / sᵀy
                let sy = dot(&s, &y);
                if sy > T::zero() {
                    last_step * last_step * g_prev_dir / sy
                } else {
                    last_step + last_step
                }
            }
            (Some(_), false) => last_step + last_step,
            (None, _) => match opts.initial_step {
                Some(a) => T::lit(a),
                None => T::lit(1e-2) / max_abs(&dir),
            },
        };

        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = axpy(&theta, -alpha, &dir)?;
            // A trial point the forward model cannot evaluate counts as a rejected step.
            if let Ok(jc) = problem.objective(&cand) {
                if jc <= j - c1 * alpha * g2 {
                    accepted = Some((cand, jc));
                    break;
                }
            }
            alpha = alpha * half;
        }
        let Some((cand, jc)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };

        let rel = (j - jc) / j;
        let (jn, gn) = problem.objective_and_gradient(&cand)?;
        g_prev_dir = g2;
        dir = metric_at(&cand).apply(&gn)?;
        prev = Some((
            std::mem::replace(&mut theta, cand),
            std::mem::replace(&mut grad, gn),
        ));
        j = jn;
        last_step = alpha;
        records.push(IterationRecord {
            iteration: iter,
            objective: j.as_f64(),
            step: alpha.as_f64(),
        });
        if rel < T::lit(opts.tol) {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok((theta, IterationLog { records, stop }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_model;
    use crate::volume::Dims3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Small {
        truth: PkMaps<f64>,
        vif: VascularInputFunction<f64>,
        ctx: AcquisitionContext<f64>,
        mask: SamplingMask,
    }

    fn small(seed: u64, full: bool) -> Small {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims3::new(4, 4, 2);
        let times: Vec<f64> = (0..81).map(|i| i as f64 * 0.05).collect();
        let cp = times.iter().map(|t| 5.0 * t * (-0.5 * t).exp()).collect();
        let vif = VascularInputFunction::new(times, cp).unwrap();
        let ctx = AcquisitionContext::with_model_baseline(
            0.00824,
            12f64.to_radians(),
            4.2,
            Volume::from_fn(d, |_, _, _| rng.random_range(0.8..1.5)),
            Volume::filled(d, 1000.0),
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let truth = PkMaps::new(
            Volume::from_fn(d, |_, _, _| rng.random_range(0.01..0.2)),
            Volume::from_fn(d, |_, _, _| rng.random_range(0.01..0.1)),
        )
        .unwrap();
        let mask = if full {
            SamplingMask::full(4, 4, 5)
        } else {
            let mut p: Vec<u8> = (0..80).map(|_| rng.random_bool(0.5) as u8).collect();
            p[..16].fill(1);
            SamplingMask::new(4, 4, 5, p, 2.0).unwrap()
        };
        Small {
            truth,
            vif,
            ctx,
            mask,
        }
    }

    fn perturbed(pk: &PkMaps<f64>, rng: &mut ChaCha8Rng) -> PkMaps<f64> {
        let mut out = pk.clone();
        for v in out.ktrans_mut() {
            *v *= rng.random_range(0.7..1.3);
        }
        for v in out.vp_mut() {
            *v *= rng.random_range(0.7..1.3);
        }
        out
    }

    #[test]
    fn truth_is_a_stationary_point() {
        let p = small(1, true);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        let (j, g) = objective_and_gradient(&p.truth, &k, &p.vif, &p.ctx).unwrap();
        assert!(j <= 1e-20);
        assert!(max_abs(&g) <= 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = small(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        let theta = perturbed(&p.truth, &mut rng);
        let problem = DirectProblem::new(&k, &p.vif, &p.ctx).unwrap();
        let (_, g) = problem.objective_and_gradient(&theta).unwrap();
        let scale = max_abs(&g);
        let n = theta.dims().len();
        fn param(pk: &mut PkMaps<f64>, v: usize, n: usize) -> &mut f64 {
            if v < n {
                &mut pk.ktrans_mut()[v]
            } else {
                &mut pk.vp_mut()[v - n]
            }
        }
        for v in 0..2 * n {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            let x = *param(&mut plus, v, n);
            let h = 1e-5 * x.abs();
            *param(&mut plus, v, n) = x + h;
            *param(&mut minus, v, n) = x - h;
            let fd = (problem.objective(&plus).unwrap() - problem.objective(&minus).unwrap())
                / (2.0 * h);
            let an = if v < n {
                g.ktrans().as_slice()[v]
            } else {
                g.vp().as_slice()[v - n]
            };
            assert!((fd - an).abs() <= 1e-5 * scale, "param {v}: {fd} vs {an}");
        }
    }

    #[test]
    fn gradient_is_linear_in_the_residual() {
        let p = small(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        let theta = perturbed(&p.truth, &mut rng);
        let pred = forward_model(&theta, &p.vif, &p.ctx, &p.mask).unwrap();
        // measured data with twice the residual at theta
        let doubled = k.map_sampled(|i, y| pred.as_slice()[i] + (y - pred.as_slice()[i]) * 2.0);
        let (j1, g1) = objective_and_gradient(&theta, &k, &p.vif, &p.ctx).unwrap();
        let (j2, g2) = objective_and_gradient(&theta, &doubled, &p.vif, &p.ctx).unwrap();
        assert!((j2 - 4.0 * j1).abs() <= 1e-9 * j2);
        for (a, b) in g1
            .ktrans()
            .as_slice()
            .iter()
            .chain(g1.vp().as_slice())
            .zip(g2.ktrans().as_slice().iter().chain(g2.vp().as_slice()))
        {
            assert!((2.0 * a - b).abs() <= 1e-9 * max_abs(&g2));
        }
    }

    #[test]
    fn full_data_consistency() {
        let p = small(4, true);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        let (theta, log) =
            reconstruct_direct(&k, &p.mask, &p.vif, &p.ctx, &ReconOptions::default()).unwrap();
        let j = *log.objectives().last().unwrap();
        assert!(j <= 1e-12 * k.norm_sqr(), "J = {j}");
        for (a, b) in theta
            .ktrans()
            .as_slice()
            .iter()
            .zip(p.truth.ktrans().as_slice())
        {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
        for (a, b) in theta.vp().as_slice().iter().zip(p.truth.vp().as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn log_is_monotone_and_recon_reproducible() {
        let p = small(5, false);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        for scaling in [
            ParameterScaling::Identity,
            ParameterScaling::PatlakGram,
            ParameterScaling::VoxelGaussNewton,
        ] {
            let opts = ReconOptions {
                max_iters: 30,
                init: InitPolicy::Zeros,
                scaling,
                ..Default::default()
            };
            let (a, log) = reconstruct_direct(&k, &p.mask, &p.vif, &p.ctx, &opts).unwrap();
            let obj = log.objectives();
            assert!(obj.len() > 1);
            assert!(obj.windows(2).all(|w| w[1] <= w[0]), "{scaling:?}: {obj:?}");
            assert!(obj.last().unwrap() < &obj[0]);
            let (b, log2) = reconstruct_direct(&k, &p.mask, &p.vif, &p.ctx, &opts).unwrap();
            assert_eq!(a, b);
            assert_eq!(log, log2);
        }
    }

    #[test]
    fn log_serializes_as_json_lines() {
        let log = IterationLog {
            records: vec![
                IterationRecord {
                    iteration: 0,
                    objective: 2.0,
                    step: 0.0,
                },
                IterationRecord {
                    iteration: 1,
                    objective: 1.0,
                    step: 0.5,
                },
            ],
            stop: StopReason::MaxIterations,
        };
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["iteration"], 1);
        assert_eq!(v["objective"], 1.0);
        assert_eq!(v["step"], 0.5);
    }

    #[test]
    fn rejects_bad_options_and_mask() {
        let p = small(6, false);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        for opts in [
            ReconOptions {
                max_iters: 0,
                ..Default::default()
            },
            ReconOptions {
                tol: 0.0,
                ..Default::default()
            },
            ReconOptions {
                armijo_c1: 1.0,
                ..Default::default()
            },
        ] {
            assert!(reconstruct_direct(&k, &p.mask, &p.vif, &p.ctx, &opts).is_err());
        }
        let other = SamplingMask::full(4, 4, 5);
        assert!(reconstruct_direct(&k, &other, &p.vif, &p.ctx, &ReconOptions::default()).is_err());
    }

    #[test]
    fn noise_estimate_from_first_frame() {
        let p = small(7, true);
        let k = forward_model(&p.truth, &p.vif, &p.ctx, &p.mask).unwrap();
        assert_eq!(
            noise_variance_estimate(&k, &p.vif, &p.ctx).unwrap(),
            Some(0.0)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
        let noisy = k.map_sampled(|_, y| y + Complex::new(rng.sample(normal), rng.sample(normal)));
        let var = noise_variance_estimate(&noisy, &p.vif, &p.ctx)
            .unwrap()
            .unwrap();
        // 32 samples of E|n|^2 = 0.5
        assert!((0.25..0.8).contains(&var), "{var}");
    }
}
