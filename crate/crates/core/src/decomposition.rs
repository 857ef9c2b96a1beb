//! Fluctuation covariances, their rescaled levels, remainders and the
//! multiscale reconstruction of the lattice resolvent.
//!
//! With `A = A^a_{ε_n,0}(L)` and `𝒜 = 𝒜^a_n`, in Fourier space
//!
//! * `Ĝ^a_ε(p) = 1 / (a - Δ̂_ε(p))`,
//! * `Γ̂^a_ε(p) = (1 - Â(p)²) Ĝ^a_ε(p)`,
//! * `Γ̂^a_n(p) = 𝒜̂(p)² Γ̂^a_{ε_n}(p)` and `𝒢̂^a_n(p) = 𝒜̂(p)² Ĝ^a_{ε_n}(p)`.
//!
//! All kernels are densities against `dz = ε^d Σ`, so `f̂(p) = ε^d Σ_x f(x) e^{-ip·x}`.
//! Position kernels are recovered exactly by an inverse DFT on a torus wider
//! than twice their support.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::averaging::{check_mass, AveragingKernel, UnitAveraging};
use crate::cache::KernelCache;
use crate::error::{Error, Result};
use crate::lattice::{unit_symbol, LatticeKernel, LatticeSpec, MomentumPoint};
use crate::torus::Torus;

/// `Γ^a_ε(x) = 0` for `|x| >= BASE_RANGE * L`.
pub const BASE_RANGE: f64 = 3.0;
/// `Γ^a_n(x) = 0` for `|x| >= LEVEL_RANGE * L`.
pub const LEVEL_RANGE: f64 = 6.0;
/// Values beyond the range must be below this fraction of `Γ(0)`.
pub const RANGE_TOLERANCE: f64 = 1e-9;
/// Spectra may dip below zero by this fraction of their maximum.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Highest Sobolev index recorded in the diagnostics.
pub const MAX_SOBOLEV: usize = 4;
/// Highest decay index accepted by [`decay_check`].
pub const MAX_DECAY: usize = 8;

const MIN_TORUS: usize = 64;
/// Largest torus (in sites) used to test the claimed range directly.
const GRID_BUDGET: usize = 1 << 24;
const OFFGRID_SAMPLES: usize = 6;

/// `Ĝ^a_ε(p) = 1/(a - Δ̂_ε(p))`.
pub fn green_fourier(p: &MomentumPoint, a: f64) -> Result<f64> {
    check_mass(a)?;
    if a == 0.0 && p.is_zero() {
        return Err(Error::PoleAtZero);
    }
    let eps = p.spacing();
    let theta = p.lattice_units();
    Ok(eps * eps / (a * eps * eps + unit_symbol(&theta)))
}

/// `(1 - Â²)/(μ + λ)` in lattice units at `θ`, with the massless `θ = 0`
/// value given by its limit, the second moment `Σ_u w(u) u_1²`.
fn unit_fluctuation(base: &UnitAveraging, mu: f64, theta: &[f64]) -> f64 {
    let lam = unit_symbol(theta);
    if mu == 0.0 && lam == 0.0 {
        return base.second_moment();
    }
    let (om, _) = base.fourier_pair(theta);
    om * (2.0 - om) / (mu + lam)
}

/// Closed-form Fourier evaluation of the objects of one level `n`.
#[derive(Clone, Debug)]
pub struct SpectralEvaluator {
    spec: LatticeSpec,
    a: f64,
    base: AveragingKernel,
    factors: Vec<AveragingKernel>,
}

impl SpectralEvaluator {
    pub fn new(cache: &KernelCache, spec: &LatticeSpec, a: f64) -> Result<Self> {
        check_mass(a)?;
        Ok(Self {
            spec: *spec,
            a,
            base: cache.averaging(spec, 0, a)?,
            factors: cache.composite_factors(spec, a)?,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn mass_parameter(&self) -> f64 {
        self.a
    }

    /// The kernel `A^a_{ε_n,0}(L)` defining `Γ_{ε_n}`.
    pub fn base_kernel(&self) -> &AveragingKernel {
        &self.base
    }

    /// Factors of `𝒜_n`, `m = n, ..., 1`.
    pub fn factors(&self) -> &[AveragingKernel] {
        &self.factors
    }

    fn check(&self, p: &MomentumPoint) -> Result<()> {
        if p.spacing() != self.spec.spacing() || p.components().len() != self.spec.dim() {
            return Err(Error::InvalidArgument(
                "momentum belongs to a different lattice".into(),
            ));
        }
        Ok(())
    }

    /// `Ĝ^a_{ε_n}(p)`.
    pub fn green(&self, p: &MomentumPoint) -> Result<f64> {
        self.check(p)?;
        green_fourier(p, self.a)
    }

    /// `Γ̂^a_{ε_n}(p)`, continuous at the massless origin.
    pub fn base_fluctuation(&self, p: &MomentumPoint) -> Result<f64> {
        self.check(p)?;
        let eps = self.spec.spacing();
        Ok(eps * eps * unit_fluctuation(self.base.unit(), self.a * eps * eps, &p.lattice_units()))
    }

    /// `𝒜̂^a_n(p)`.
    pub fn composite(&self, p: &MomentumPoint) -> Result<f64> {
        self.check(p)?;
        Ok(self.factors.iter().map(|f| f.fourier(p)).product())
    }

    /// `Γ̂^a_n(p) = 𝒜̂(p)² Γ̂^a_{ε_n}(p)`.
    pub fn fluctuation(&self, p: &MomentumPoint) -> Result<f64> {
        Ok(self.composite(p)?.powi(2) * self.base_fluctuation(p)?)
    }

    /// `𝒢̂^a_n(p) = 𝒜̂(p)² Ĝ^a_{ε_n}(p)`.
    pub fn remainder(&self, p: &MomentumPoint) -> Result<f64> {
        Ok(self.composite(p)?.powi(2) * self.green(p)?)
    }

    /// `lim_{p→0} Γ̂^0_{ε_n}(p) = ∫ A(0,du) u_1² = (1/d) ∫ A(0,du) |u|²`.
    pub fn massless_limit(&self) -> f64 {
        self.base.second_moment()
    }

    /// Cross-check of [`SpectralEvaluator::massless_limit`]: fits
    /// `σ² + c t²` to `Γ̂(t e_1)` at two small `t`.
    pub fn massless_limit_extrapolated(&self) -> Result<f64> {
        let eps = self.spec.spacing();
        let (t1, t2) = (1e-3 / eps, 2e-3 / eps);
        let at = |t: f64| -> Result<f64> {
            let mut c = vec![0.0; self.spec.dim()];
            c[0] = t;
            let p = MomentumPoint::new(&self.spec, c)?;
            self.base_fluctuation(&p)
        };
        let (g1, g2) = (at(t1)?, at(t2)?);
        Ok((t2 * t2 * g1 - t1 * t1 * g2) / (t2 * t2 - t1 * t1))
    }
}

/// `Γ̂^a_{ε_n}(p)` on `spec`'s lattice.
pub fn fluctuation_fourier(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
    p: &MomentumPoint,
) -> Result<f64> {
    check_mass(a)?;
    let base = cache.averaging(spec, 0, a)?;
    let eps = spec.spacing();
    if p.spacing() != eps {
        return Err(Error::InvalidArgument("momentum belongs to a different lattice".into()));
    }
    Ok(eps * eps * unit_fluctuation(base.unit(), a * eps * eps, &p.lattice_units()))
}

/// `𝒢̂^a_n(p)`; `PoleAtZero` at `a = 0, p = 0`.
pub fn remainder_fourier(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
    p: &MomentumPoint,
) -> Result<f64> {
    SpectralEvaluator::new(cache, spec, a)?.remainder(p)
}

/// Range, positivity, smoothness and consistency diagnostics of a position
/// kernel recovered from its spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    /// Range asserted for the kernel (`3L` or `6L`).
    pub claimed_range: f64,
    /// Support radius bound from the supports of the averaging kernels.
    pub tight_range: f64,
    /// Torus side `M` in sites.
    pub torus_side: usize,
    /// Whether the torus extends past the claimed range.
    pub claim_on_torus: bool,
    /// `max |Γ(x)| / Γ(0)` over torus sites with `|x| >= claimed_range`, or
    /// over `|x| > tight_range` when the torus does not reach the claim.
    pub beyond_claim: f64,
    /// `max |Γ(x)| / Γ(0)` over torus sites with `|x| > tight_range`.
    pub beyond_tight: f64,
    /// Largest `|x|` with `|Γ(x)| > RANGE_TOLERANCE Γ(0)`.
    pub support_radius: f64,
    /// `claimed_range - support_radius`.
    pub range_margin: f64,
    pub gamma_at_zero: f64,
    pub min_spectrum: f64,
    pub max_spectrum: f64,
    /// Largest relative mismatch between the closed-form spectrum and the
    /// trigonometric polynomial of the stored kernel at off-grid momenta.
    pub offgrid_residual: f64,
    /// Cubic-symmetry defect relative to `Γ(0)`.
    pub symmetry_residual: f64,
    /// `‖Γ‖_{H_k}` for `k = 0..=MAX_SOBOLEV`.
    pub sobolev: Vec<f64>,
    /// `max_p |Γ̂(p)| (1 + |p|²)^{2k}` over the grid for `k = 0..=MAX_DECAY`.
    pub decay_envelope: Vec<f64>,
}

impl LevelDiagnostics {
    pub fn range_ok(&self) -> bool {
        self.beyond_claim <= RANGE_TOLERANCE
    }

    pub fn psd_ok(&self) -> bool {
        self.min_spectrum >= -PSD_TOLERANCE * self.max_spectrum
    }
}

/// A position-space covariance together with its diagnostics.
#[derive(Clone, Debug)]
pub struct PositionKernel {
    pub kernel: LatticeKernel,
    pub diagnostics: LevelDiagnostics,
}

/// One summand `coef · Γ^{a}_n` of a position-space build.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MassTerm {
    pub coef: f64,
    pub a: f64,
}

/// Weights of a unit kernel placed on the torus.
fn torus_spectrum(torus: &Torus, unit: &UnitAveraging, buf: &mut [Complex64]) {
    let h = unit.half_width as i64;
    buf.iter_mut().for_each(|v| *v = Complex64::default());
    let d = torus.dim();
    crate::lattice::for_each_site(&vec![-h; d], &vec![unit.extent(); d], |i, u| {
        buf[torus.index(u)].re += unit.weights[i];
    });
    torus.forward(buf);
}

/// `Σ_x f(x) cos(θ·x)` by axis-wise contraction with phase tables.
fn trig_poly(kernel: &LatticeKernel, theta: &[f64]) -> f64 {
    let d = kernel.dim();
    let mut data: Vec<Complex64> = kernel.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut shape = kernel.shape().to_vec();
    for ax in (0..d).rev() {
        let n = shape[ax];
        let phases: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0, -theta[ax] * (kernel.lo()[ax] + i as i64) as f64))
            .collect();
        let outer = data.len() / n;
        let mut next = vec![Complex64::default(); outer];
        for (o, chunk) in next.iter_mut().zip(data.chunks_exact(n)) {
            *o = chunk.iter().zip(&phases).map(|(a, b)| a * b).sum();
        }
        data = next;
        shape.pop();
    }
    data[0].re
}

/// Builds `Σ_t coef_t Γ^{a_t}_n` (with the composite averaging when
/// `with_composite`) in position space.
pub(crate) fn build_position(
    cache: &KernelCache,
    spec: &LatticeSpec,
    terms: &[MassTerm],
    with_composite: bool,
    claimed_range: f64,
) -> Result<PositionKernel> {
    let d = spec.dim();
    let eps = spec.spacing();
    let evaluators: Vec<SpectralEvaluator> = terms
        .iter()
        .map(|t| SpectralEvaluator::new(cache, spec, t.a))
        .collect::<Result<_>>()?;
    let first = evaluators
        .first()
        .ok_or_else(|| Error::InvalidArgument("no mass terms".into()))?;
    let h0 = first.base.half_width_sites();
    let hsum: usize = if with_composite {
        first.factors.iter().map(|f| f.half_width_sites()).sum()
    } else {
        0
    };
    let tight = 2 * h0 - 1 + 2 * hsum;
    let claim = (claimed_range / eps).round() as usize;

    let need_tight = (2 * tight + 2 * MAX_SOBOLEV + 2).max(MIN_TORUS);
    let need_claim = (2 * claim + 4).max(need_tight);
    let fits = |m: usize| m.checked_pow(d as u32).is_some_and(|n| n <= GRID_BUDGET);
    let mut side = need_claim.next_power_of_two();
    let claim_on_torus = fits(side);
    if !claim_on_torus {
        side = need_tight.next_power_of_two();
        if !fits(side) {
            return Err(Error::TorusTooSmall {
                side: GRID_BUDGET,
                required_sites: tight,
            });
        }
    }
    let torus = Torus::new(d, side);
    log::debug!(
        "position build d={d} L={} n={} terms={} torus={side}",
        spec.scale(),
        spec.level(),
        terms.len()
    );

    // Γ̂ on the torus grid, in physical units.
    let mut spectrum = vec![0.0; torus.len()];
    let mut buf = vec![Complex64::default(); torus.len()];
    let mut term_vals = if terms.len() > 1 {
        vec![0.0; torus.len()]
    } else {
        Vec::new()
    };
    for (t, ev) in terms.iter().zip(&evaluators) {
        let mu = t.a * eps * eps;
        let base = ev.base.unit();
        torus_spectrum(&torus, base, &mut buf);
        let sigma = base.second_moment();
        let mass = base.mass();
        let target: &mut Vec<f64> = if terms.len() > 1 { &mut term_vals } else { &mut spectrum };
        torus.for_each_frequency(|i, theta| {
            let lam = unit_symbol(theta);
            target[i] = if mu == 0.0 && lam == 0.0 {
                eps * eps * sigma
            } else {
                let om = base.defect + (mass - buf[i].re);
                eps * eps * om * (2.0 - om) / (mu + lam)
            };
        });
        if with_composite {
            for f in &ev.factors {
                torus_spectrum(&torus, f.unit(), &mut buf);
                for (v, a) in target.iter_mut().zip(&buf) {
                    *v *= a.re * a.re;
                }
            }
        }
        if terms.len() > 1 {
            for (s, v) in spectrum.iter_mut().zip(&term_vals) {
                *s += t.coef * v;
            }
        } else {
            spectrum.iter_mut().for_each(|s| *s *= t.coef);
        }
    }
    drop(term_vals);

    let mut min_spectrum = f64::INFINITY;
    let mut max_spectrum = f64::NEG_INFINITY;
    let mut sob = [0.0; MAX_SOBOLEV + 1];
    let mut env = [0.0f64; MAX_DECAY + 1];
    torus.for_each_frequency(|i, theta| {
        let v = spectrum[i];
        min_spectrum = min_spectrum.min(v);
        max_spectrum = max_spectrum.max(v);
        let lam = unit_symbol(theta) / (eps * eps);
        let mut pow = 1.0;
        let mut acc = 0.0;
        for s in sob.iter_mut() {
            acc += pow;
            *s += v * v * acc;
            pow *= lam;
        }
        let p2: f64 = theta.iter().map(|t| t * t).sum::<f64>() / (eps * eps);
        let w = (1.0 + p2) * (1.0 + p2);
        let mut weight = 1.0;
        for e in env.iter_mut() {
            *e = e.max(v.abs() * weight);
            weight *= w;
        }
    });
    let norm = 1.0 / (side as f64 * eps).powi(d as i32);
    let sobolev: Vec<f64> = sob.iter().map(|s| (s * norm).sqrt()).collect();

    for (b, s) in buf.iter_mut().zip(&spectrum) {
        *b = Complex64::new(*s, 0.0);
    }
    drop(spectrum);
    torus.inverse(&mut buf);

    let gamma0 = buf[0].re * norm;
    let mut beyond_claim: f64 = 0.0;
    let mut beyond_tight: f64 = 0.0;
    let mut support = 0i64;
    let claim_radius = if claim_on_torus { claim as i64 } else { tight as i64 + 1 };
    torus.for_each_site(|i, x| {
        let v = (buf[i].re * norm).abs() / gamma0;
        let r = x.iter().map(|c| c.abs()).max().unwrap_or(0);
        if r >= claim_radius {
            beyond_claim = beyond_claim.max(v);
        }
        if r > tight as i64 {
            beyond_tight = beyond_tight.max(v);
        }
        if v > RANGE_TOLERANCE {
            support = support.max(r);
        }
    });
    let kernel = LatticeKernel::centered_from_fn(*spec, tight, |x| buf[torus.index(x)].re * norm)
        .with_even(true);
    drop(buf);

    // Off-grid momenta expose any aliasing the grid itself cannot see.
    let mut rng = ChaCha8Rng::seed_from_u64(
        0x5eed ^ ((d as u64) << 32) ^ ((spec.log2_scale() as u64) << 16) ^ spec.level() as u64,
    );
    let bound = std::f64::consts::PI / eps;
    let mut offgrid_residual: f64 = 0.0;
    for _ in 0..OFFGRID_SAMPLES {
        let comps: Vec<f64> = (0..d).map(|_| rng.random_range(-bound..bound)).collect();
        let p = MomentumPoint::new(spec, comps)?;
        let mut formula = 0.0;
        for (t, ev) in terms.iter().zip(&evaluators) {
            let v = if with_composite {
                ev.fluctuation(&p)?
            } else {
                ev.base_fluctuation(&p)?
            };
            formula += t.coef * v;
        }
        let poly = spec.cell_volume() * trig_poly(&kernel, &p.lattice_units());
        offgrid_residual = offgrid_residual.max((formula - poly).abs() / max_spectrum);
    }

    let symmetry_residual = kernel.cubic_symmetry_residual() / gamma0;
    let support_radius = support as f64 * eps;
    let diagnostics = LevelDiagnostics {
        claimed_range,
        tight_range: tight as f64 * eps,
        torus_side: side,
        claim_on_torus,
        beyond_claim,
        beyond_tight,
        support_radius,
        range_margin: claimed_range - support_radius,
        gamma_at_zero: gamma0,
        min_spectrum,
        max_spectrum,
        offgrid_residual,
        symmetry_residual,
        sobolev,
        decay_envelope: env.to_vec(),
    };
    Ok(PositionKernel { kernel, diagnostics })
}

/// `Γ^a_{ε_n}` in position space on `spec`'s lattice; range `< 3L`.
pub fn fluctuation_position(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
) -> Result<PositionKernel> {
    let claim = BASE_RANGE * spec.scale() as f64;
    build_position(cache, spec, &[MassTerm { coef: 1.0, a }], false, claim)
}

/// `Γ^a_n` on the `ε_n` lattice with its remainder evaluator and diagnostics.
#[derive(Clone, Debug)]
pub struct DecompositionLevel {
    /// Level index `n`.
    pub level: u32,
    /// Mass parameter of this level.
    pub mass: f64,
    pub gamma: LatticeKernel,
    pub diagnostics: LevelDiagnostics,
    pub evaluator: Arc<SpectralEvaluator>,
}

impl DecompositionLevel {
    /// `𝒢̂_n(p)` for this level's mass.
    pub fn remainder(&self, p: &MomentumPoint) -> Result<f64> {
        self.evaluator.remainder(p)
    }
}

/// `Γ^a_n = 𝒜 Γ^a_{ε_n} 𝒜^*`; range `< 6L`.
pub fn rescaled_fluctuation(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
) -> Result<DecompositionLevel> {
    let claim = LEVEL_RANGE * spec.scale() as f64;
    let pk = build_position(cache, spec, &[MassTerm { coef: 1.0, a }], true, claim)?;
    Ok(DecompositionLevel {
        level: spec.level(),
        mass: a,
        gamma: pk.kernel,
        diagnostics: pk.diagnostics,
        evaluator: Arc::new(SpectralEvaluator::new(cache, spec, a)?),
    })
}

/// Levels `j = 0..n` of the decomposition of `G^a` on `Z^d`: level `j` lives on
/// the `L^{-j}` lattice with mass `L^{2j} a`.
pub fn decompose(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    a: f64,
    n: u32,
) -> Result<Vec<DecompositionLevel>> {
    (0..n)
        .map(|j| {
            let spec = LatticeSpec::new(dim, log2_scale, j)?;
            rescaled_fluctuation(cache, &spec, spec.scale_pow(2 * j as i32) * a)
        })
        .collect()
}

/// Both sides of the Fourier-space multiscale identity at `p ∈ B_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs - rhs| / lhs`.
    pub residual: f64,
    /// `L^{2j} Γ̂_j^{L^{2j}a}(L^j p)` for `j < n`, then the remainder term.
    pub terms: Vec<f64>,
}

/// Compares `Ĝ^a(p)` on `Z^d` with
/// `Σ_{j<n} L^{2j} Γ̂_j^{L^{2j}a}(L^j p) + L^{2n} 𝒢̂_n^{L^{2n}a}(L^n p)`.
///
/// The prefactors follow from `G^a(x) = Σ_j L^{-j(d-2)} Γ_j(x/L^j) + ...`:
/// summing `Γ_j(x/L^j) e^{-ip·x}` over `x ∈ Z^d` is a sum over the `L^{-j}`
/// lattice at momentum `L^j p` without the `ε_j^d = L^{-jd}` measure weight.
pub fn reconstruct_green(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    p: &[f64],
    a: f64,
    n: u32,
) -> Result<Reconstruction> {
    check_mass(a)?;
    let unit = LatticeSpec::new(dim, log2_scale, 0)?;
    let p0 = MomentumPoint::new(&unit, p.to_vec())?;
    let lhs = green_fourier(&p0, a)?;
    let mut terms = Vec::with_capacity(n as usize + 1);
    for j in 0..=n {
        let spec = LatticeSpec::new(dim, log2_scale, j)?;
        let lj = spec.scale_pow(j as i32);
        let pj = MomentumPoint::new(&spec, p.iter().map(|c| c * lj).collect())?;
        let ev = SpectralEvaluator::new(cache, &spec, lj * lj * a)?;
        let v = if j < n {
            ev.fluctuation(&pj)?
        } else {
            ev.remainder(&pj)?
        };
        terms.push(lj * lj * v);
    }
    let rhs: f64 = terms.iter().sum();
    Ok(Reconstruction {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / lhs,
        terms,
    })
}

/// `Γ̂^a_n(p)` at fixed physical `p` and `a` for `n = 0..=n_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub values: Vec<f64>,
    /// `|Γ̂_{n+1} - Γ̂_n|`.
    pub differences: Vec<f64>,
    /// Successive ratios of the differences.
    pub ratios: Vec<f64>,
    /// Geometric extrapolation of the limit from the last ratio.
    pub extrapolated: f64,
}

pub fn convergence_sequence(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    p: &[f64],
    a: f64,
    n_max: u32,
) -> Result<ConvergenceReport> {
    let mut values = Vec::new();
    for n in 0..=n_max {
        let spec = LatticeSpec::new(dim, log2_scale, n)?;
        let pn = MomentumPoint::new(&spec, p.to_vec())?;
        values.push(SpectralEvaluator::new(cache, &spec, a)?.fluctuation(&pn)?);
    }
    let differences: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let ratios: Vec<f64> = differences.windows(2).map(|w| w[1] / w[0]).collect();
    let last = *values.last().expect("n_max >= 0");
    let extrapolated = match (ratios.last(), differences.last()) {
        (Some(&r), Some(&dn)) if r < 1.0 && r.is_finite() => {
            let sign = (values[values.len() - 1] - values[values.len() - 2]).signum();
            last + sign * dn * r / (1.0 - r)
        }
        _ => last,
    };
    Ok(ConvergenceReport {
        values,
        differences,
        ratios,
        extrapolated,
    })
}

/// Envelope `max_p |Γ̂_n(p)| (1 + |p|²)^{2k}` of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub level: u32,
    pub k: usize,
    pub envelope: f64,
    pub gamma_hat_max: f64,
}

pub fn decay_check(level: &DecompositionLevel, k: usize) -> Result<DecayReport> {
    if k > MAX_DECAY {
        return Err(Error::InvalidArgument(format!("decay index {k} exceeds {MAX_DECAY}")));
    }
    Ok(DecayReport {
        level: level.level,
        k,
        envelope: level.diagnostics.decay_envelope[k],
        gamma_hat_max: level.diagnostics.max_spectrum,
    })
}

/// `max / min` of the decay envelopes of several levels.
pub fn decay_uniformity(levels: &[DecompositionLevel], k: usize) -> Result<f64> {
    let envs: Vec<f64> = levels
        .iter()
        .map(|l| decay_check(l, k).map(|r| r.envelope))
        .collect::<Result<_>>()?;
    let max = envs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = envs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max / min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{sobolev_norm, Region};

    fn spec(d: usize, p: u32, n: u32) -> LatticeSpec {
        LatticeSpec::new(d, p, n).unwrap()
    }

    #[test]
    fn green_examples() {
        let s = spec(3, 1, 0);
        assert_eq!(green_fourier(&MomentumPoint::zero(&s), 2.0).unwrap(), 0.5);
        let s1 = spec(1, 1, 0);
        let p = MomentumPoint::new(&s1, vec![std::f64::consts::PI]).unwrap();
        assert!((green_fourier(&p, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            green_fourier(&MomentumPoint::zero(&s1), 0.0),
            Err(Error::PoleAtZero)
        ));
    }

    #[test]
    fn fluctuation_examples() {
        let cache = KernelCache::new();
        let s = spec(2, 1, 1);
        let k = cache.averaging(&s, 0, 1.0).unwrap();
        let v = fluctuation_fourier(&cache, &s, 1.0, &MomentumPoint::zero(&s)).unwrap();
        assert!((v - (1.0 - k.mass().powi(2))).abs() < 1e-13);

        // Massless limit: analytic second moment vs values near p = 0.
        let ev = SpectralEvaluator::new(&cache, &s, 0.0).unwrap();
        let sigma = ev.massless_limit();
        let at0 = ev.base_fluctuation(&MomentumPoint::zero(&s)).unwrap();
        assert_eq!(at0, sigma);
        for t in [1e-2, 3e-3, 1e-3, 1e-4] {
            let p = MomentumPoint::new(&s, vec![t * 0.6, t * 0.8]).unwrap();
            let v = ev.base_fluctuation(&p).unwrap();
            assert!((v - sigma).abs() <= 1e-3 * sigma, "{t}: {v} vs {sigma}");
        }
        assert!((ev.massless_limit_extrapolated().unwrap() - sigma).abs() <= 1e-3 * sigma);
    }

    #[test]
    fn base_kernel_properties() {
        let cache = KernelCache::new();
        for (d, p, n, a) in [(1, 1, 0, 0.0), (1, 2, 1, 1.0), (2, 1, 1, 0.25), (2, 2, 0, 0.0)] {
            let s = spec(d, p, n);
            let pk = fluctuation_position(&cache, &s, a).unwrap();
            let dg = &pk.diagnostics;
            assert!(dg.claim_on_torus);
            assert!(dg.range_ok(), "{dg:?}");
            assert!(dg.psd_ok(), "{dg:?}");
            assert!(dg.gamma_at_zero > 0.0);
            assert!(dg.range_margin > 0.0);
            assert!(dg.offgrid_residual < 1e-9, "{dg:?}");
            assert!(dg.symmetry_residual < 1e-10);
        }
    }

    #[test]
    fn position_roundtrip_matches_formula_on_grid() {
        let cache = KernelCache::new();
        let s = spec(2, 1, 1);
        let a = 0.5;
        let pk = fluctuation_position(&cache, &s, a).unwrap();
        let m = pk.diagnostics.torus_side;
        let t = Torus::new(2, m);
        let mut buf = t.periodize(&pk.kernel);
        t.forward(&mut buf);
        let ev = SpectralEvaluator::new(&cache, &s, a).unwrap();
        let vol = s.cell_volume();
        let mut worst: f64 = 0.0;
        t.for_each_frequency(|i, theta| {
            let p = MomentumPoint::new(&s, theta.iter().map(|x| x / s.spacing()).collect()).unwrap();
            let f = ev.base_fluctuation(&p).unwrap();
            worst = worst.max((buf[i].re * vol - f).abs());
        });
        assert!(worst <= 1e-10 * pk.diagnostics.max_spectrum);
    }

    #[test]
    fn level_zero_equals_base() {
        let cache = KernelCache::new();
        let s = spec(2, 2, 0);
        let base = fluctuation_position(&cache, &s, 1.0).unwrap();
        let lvl = rescaled_fluctuation(&cache, &s, 1.0).unwrap();
        let diff = crate::lattice::sup_difference(&base.kernel, &lvl.gamma);
        assert!(diff <= 1e-12 * base.diagnostics.gamma_at_zero);
    }

    #[test]
    fn rescaled_level_properties() {
        let cache = KernelCache::new();
        for (d, p, n, a) in [(1, 1, 2, 0.0), (2, 1, 1, 1.0), (2, 1, 2, 0.0)] {
            let lvl = rescaled_fluctuation(&cache, &spec(d, p, n), a).unwrap();
            let dg = &lvl.diagnostics;
            assert!(dg.range_ok() && dg.psd_ok(), "{dg:?}");
            assert!(dg.offgrid_residual < 1e-9, "{dg:?}");
            assert!(dg.sobolev.iter().all(|v| v.is_finite() && *v > 0.0));
            assert!(dg.sobolev.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn sobolev_routes_agree_on_a_level() {
        let cache = KernelCache::new();
        let lvl = rescaled_fluctuation(&cache, &spec(1, 1, 1), 1.0).unwrap();
        for k in 0..=MAX_SOBOLEV {
            let pos = sobolev_norm(&lvl.gamma, k, &Region::Everywhere);
            let sp = lvl.diagnostics.sobolev[k];
            assert!((pos - sp).abs() <= 1e-8 * sp, "k={k}: {pos} vs {sp}");
        }
    }

    #[test]
    fn remainder_examples() {
        let cache = KernelCache::new();
        let s0 = spec(2, 1, 0);
        let p = MomentumPoint::new(&s0, vec![0.4, -1.0]).unwrap();
        let g = green_fourier(&p, 0.3).unwrap();
        assert_eq!(remainder_fourier(&cache, &s0, 0.3, &p).unwrap(), g);
        let s2 = spec(2, 1, 2);
        let p2 = MomentumPoint::new(&s2, vec![2.0, 7.0]).unwrap();
        let r = remainder_fourier(&cache, &s2, 0.3, &p2).unwrap();
        assert!(r >= 0.0 && r <= green_fourier(&p2, 0.3).unwrap());
        assert!(matches!(
            remainder_fourier(&cache, &s2, 0.0, &MomentumPoint::zero(&s2)),
            Err(Error::PoleAtZero)
        ));
    }

    #[test]
    fn telescoping() {
        // 𝒢̂_n^b(q) = Γ̂_n^b(q) + L² 𝒢̂_{n+1}^{L²b}(Lq)
        let cache = KernelCache::new();
        for n in 0..2 {
            let s = spec(2, 1, n);
            let s1 = spec(2, 1, n + 1);
            let b = 0.7;
            let q = MomentumPoint::new(&s, vec![0.9, -0.2]).unwrap();
            let lq = MomentumPoint::new(&s1, vec![1.8, -0.4]).unwrap();
            let ev = SpectralEvaluator::new(&cache, &s, b).unwrap();
            let ev1 = SpectralEvaluator::new(&cache, &s1, 4.0 * b).unwrap();
            let lhs = ev.remainder(&q).unwrap();
            let rhs = ev.fluctuation(&q).unwrap() + 4.0 * ev1.remainder(&lq).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs);
        }
    }

    #[test]
    fn reconstruction_examples() {
        let cache = KernelCache::new();
        let r = reconstruct_green(&cache, 2, 1, &[1.0, 1.0], 1.0, 1).unwrap();
        assert!(r.residual <= 1e-8, "{r:?}");
        let r = reconstruct_green(&cache, 3, 1, &[0.3, 0.0, 0.0], 0.0, 2).unwrap();
        assert!(r.residual <= 1e-8, "{r:?}");
        assert!(matches!(
            reconstruct_green(&cache, 3, 1, &[0.0; 3], 0.0, 1),
            Err(Error::PoleAtZero)
        ));
    }

    #[test]
    fn convergence_examples() {
        let cache = KernelCache::new();
        let rep = convergence_sequence(&cache, 1, 1, &[0.0], 1.0, 3).unwrap();
        assert!(rep.differences.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.extrapolated.is_finite() && rep.extrapolated >= 0.0);
        let rep = convergence_sequence(&cache, 2, 1, &[0.5, 0.3], 0.0, 3).unwrap();
        assert!(rep.ratios.iter().all(|&r| r <= 1.0), "{rep:?}");
    }

    #[test]
    fn mass_monotonicity_and_decay() {
        let cache = KernelCache::new();
        let s = spec(2, 1, 1);
        let mut prev = f64::INFINITY;
        let mut levels = Vec::new();
        for a in [0.0, 0.25, 1.0, 4.0] {
            let v = fluctuation_fourier(&cache, &s, a, &MomentumPoint::zero(&s)).unwrap();
            assert!(v <= prev);
            prev = v;
            levels.push(rescaled_fluctuation(&cache, &s, a).unwrap());
        }
        let r0 = decay_check(&levels[0], 0).unwrap();
        assert!(r0.envelope <= r0.gamma_hat_max * (1.0 + 1e-15));
        assert!(decay_check(&levels[0], 2).unwrap().envelope.is_finite());
        assert!(decay_check(&levels[3], 2).unwrap().envelope <= decay_check(&levels[0], 2).unwrap().envelope);
        assert!(decay_check(&levels[0], 9).is_err());
    }
}
