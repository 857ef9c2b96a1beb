//! Fractional Green's function `C = (-Δ)^{-α/2} = c_α ∫_0^∞ a^{-α/2} G^a da`
//! and its finite-range decomposition.
//!
//! The mass integral is discretized by the trapezoid rule in `u = ln μ`, where
//! `μ = aε²` is the mass in lattice units. The integrand is analytic in the
//! strip `|Im u| < π` (all singularities sit on the negative `μ` axis), so the
//! rule converges geometrically in `1/h`. Node grids are invariant under
//! `μ → L²μ`, which lets every level reuse the same averaging kernels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::KernelCache;
use crate::decomposition::{build_position, MassTerm, PositionKernel, SpectralEvaluator, LEVEL_RANGE};
use crate::error::{Error, Result};
use crate::lattice::{unit_symbol, LatticeSpec, MomentumPoint};

/// Smallest accepted quadrature tolerance.
pub const MIN_TOLERANCE: f64 = 1e-10;
/// Largest number of quadrature nodes.
pub const NODE_BUDGET: usize = 4096;
/// Supported range of `α`.
pub const ALPHA_RANGE: (f64, f64) = (0.1, 1.9);

/// `c_α = sin(πα/2)/π`, so that `c_α ∫_0^∞ a^{-α/2} (a+t)^{-1} da = t^{-α/2}`.
pub fn levy_constant(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((std::f64::consts::FRAC_PI_2 * alpha).sin() / std::f64::consts::PI)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} outside (0, 2)")));
    }
    Ok(())
}

/// Trapezoid nodes `μ_k = e^{kh}` and weights for `c_α ∫_0^∞ μ^{-α/2} f(μ) dμ`,
/// accurate to `tol` relative for integrands behaving like `1/(μ + t)` with
/// `t ∈ [t_lo, t_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub alpha: f64,
    pub tol: f64,
    pub step: f64,
    /// Index of the first node, `μ_0 = e^{first·h}`.
    pub first: i64,
    pub nodes: Vec<f64>,
    /// `c_α h μ_k^{1-α/2}`.
    pub weights: Vec<f64>,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Bound on the neglected tails relative to the integral.
    pub truncation_bound: f64,
    /// Estimate of the trapezoid discretization error relative to the integral.
    pub discretization_bound: f64,
    /// Largest relative error of the scalar identity over `[t_lo, t_hi]`.
    pub validated_error: f64,
}

impl Quadrature {
    /// Nodes for `t ∈ [t_lo, t_hi]`, aligned so that `L²` maps nodes to nodes.
    pub fn for_range(alpha: f64, tol: f64, t_lo: f64, t_hi: f64, scale: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(tol >= MIN_TOLERANCE && tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance {tol} outside [{MIN_TOLERANCE}, 1)"
            )));
        }
        if !(t_lo > 0.0 && t_hi >= t_lo && t_hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad range [{t_lo}, {t_hi}]")));
        }
        if scale < 2 {
            return Err(Error::InvalidArgument("scale must be at least 2".into()));
        }
        let c = levy_constant(alpha)?;
        let beta = 1.0 - alpha / 2.0;
        // Strip half-width π: error ~ e^{-2π²/h}; keep it below tol/10.
        let h0 = 2.0 * std::f64::consts::PI.powi(2) / (10.0 / tol).ln();
        let period = 2.0 * (scale as f64).ln();
        let step = period / (period / h0).ceil();
        let u_min = t_lo.ln() + (tol * beta / 4.0).ln() / beta;
        let u_max = t_hi.ln() - (2.0 / alpha) * (tol * alpha / 8.0).ln();
        let first = (u_min / step).floor() as i64;
        let last = (u_max / step).ceil() as i64;
        let count = (last - first + 1) as usize;
        if count > NODE_BUDGET {
            return Err(Error::ToleranceUnreachable {
                tol,
                budget: NODE_BUDGET,
            });
        }
        let nodes: Vec<f64> = (first..=last).map(|k| (k as f64 * step).exp()).collect();
        let weights = nodes.iter().map(|m| c * step * m.powf(beta)).collect();
        let mut q = Self {
            alpha,
            tol,
            step,
            first,
            nodes,
            weights,
            t_lo,
            t_hi,
            truncation_bound: tol / 4.0,
            discretization_bound: 2.0 * (-2.0 * std::f64::consts::PI.powi(2) / step).exp(),
            validated_error: 0.0,
        };
        let probes = 9;
        let ratio = (t_hi / t_lo).powf(1.0 / (probes - 1) as f64);
        q.validated_error = (0..probes)
            .map(|i| q.scalar_residual(t_lo * ratio.powi(i)))
            .fold(0.0, f64::max);
        if q.validated_error > tol {
            return Err(Error::ToleranceUnreachable {
                tol,
                budget: NODE_BUDGET,
            });
        }
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ_k w_k f(μ_k)`, evaluated in parallel and summed in node order.
    pub fn integrate(&self, f: impl Fn(f64) -> Result<f64> + Sync) -> Result<f64> {
        let vals: Vec<f64> = self
            .nodes
            .par_iter()
            .map(|&m| f(m))
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(
            &vals.iter().zip(&self.weights).map(|(v, w)| v * w).collect::<Vec<_>>(),
        ))
    }

    /// `|Σ_k w_k/(μ_k + t) - t^{-α/2}| / t^{-α/2}`.
    pub fn scalar_residual(&self, t: f64) -> f64 {
        let approx: f64 = pairwise_sum(
            &self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(m, w)| w / (m + t))
                .collect::<Vec<_>>(),
        );
        let exact = t.powf(-self.alpha / 2.0);
        (approx - exact).abs() / exact
    }
}

/// Quadrature covering `t ∈ [0.1, 10]`.
pub fn build_quadrature(alpha: f64, tol: f64) -> Result<Quadrature> {
    Quadrature::for_range(alpha, tol, 0.1, 10.0, 2)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Parameters of the fractional field in dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyParams {
    pub dim: usize,
    pub alpha: f64,
    /// Canonical dimension `[φ] = (d - α)/2`.
    pub phi_dim: f64,
    pub constant: f64,
}

impl LevyParams {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {alpha} outside the supported [{}, {}]",
                ALPHA_RANGE.0, ALPHA_RANGE.1
            )));
        }
        Ok(Self {
            dim,
            alpha,
            phi_dim: (dim as f64 - alpha) / 2.0,
            constant: levy_constant(alpha)?,
        })
    }
}

/// `t`-range in lattice units for integrands at lattice momentum `θ` on a level
/// with `depth` averaging factors.
fn lattice_range(dim: usize, scale: u64, depth: u32, lambda: f64) -> (f64, f64) {
    let smallest_cube = (scale as f64).powi(-2 * (depth as i32 + 1));
    let lo = if lambda > 0.0 { lambda.min(smallest_cube) } else { smallest_cube };
    (lo / 100.0, 100.0 * 4.0 * dim as f64)
}

/// Closed-form Fourier evaluation of the Lévy kernels of one level.
#[derive(Clone, Debug)]
pub struct LevySpectral {
    params: LevyParams,
    spec: LatticeSpec,
    quadrature: Quadrature,
    /// One evaluator per node, at physical mass `a_k = μ_k / ε²`.
    evaluators: Vec<SpectralEvaluator>,
}

impl LevySpectral {
    pub fn new(
        cache: &KernelCache,
        params: &LevyParams,
        spec: &LatticeSpec,
        quadrature: Quadrature,
    ) -> Result<Self> {
        if spec.dim() != params.dim || quadrature.alpha != params.alpha {
            return Err(Error::InvalidArgument("mismatched Lévy parameters".into()));
        }
        let eps2 = spec.spacing().powi(2);
        let evaluators = quadrature
            .nodes
            .par_iter()
            .map(|m| SpectralEvaluator::new(cache, spec, m / eps2))
            .collect::<Result<_>>()?;
        Ok(Self {
            params: params.clone(),
            spec: *spec,
            quadrature,
            evaluators,
        })
    }

    /// Quadrature sized for momenta whose lattice symbol is at least `lambda`.
    pub fn for_momenta(
        cache: &KernelCache,
        params: &LevyParams,
        spec: &LatticeSpec,
        tol: f64,
        lambda: f64,
    ) -> Result<Self> {
        let (lo, hi) = lattice_range(spec.dim(), spec.scale(), spec.level(), lambda);
        let q = Quadrature::for_range(params.alpha, tol, lo, hi, spec.scale())?;
        Self::new(cache, params, spec, q)
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    /// `ε^{α-2}`: converts lattice-unit weights to physical mass weights.
    fn unit_factor(&self) -> f64 {
        self.spec.spacing().powf(self.params.alpha - 2.0)
    }

    fn integrate(&self, f: impl Fn(&SpectralEvaluator) -> Result<f64> + Sync) -> Result<f64> {
        let vals: Vec<f64> = self.evaluators.par_iter().map(&f).collect::<Result<_>>()?;
        let terms: Vec<f64> = vals
            .iter()
            .zip(&self.quadrature.weights)
            .map(|(v, w)| v * w)
            .collect();
        Ok(self.unit_factor() * pairwise_sum(&terms))
    }

    /// `Γ̂_j(p) = c_α ∫ a^{-α/2} Γ̂^a_j(p) da`.
    pub fn fluctuation(&self, p: &MomentumPoint) -> Result<f64> {
        self.integrate(|ev| ev.fluctuation(p))
    }

    /// `Ĉ_n(p) = c_α ∫ a^{-α/2} 𝒢̂^a_n(p) da`.
    pub fn remainder(&self, p: &MomentumPoint) -> Result<f64> {
        if p.is_zero() {
            return Err(Error::PoleAtZero);
        }
        self.integrate(|ev| ev.remainder(p))
    }

    /// `c_α ∫ a^{-α/2} Ĝ^a_ε(p) da`, which should equal `(-Δ̂_ε(p))^{-α/2}`.
    pub fn green(&self, p: &MomentumPoint) -> Result<f64> {
        if p.is_zero() {
            return Err(Error::PoleAtZero);
        }
        self.integrate(|ev| ev.green(p))
    }

    /// Mass terms of the position-space build.
    fn mass_terms(&self) -> Vec<MassTerm> {
        let f = self.unit_factor();
        self.evaluators
            .iter()
            .zip(&self.quadrature.weights)
            .map(|(ev, w)| MassTerm {
                coef: f * w,
                a: ev.mass_parameter(),
            })
            .collect()
    }
}

/// `(-Δ̂_ε(p))^{-α/2}`.
pub fn levy_green_fourier(alpha: f64, p: &MomentumPoint) -> Result<f64> {
    check_alpha(alpha)?;
    if p.is_zero() {
        return Err(Error::PoleAtZero);
    }
    let eps = p.spacing();
    Ok((unit_symbol(&p.lattice_units()) / (eps * eps)).powf(-alpha / 2.0))
}

/// Position-space `Γ_j` on `spec`'s lattice; range `< 6L`.
pub fn levy_fluctuation(
    cache: &KernelCache,
    params: &LevyParams,
    spec: &LatticeSpec,
    tol: f64,
) -> Result<PositionKernel> {
    // The torus grid reaches down to the first nonzero frequency.
    let claim = LEVEL_RANGE * spec.scale() as f64;
    let side_hint = (4.0 * claim / spec.spacing()).max(64.0);
    let theta = 2.0 * std::f64::consts::PI / side_hint;
    let lambda = unit_symbol(&[theta]);
    let spectral = LevySpectral::for_momenta(cache, params, spec, tol, lambda)?;
    build_position(cache, spec, &spectral.mass_terms(), true, claim)
}

/// Both sides of `Ĉ(p) = Σ_{j<n} L^{jα} Γ̂_j(L^j p) + L^{nα} Ĉ_n(L^n p)` on `Z^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyReconstruction {
    /// `(-Δ̂(p))^{-α/2}`.
    pub exact: f64,
    /// `c_α ∫ a^{-α/2} Ĝ^a(p) da` by quadrature.
    pub direct: f64,
    pub rhs: f64,
    /// `|direct - exact| / exact`.
    pub direct_residual: f64,
    /// `|rhs - exact| / exact`.
    pub residual: f64,
    pub terms: Vec<f64>,
    pub nodes: usize,
}

pub fn levy_reconstruct(
    cache: &KernelCache,
    params: &LevyParams,
    log2_scale: u32,
    p: &[f64],
    n: u32,
    tol: f64,
) -> Result<LevyReconstruction> {
    let unit = LatticeSpec::new(params.dim, log2_scale, 0)?;
    let p0 = MomentumPoint::new(&unit, p.to_vec())?;
    let exact = levy_green_fourier(params.alpha, &p0)?;
    let lambda = unit_symbol(p);
    let direct = LevySpectral::for_momenta(cache, params, &unit, tol, lambda)?.green(&p0)?;
    let mut terms = Vec::with_capacity(n as usize + 1);
    let mut nodes = 0;
    for j in 0..=n {
        let spec = LatticeSpec::new(params.dim, log2_scale, j)?;
        let lj = spec.scale_pow(j as i32);
        let pj = MomentumPoint::new(&spec, p.iter().map(|c| c * lj).collect())?;
        // Every level sees the lattice momentum p; size the range for the deepest one.
        let (lo, hi) = lattice_range(params.dim, spec.scale(), n, lambda);
        let q = Quadrature::for_range(params.alpha, tol, lo, hi, spec.scale())?;
        nodes = nodes.max(q.len());
        let ls = LevySpectral::new(cache, params, &spec, q)?;
        let v = if j < n {
            ls.fluctuation(&pj)?
        } else {
            ls.remainder(&pj)?
        };
        terms.push(lj.powf(params.alpha) * v);
    }
    let rhs = pairwise_sum(&terms);
    Ok(LevyReconstruction {
        exact,
        direct,
        rhs,
        direct_residual: (direct - exact).abs() / exact,
        residual: (rhs - exact).abs() / exact,
        terms,
        nodes,
    })
}

/// Relative residual of `Ĉ_n(q) = Γ̂_n(q) + L^α Ĉ_{n+1}(Lq)` at `q ∈ B_{ε_n}`,
/// with the two sides integrated on different node grids.
pub fn levy_recursion_residual(
    cache: &KernelCache,
    params: &LevyParams,
    spec: &LatticeSpec,
    q: &[f64],
    tol: f64,
) -> Result<f64> {
    let next = spec.at_level(spec.level() + 1)?;
    let pn = MomentumPoint::new(spec, q.to_vec())?;
    let l = spec.scale() as f64;
    let pn1 = MomentumPoint::new(&next, q.iter().map(|c| c * l).collect())?;
    let lambda = unit_symbol(&pn.lattice_units());
    let (lo, hi) = lattice_range(params.dim, spec.scale(), next.level(), lambda);
    let coarse = Quadrature::for_range(params.alpha, tol, lo, hi, spec.scale())?;
    let fine = Quadrature::for_range(params.alpha, tol / 100.0, lo, hi, spec.scale())?;
    let lhs = LevySpectral::new(cache, params, spec, coarse)?.remainder(&pn)?;
    let here = LevySpectral::new(cache, params, spec, fine.clone())?;
    let there = LevySpectral::new(cache, params, &next, fine)?;
    let rhs = here.fluctuation(&pn)? + l.powf(params.alpha) * there.remainder(&pn1)?;
    Ok((lhs - rhs).abs() / lhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::gamma;

    #[test]
    fn constant_examples() {
        assert!((levy_constant(1.0).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-16);
        assert!(levy_constant(1.999999).unwrap() < 1e-5);
        assert!(levy_constant(2.0).is_err());
        assert!(levy_constant(0.0).is_err());
    }

    #[test]
    fn constant_matches_beta_function() {
        // ∫_0^∞ a^{-s}/(1+a) da = Γ(s)Γ(1-s) = π / sin(πs), s = α/2.
        for alpha in [0.3, 0.5, 1.0, 1.5, 1.8] {
            let s = alpha / 2.0;
            let beta = gamma(s) * gamma(1.0 - s);
            assert!((levy_constant(alpha).unwrap() * beta - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_identity() {
        for alpha in [0.5, 1.0, 1.5] {
            let q = build_quadrature(alpha, 1e-8).unwrap();
            for t in [0.5, 1.0, 3.0] {
                assert!(q.scalar_residual(t) <= 1e-8, "α={alpha} t={t}");
            }
            assert!(q.weights.iter().all(|w| *w > 0.0));
        }
    }

    #[test]
    fn node_count_grows_like_log_squared() {
        let n: Vec<usize> = [1e-4, 1e-6, 1e-8, 1e-10]
            .iter()
            .map(|&t| build_quadrature(1.0, t).unwrap().len())
            .collect();
        assert!(n.windows(2).all(|w| w[1] > w[0]), "{n:?}");
        // (ln 1/tol)² scaling: a 2.5× larger exponent costs well under 2.5²×.
        assert!((n[3] as f64) < 6.25 * n[0] as f64 * 1.2, "{n:?}");
        assert!(matches!(
            build_quadrature(1.0, 1e-12),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nodes_are_invariant_under_scale_squared() {
        let q = Quadrature::for_range(0.7, 1e-6, 1e-3, 1e2, 4).unwrap();
        let shift = (2.0 * 4f64.ln() / q.step).round();
        assert!((shift * q.step - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn direct_fourier_check() {
        let cache = KernelCache::new();
        let params = LevyParams::new(3, 1.0).unwrap();
        let r = levy_reconstruct(&cache, &params, 1, &[1.0, 0.5, 0.0], 1, 1e-8).unwrap();
        assert!(r.direct_residual <= 1e-6, "{r:?}");
        assert!(r.residual <= 1e-6, "{r:?}");
        assert!(matches!(
            levy_reconstruct(&cache, &params, 1, &[0.0; 3], 1, 1e-8),
            Err(Error::PoleAtZero)
        ));
    }

    #[test]
    fn recursion_in_fourier_space() {
        let cache = KernelCache::new();
        let params = LevyParams::new(3, 1.5).unwrap();
        let spec = LatticeSpec::new(3, 1, 1).unwrap();
        for q in [[0.3, 0.0, 0.0], [2.0, -1.0, 0.5], [5.0, 5.0, 5.0]] {
            let r = levy_recursion_residual(&cache, &params, &spec, &q, 1e-7).unwrap();
            assert!(r <= 1e-6, "{q:?}: {r}");
        }
    }

    #[test]
    fn level_kernel_is_finite_range_and_psd() {
        let cache = KernelCache::new();
        let params = LevyParams::new(3, 1.0).unwrap();
        let spec = LatticeSpec::new(3, 1, 1).unwrap();
        let pk = levy_fluctuation(&cache, &params, &spec, 1e-6).unwrap();
        let dg = &pk.diagnostics;
        assert!(dg.range_ok(), "{dg:?}");
        assert!(dg.psd_ok(), "{dg:?}");
        assert!(dg.symmetry_residual <= 1e-10);
        assert!(pk.kernel.even_residual() <= 1e-10 * dg.gamma_at_zero);
        assert!(dg.offgrid_residual <= 1e-9, "{dg:?}");
    }

    #[test]
    fn alpha_guard() {
        assert!(LevyParams::new(3, 0.05).is_err());
        assert!(LevyParams::new(3, 1.95).is_err());
        assert_eq!(LevyParams::new(3, 1.0).unwrap().phi_dim, 1.0);
    }
}
