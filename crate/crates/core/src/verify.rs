//! Named numerical checks with tolerances, and the default verification suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::averaging::scaling_residual;
use crate::cache::KernelCache;
use crate::decomposition::{
    convergence_sequence, fluctuation_position, reconstruct_green, rescaled_fluctuation,
    LevelDiagnostics, MAX_SOBOLEV, PSD_TOLERANCE, RANGE_TOLERANCE,
};
use crate::dirichlet::{build_cube, poisson_kernel, walk_exit_oracle};
use crate::error::{Error, Result};
use crate::lattice::{green_identity_sides, poincare_residual, LatticeKernel, LatticeSpec};
use crate::levy::{build_quadrature, levy_reconstruct, LevyParams};
use crate::sampling::{build_sampler, empirical_covariance};

/// Relative tolerance of the Fourier reconstruction.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-8;
/// Relative tolerance of the scaling relation between averaging kernels.
pub const SCALING_TOLERANCE: f64 = 1e-9;
/// Relative tolerance of the Lévy identities.
pub const LEVY_TOLERANCE: f64 = 1e-6;
/// Relative tolerance of the discrete Green identity.
pub const GREEN_IDENTITY_TOLERANCE: f64 = 1e-10;
/// Off-grid spectral consistency of position kernels.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-9;
/// Monte Carlo agreement in standard errors.
pub const SIGMA_LIMIT: f64 = 4.0;

/// One certified number: `value` compared against `tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// `"<="` or `">="`.
    pub relation: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            relation: "<=".into(),
            passed: value <= tolerance,
            detail: serde_json::Value::Null,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            relation: ">=".into(),
            passed: value >= tolerance,
            detail: serde_json::Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = detail;
        self
    }

    /// `PASS name: value <= tolerance`.
    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} {} {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.relation,
            self.tolerance
        )
    }
}

fn tag(spec: &LatticeSpec, a: f64) -> String {
    format!("d={} L={} n={} a={a}", spec.dim(), spec.scale(), spec.level())
}

/// Range, positivity and spectral consistency of a position kernel.
pub fn kernel_checks(label: &str, dg: &LevelDiagnostics) -> Vec<Check> {
    let detail = json!({
        "claimed_range": dg.claimed_range,
        "support_radius": dg.support_radius,
        "range_margin": dg.range_margin,
        "torus_side": dg.torus_side,
        "claim_on_torus": dg.claim_on_torus,
    });
    vec![
        Check::at_most(format!("range {label}"), dg.beyond_claim, RANGE_TOLERANCE).with_detail(detail),
        Check::at_most(
            format!("psd {label}"),
            -dg.min_spectrum / dg.max_spectrum,
            PSD_TOLERANCE,
        )
        .with_detail(json!({"min": dg.min_spectrum, "max": dg.max_spectrum})),
        Check::at_most(
            format!("spectral consistency {label}"),
            dg.offgrid_residual,
            CONSISTENCY_TOLERANCE,
        ),
    ]
}

/// Checks of `Γ^a_ε` on `spec`'s lattice.
pub fn base_kernel_checks(cache: &KernelCache, spec: &LatticeSpec, a: f64) -> Result<Vec<Check>> {
    let pk = fluctuation_position(cache, spec, a)?;
    Ok(kernel_checks(&format!("base {}", tag(spec, a)), &pk.diagnostics))
}

/// Checks of `Γ^a_n`, returning the diagnostics for trend checks.
pub fn level_checks(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
) -> Result<(Vec<Check>, LevelDiagnostics)> {
    let lvl = rescaled_fluctuation(cache, spec, a)?;
    let checks = kernel_checks(&format!("level {}", tag(spec, a)), &lvl.diagnostics);
    Ok((checks, lvl.diagnostics))
}

/// Largest reconstruction residual over `count` random `p ∈ B_1 \ {0}`.
pub fn reconstruction_check(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    n: u32,
    a: f64,
    count: usize,
    seed: u64,
) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    let mut worst: f64 = 0.0;
    let mut at = Vec::new();
    for _ in 0..count {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-pi..pi)).collect();
        let r = reconstruct_green(cache, dim, log2_scale, &p, a, n)?;
        if r.residual >= worst {
            worst = r.residual;
            at = p;
        }
    }
    Ok(Check::at_most(
        format!("reconstruction d={dim} L={} n={n} a={a}", 1u64 << log2_scale),
        worst,
        RECONSTRUCTION_TOLERANCE,
    )
    .with_detail(json!({"worst_momentum": at, "momenta": count})))
}

/// Exact Poisson kernel against a random-walk estimate on a cube of side
/// `side` around the origin of `Z^d`: `Σ_b |P(b) - P̂(b)| ≤ 4 Σ_b σ_b`.
pub fn poisson_oracle_check(dim: usize, side: f64, a: f64, walks: usize, seed: u64) -> Result<Check> {
    let spec = LatticeSpec::new(dim, 1, 0)?;
    let cube = build_cube(&spec, side, &vec![0; dim])?;
    let x = vec![0; dim];
    let exact = poisson_kernel(&cube, a, &x)?;
    let est = walk_exit_oracle(&cube, a, &x, walks, seed)?;
    let tv = est.total_variation(&exact.weights);
    let se = est.std_error_sum();
    Ok(Check::at_most(
        format!("poisson oracle d={dim} R={side} a={a}"),
        tv / se,
        SIGMA_LIMIT,
    )
    .with_detail(json!({
        "total_variation": tv,
        "std_error_sum": se,
        "walks": walks,
        "exact_mass": exact.mass(),
        "walk_mass": est.mass(),
    })))
}

/// `0 <= 1 - mass <= μ S²/2` for every single-cube kernel in the cache, with
/// `μ = aε²` and `S = R/ε`. The value is the largest `defect / bound`.
pub fn defect_check(cache: &KernelCache) -> Check {
    let mut worst: f64 = 0.0;
    let mut min_slack = f64::INFINITY;
    let mut negative = false;
    let mut count = 0;
    for e in cache.entries().iter().filter(|e| !e.composite) {
        count += 1;
        let s = (e.scale as f64).powi(e.depth as i32 + 1);
        let bound = e.lattice_mass * s * s / 2.0;
        negative |= e.defect < 0.0;
        if bound > 0.0 {
            worst = worst.max(e.defect / bound);
            min_slack = min_slack.min(bound - e.defect);
        } else if e.defect != 0.0 {
            worst = f64::INFINITY;
        }
    }
    if negative {
        worst = f64::INFINITY;
    }
    Check::at_most("defect bound (all cached kernels)", worst, 1.0)
        .with_detail(json!({"kernels": count, "min_slack": min_slack}))
}

pub fn scaling_check(spec: &LatticeSpec, m: u32, a: f64) -> Result<Check> {
    let r = scaling_residual(spec, m, a, &[])?;
    Ok(Check::at_most(
        format!("scaling {} m={m}", tag(spec, a)),
        r,
        SCALING_TOLERANCE,
    ))
}

/// Ratio `|Γ̂_3(p) - Γ̂_2(p)| / |Γ̂_2(p) - Γ̂_1(p)|` against `2/L`. The first step
/// from `n = 0` is reported but not part of the check.
pub fn convergence_check(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    p: &[f64],
    a: f64,
) -> Result<Check> {
    let rep = convergence_sequence(cache, dim, log2_scale, p, a, 3)?;
    let worst = rep.ratios.iter().skip(1).cloned().fold(0.0, f64::max);
    let l = (1u64 << log2_scale) as f64;
    Ok(Check::at_most(
        format!("convergence d={dim} L={l} a={a} p={p:?}"),
        worst,
        2.0 / l,
    )
    .with_detail(json!({"values": rep.values, "ratios": rep.ratios, "extrapolated": rep.extrapolated})))
}

/// `max_n ‖Γ_n‖_{H_k} / min_n ‖Γ_n‖_{H_k}` for each `k`, over levels sharing `a`.
pub fn sobolev_variation_check(label: &str, norms: &[Vec<f64>]) -> Check {
    let mut worst: f64 = 0.0;
    for k in 0..=MAX_SOBOLEV {
        let col: Vec<f64> = norms.iter().map(|v| v[k]).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.max(max / min);
    }
    Check::at_most(format!("sobolev uniformity {label}"), worst, 10.0)
        .with_detail(json!({"norms": norms}))
}

/// Largest increase of `‖Γ_n‖_{H_k}` between consecutive masses (sorted
/// ascending), relative; nonpositive when the norms decrease.
pub fn sobolev_monotone_check(label: &str, by_mass: &[Vec<f64>]) -> Check {
    let mut worst = f64::NEG_INFINITY;
    for w in by_mass.windows(2) {
        for k in 0..=MAX_SOBOLEV {
            worst = worst.max((w[1][k] - w[0][k]) / w[0][k]);
        }
    }
    Check::at_most(format!("sobolev decreasing in a {label}"), worst, 0.0)
}

/// Scalar identity `c_α Σ_k w_k/(μ_k + t) = t^{-α/2}`.
pub fn levy_scalar_check(alpha: f64, t: f64, tol: f64) -> Result<Check> {
    let q = build_quadrature(alpha, tol)?;
    Ok(Check::at_most(
        format!("levy quadrature alpha={alpha} t={t}"),
        q.scalar_residual(t),
        LEVY_TOLERANCE,
    )
    .with_detail(json!({"nodes": q.len()})))
}

pub fn levy_reconstruction_check(
    cache: &KernelCache,
    dim: usize,
    log2_scale: u32,
    alpha: f64,
    n: u32,
    p: &[f64],
    tol: f64,
) -> Result<Check> {
    let params = LevyParams::new(dim, alpha)?;
    let r = levy_reconstruct(cache, &params, log2_scale, p, n, tol)?;
    Ok(Check::at_most(
        format!("levy reconstruction d={dim} L={} n={n} alpha={alpha} p={p:?}", 1u64 << log2_scale),
        r.residual.max(r.direct_residual),
        LEVY_TOLERANCE,
    )
    .with_detail(json!({"exact": r.exact, "direct": r.direct, "rhs": r.rhs, "nodes": r.nodes})))
}

/// Empirical covariance of `samples` draws of `Γ^a_n` at ten offsets inside
/// the range, and at offsets beyond it.
pub fn sampler_checks(
    cache: &KernelCache,
    spec: &LatticeSpec,
    a: f64,
    side: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Check>> {
    let lvl = rescaled_fluctuation(cache, spec, a)?;
    let sm = build_sampler(&lvl.gamma, side, seed)?;
    let d = spec.dim();
    let range = lvl.gamma.support_radius_sites(RANGE_TOLERANCE * lvl.diagnostics.gamma_at_zero).unwrap_or(0);
    // Up to ten offsets in [0, range]^d, axis 0 varying fastest.
    let inside: Vec<Vec<i64>> = (0..(range + 1).pow(d as u32).min(10))
        .map(|i| {
            let mut rest = i;
            (0..d)
                .map(|_| {
                    let c = rest % (range + 1);
                    rest /= range + 1;
                    c
                })
                .collect()
        })
        .collect();
    let beyond: Vec<Vec<i64>> = [range + 1, range + 3, side as i64 / 2]
        .iter()
        .map(|&r| {
            let mut o = vec![0; d];
            o[0] = r;
            o
        })
        .collect();
    let all: Vec<Vec<i64>> = inside.iter().chain(&beyond).cloned().collect();
    let est = empirical_covariance(&sm, &all, samples);
    let z_in = est[..inside.len()]
        .iter()
        .map(|c| c.estimate.z_score(c.exact))
        .fold(0.0, f64::max);
    let z_out = est[inside.len()..]
        .iter()
        .map(|c| c.estimate.z_score(0.0))
        .fold(0.0, f64::max);
    let label = tag(spec, a);
    Ok(vec![
        Check::at_most(format!("sampler covariance {label}"), z_in, SIGMA_LIMIT)
            .with_detail(json!({"samples": samples, "side": side, "clamped": sm.clamped()})),
        Check::at_most(format!("sampler beyond range {label}"), z_out, SIGMA_LIMIT)
            .with_detail(json!({"offsets": beyond})),
    ])
}

/// The discrete Green identity and the Poincaré inequality on `count`
/// random fields each.
pub fn identity_checks(count: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_green: f64 = 0.0;
    for i in 0..count {
        let d = 1 + i % 3;
        let spec = LatticeSpec::new(d, 1, (i % 3) as u32)?;
        let hw = 4;
        let mut rnd = |_: &[i64]| rng.random_range(-1.0..1.0);
        let h = LatticeKernel::centered_from_fn(spec, hw, &mut rnd);
        let phi = LatticeKernel::centered_from_fn(spec, hw - 1, &mut rnd);
        let a = rng.random_range(0.0..4.0);
        let (l, r) = green_identity_sides(&h, &phi, a);
        worst_green = worst_green.max((l - r).abs() / l.abs().max(r.abs()));
    }
    let mut worst_poincare: f64 = 0.0;
    for i in 0..count {
        let d = 1 + i % 2;
        let spec = LatticeSpec::new(d, 3, 1)?;
        let n = spec.sites_per_unit() as usize;
        let u = LatticeKernel::from_fn(spec, vec![0; d], vec![n + 1; d], |s| {
            if s.iter().all(|&c| c > 0 && c < n as i64) {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let (l, r) = poincare_residual(&u)?;
        worst_poincare = worst_poincare.max(l / r);
    }
    Ok(vec![
        Check::at_most("green identity (random fields)", worst_green, GREEN_IDENTITY_TOLERANCE)
            .with_detail(json!({"fields": count})),
        Check::at_most("poincare lhs/rhs (random fields)", worst_poincare, 1.0)
            .with_detail(json!({"fields": count})),
    ])
}

/// Parameters of [`verify`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub dim: usize,
    pub log2_scale: u32,
    pub levels: u32,
    pub masses: Vec<f64>,
    pub alpha: f64,
    pub tol: f64,
    pub seed: u64,
    pub walks: usize,
    pub samples: usize,
    pub momenta: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            log2_scale: 1,
            levels: 2,
            masses: vec![1.0],
            alpha: 1.0,
            tol: 1e-8,
            seed: 1,
            walks: 100_000,
            samples: 10_000,
            momenta: 50,
        }
    }
}

/// Result of a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every check family at the configured `(d, L, n)` and masses.
pub fn verify(cache: &KernelCache, cfg: &VerifyConfig) -> Result<VerifyReport> {
    let start = Instant::now();
    let (d, p, n) = (cfg.dim, cfg.log2_scale, cfg.levels);
    let l = 1u64 << p;
    let mut checks = Vec::new();
    for &a in &cfg.masses {
        let mut norms = Vec::new();
        for j in 0..=n {
            let spec = LatticeSpec::new(d, p, j)?;
            checks.extend(base_kernel_checks(cache, &spec, a)?);
            let (c, dg) = level_checks(cache, &spec, a)?;
            checks.extend(c);
            norms.push(dg.sobolev);
        }
        checks.push(sobolev_variation_check(&format!("d={d} L={l} a={a}"), &norms));
        for j in 1..=n {
            checks.push(reconstruction_check(cache, d, p, j, a, cfg.momenta, cfg.seed)?);
            for m in 1..=j {
                checks.push(scaling_check(&LatticeSpec::new(d, p, j)?, m, a)?);
            }
        }
        let probe: Vec<f64> = (0..d).map(|i| if i == 0 { 0.5 } else { 0.0 }).collect();
        checks.push(match convergence_check(cache, d, p, &probe, a) {
            Err(e @ Error::ProblemTooLarge { .. }) => {
                Check::at_most(format!("convergence d={d} L={l} a={a} p={probe:?}"), f64::NAN, 2.0 / l as f64)
                    .with_detail(json!({"error": e.to_string()}))
            }
            other => other?,
        });
        if d <= 2 {
            checks.push(poisson_oracle_check(d, 2.0 * l as f64, a, cfg.walks, cfg.seed)?);
        }
        if n >= 1 {
            let spec = LatticeSpec::new(d, p, 1)?;
            checks.extend(sampler_checks(cache, &spec, a, 64, cfg.samples, cfg.seed)?);
        }
    }
    checks.push(defect_check(cache));
    for t in [0.5, 1.0, 3.0] {
        checks.push(levy_scalar_check(cfg.alpha, t, cfg.tol)?);
    }
    let probe: Vec<f64> = (0..d).map(|i| [1.0, 0.5, 0.0, 0.25][i]).collect();
    checks.push(levy_reconstruction_check(cache, d, p, cfg.alpha, n.max(1), &probe, cfg.tol)?);
    checks.extend(identity_checks(100, cfg.seed)?);
    Ok(VerifyReport {
        config: cfg.clone(),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
