//! One function per subcommand, each filling a [`Report`].

use std::time::Instant;

use finite_range::cache::KernelCache;
use finite_range::decomposition::{decompose, fluctuation_position, reconstruct_green};
use finite_range::dirichlet::{build_cube, defect_mass, poisson_kernel, walk_exit_oracle};
use finite_range::lattice::LatticeSpec;
use finite_range::levy::{levy_fluctuation, LevyParams};
use finite_range::sampling::{synthesize, Estimate};
use finite_range::verify::{
    kernel_checks, levy_reconstruction_check, levy_scalar_check, reconstruction_check,
    sobolev_variation_check, verify, Check, VerifyConfig, RECONSTRUCTION_TOLERANCE, SIGMA_LIMIT,
};
use serde_json::json;

use crate::output::Report;
use crate::settings::Settings;
use crate::CliError;

fn spec(s: &Settings, level: u32) -> Result<LatticeSpec, CliError> {
    Ok(LatticeSpec::new(s.dim, s.log2_scale, level)?)
}

fn timed<T>(report: &mut Report, label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    report.timings.push((label.to_string(), t.elapsed().as_secs_f64()));
    out
}

/// Poisson kernel of the cube of side `R` around the origin, with its defect
/// bound and a random-walk cross-check.
pub fn poisson(s: &Settings, _cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let sp = spec(s, s.levels)?;
    let side = s.side.unwrap_or(s.scale as f64);
    let cube = build_cube(&sp, side, &vec![0; s.dim])?;
    let x = vec![0; s.dim];
    let walks = s.walks.unwrap_or(100_000);
    for (i, &a) in s.mass.iter().enumerate() {
        let row = timed(&mut r, &format!("solve a={a}"), || poisson_kernel(&cube, a, &x))?;
        let defect = defect_mass(&row);
        let bound = a * side * side / 2.0;
        r.checks.push(Check::at_least(format!("defect nonnegative a={a}"), defect, 0.0));
        r.checks.push(
            Check::at_most(format!("defect bound a={a}"), defect - bound, 0.0)
                .with_detail(json!({"defect": defect, "bound": bound})),
        );
        let mut res = json!({"a": a, "mass": row.mass(), "defect": defect, "bound": bound});
        if walks > 0 {
            let est = timed(&mut r, &format!("walks a={a}"), || {
                walk_exit_oracle(&cube, a, &x, walks, s.seed)
            })?;
            let tv = est.total_variation(&row.weights);
            let se = est.std_error_sum();
            r.checks.push(
                Check::at_most(format!("walk oracle a={a}"), tv / se, SIGMA_LIMIT)
                    .with_detail(json!({"total_variation": tv, "std_error_sum": se})),
            );
            res["walks"] = json!(walks);
            res["mean_exit_time"] = json!(est.mean_exit_time);
        }
        r.result(&format!("a{i}"), res)?;
        r.fields.push((
            format!("poisson_a{i}"),
            cube.boundary().iter().cloned().zip(row.weights.iter().cloned()).collect(),
        ));
    }
    r.result("cube", json!({"side": side, "boundary_sites": cube.boundary().len()}))?;
    Ok(r)
}

/// `A^a_{ε_n,m}(R_m)` with its defect bound.
pub fn averaging(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let sp = spec(s, s.levels)?;
    let m = s.m.unwrap_or(0);
    for (i, &a) in s.mass.iter().enumerate() {
        let k = timed(&mut r, &format!("build a={a}"), || cache.averaging(&sp, m, a))?;
        let side = k.cube_side().unwrap_or(0.0);
        let bound = a * side * side / 2.0;
        r.checks.push(Check::at_least(format!("defect nonnegative a={a}"), k.defect(), 0.0));
        r.checks.push(Check::at_most(format!("defect bound a={a}"), k.defect() - bound, 0.0));
        let dens = k.density();
        r.checks.push(Check::at_most(
            format!("cubic symmetry a={a}"),
            dens.cubic_symmetry_residual() / dens.max_abs(),
            1e-12,
        ));
        r.result(
            &format!("a{i}"),
            json!({
                "a": a,
                "m": m,
                "cube_side": side,
                "mass": k.mass(),
                "defect": k.defect(),
                "defect_bound": bound,
                "support_radius": k.support_radius(),
                "second_moment": k.second_moment(),
            }),
        )?;
        r.kernels.push((format!("averaging_a{i}"), dens));
    }
    Ok(r)
}

/// `Γ^a_ε` on the level-`n` lattice.
pub fn fluctuation(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let sp = spec(s, s.levels)?;
    for (i, &a) in s.mass.iter().enumerate() {
        let pk = timed(&mut r, &format!("build a={a}"), || fluctuation_position(cache, &sp, a))?;
        r.checks.extend(kernel_checks(&format!("a={a}"), &pk.diagnostics));
        r.result(&format!("a{i}"), json!({"a": a, "diagnostics": pk.diagnostics}))?;
        r.kernels.push((format!("fluctuation_a{i}"), pk.kernel));
    }
    Ok(r)
}

/// Levels `j < n` of the decomposition of `G^a` with the reconstruction check.
pub fn decompose_cmd(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    for (i, &a) in s.mass.iter().enumerate() {
        if let Some(p) = &s.p {
            // Checked first so that a pole is reported before any heavy work.
            let rec = reconstruct_green(cache, s.dim, s.log2_scale, p, a, s.levels)?;
            r.checks.push(Check::at_most(
                format!("reconstruction a={a} p={p:?}"),
                rec.residual,
                RECONSTRUCTION_TOLERANCE,
            ));
            r.result(&format!("reconstruction_a{i}"), &rec)?;
        } else if s.levels > 0 {
            let c = reconstruction_check(
                cache,
                s.dim,
                s.log2_scale,
                s.levels,
                a,
                s.momenta.unwrap_or(50),
                s.seed,
            )?;
            r.checks.push(c);
        }
        let levels = timed(&mut r, &format!("levels a={a}"), || {
            decompose(cache, s.dim, s.log2_scale, a, s.levels)
        })?;
        let mut norms = Vec::new();
        for lvl in levels {
            let j = lvl.level;
            r.checks.extend(kernel_checks(&format!("j={j} a={a}"), &lvl.diagnostics));
            r.result(
                &format!("level{j}_a{i}"),
                json!({"j": j, "mass": lvl.mass, "diagnostics": lvl.diagnostics}),
            )?;
            norms.push(lvl.diagnostics.sobolev.clone());
            r.kernels.push((format!("level{j}_a{i}"), lvl.gamma));
        }
        // Level j carries mass L^{2j}a, so only a = 0 compares equal masses.
        if norms.len() > 1 && a == 0.0 {
            r.checks.push(sobolev_variation_check(&format!("a={a}"), &norms));
        }
    }
    Ok(r)
}

/// Lévy kernels `Γ_j`, `j < n`, the scalar identity and the reconstruction.
pub fn levy(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let params = LevyParams::new(s.dim, s.alpha)?;
    r.result("params", &params)?;
    for t in [0.5, 1.0, 3.0] {
        r.checks.push(levy_scalar_check(s.alpha, t, s.tol)?);
    }
    let p = s
        .p
        .clone()
        .unwrap_or_else(|| (0..s.dim).map(|i| [1.0, 0.5, 0.0, 0.25][i]).collect());
    let n = s.levels.max(1);
    let rec = timed(&mut r, "reconstruction", || {
        levy_reconstruction_check(cache, s.dim, s.log2_scale, s.alpha, n, &p, s.tol)
    })?;
    r.checks.push(rec);
    for j in 0..s.levels {
        let sp = spec(s, j)?;
        let pk = timed(&mut r, &format!("level {j}"), || {
            levy_fluctuation(cache, &params, &sp, s.tol.max(1e-8))
        })?;
        r.checks.extend(kernel_checks(&format!("levy j={j}"), &pk.diagnostics));
        r.result(&format!("level{j}"), json!({"j": j, "diagnostics": pk.diagnostics}))?;
        r.kernels.push((format!("levy_level{j}"), pk.kernel));
    }
    Ok(r)
}

/// A synthesized multiscale field and its empirical covariance.
pub fn sample(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let a = s.mass[0];
    let side = s.side.map_or(64, |v| v as usize);
    let count = s.samples.unwrap_or(1000);
    let levels = timed(&mut r, "levels", || decompose(cache, s.dim, s.log2_scale, a, s.levels.max(1)))?;
    let phi_dim = (s.dim as f64 - 2.0) / 2.0;
    let syn = synthesize(&levels, phi_dim, side, s.seed)?;
    let offsets: Vec<Vec<i64>> = (0..4i64)
        .map(|k| (0..s.dim).map(|i| if i == 0 { k } else { 0 }).collect())
        .chain(std::iter::once(vec![side as i64 / 2; s.dim]))
        .collect();
    let rows = timed(&mut r, "sampling", || {
        syn.map_samples(count, |f| {
            offsets.iter().map(|o| f.translation_average(o)).collect::<Vec<_>>()
        })
    });
    let mut table = Vec::new();
    for (k, o) in offsets.iter().enumerate() {
        let est = Estimate::from_values(&rows.iter().map(|row| row[k]).collect::<Vec<_>>());
        let exact = syn.covariance(o);
        r.checks.push(Check::at_most(
            format!("covariance offset {o:?}"),
            est.z_score(exact),
            SIGMA_LIMIT,
        ));
        table.push(json!({"offset": o, "exact": exact, "mean": est.mean, "std_error": est.std_error}));
    }
    r.result("covariance", table)?;
    r.result("samples", count)?;
    r.result("torus_side", side)?;
    let field = syn.sample(0);
    let d = s.dim;
    let mut rows_out = Vec::with_capacity(field.values.len());
    for (flat, v) in field.values.iter().enumerate() {
        let mut rest = flat;
        let mut site = vec![0i64; d];
        for c in site.iter_mut().rev() {
            *c = (rest % side) as i64;
            rest /= side;
        }
        rows_out.push((site, *v));
    }
    r.fields.push(("sample".into(), rows_out));
    Ok(r)
}

/// The verification suite.
pub fn verify_cmd(s: &Settings, cache: &KernelCache) -> Result<Report, CliError> {
    let mut r = Report::default();
    let cfg = VerifyConfig {
        dim: s.dim,
        log2_scale: s.log2_scale,
        levels: s.levels,
        masses: s.mass.clone(),
        alpha: s.alpha,
        tol: s.tol,
        seed: s.seed,
        walks: s.walks.unwrap_or(100_000),
        samples: s.samples.unwrap_or(10_000),
        momenta: s.momenta.unwrap_or(50),
    };
    let rep = timed(&mut r, "verify", || verify(cache, &cfg))?;
    r.checks = rep.checks;
    r.result("cache", json!({"hits": cache.hits(), "misses": cache.misses()}))?;
    Ok(r)
}
