//! Dirichlet problems for `a - Δ_ε` on lattice cubes and their Poisson kernels.
//!
//! The interior of an axis-aligned cube with `N` sites per side diagonalizes
//! in the tensor sine basis `φ_k(i) = sqrt(2/(N+1)) sin(πki/(N+1))`, so
//! solves are exact up to roundoff and the Green's function row of any start
//! point costs a few dense mode products.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{for_each_site, LatticeSpec};

/// Jumps after which a single walk is abandoned.
pub const WALK_STEP_CAP: u64 = 10_000_000;

const WALK_BATCH: usize = 10_000;

/// Weights in `[-POSITIVITY_SLACK, 0)` are roundoff and clamped to zero.
const POSITIVITY_SLACK: f64 = 1e-14;

/// The lattice cube `U_ε(R)` of side `R` centered at a lattice point, with its
/// exterior boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeDomain {
    spec: LatticeSpec,
    side: f64,
    center: Vec<i64>,
    half_sites: usize,
    interior: Vec<Vec<i64>>,
    boundary: Vec<Vec<i64>>,
}

impl CubeDomain {
    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    /// Physical side length `R`.
    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn center(&self) -> &[i64] {
        &self.center
    }

    /// Interior sites satisfy `|x - center|_∞ <= half_sites`.
    pub fn half_sites(&self) -> usize {
        self.half_sites
    }

    /// Interior sites per axis, `2 * half_sites + 1`.
    pub fn sites_per_axis(&self) -> usize {
        2 * self.half_sites + 1
    }

    /// Interior sites in lexicographic order.
    pub fn interior(&self) -> &[Vec<i64>] {
        &self.interior
    }

    /// Boundary sites (sup-distance `ε` from the interior) in lexicographic order.
    pub fn boundary(&self) -> &[Vec<i64>] {
        &self.boundary
    }

    pub fn contains(&self, site: &[i64]) -> bool {
        site.iter()
            .zip(&self.center)
            .all(|(s, c)| (s - c).unsigned_abs() as usize <= self.half_sites)
    }

    fn local_index(&self, site: &[i64]) -> Vec<usize> {
        site.iter()
            .zip(&self.center)
            .map(|(s, c)| (s - c + self.half_sites as i64) as usize)
            .collect()
    }

    fn interior_flat(&self, site: &[i64]) -> usize {
        let n = self.sites_per_axis();
        self.local_index(site).iter().fold(0, |acc, &i| acc * n + i)
    }
}

/// Number of interior offsets `J` with `|j| ε < R/2`, i.e. `J = ceil(R/(2ε)) - 1`.
pub(crate) fn interior_half_sites(side: f64, spacing: f64) -> Option<usize> {
    let t = side / (2.0 * spacing);
    if !(t > 0.0) || !t.is_finite() {
        return None;
    }
    // Guard against t landing a hair above an integer through roundoff.
    let j = (t * (1.0 - 1e-12)).ceil() - 1.0;
    (j >= 0.0).then_some(j as usize)
}

/// `U_ε(R)` around `center`: interior = open cube of side `R` intersected with
/// the lattice; boundary = sites at sup-distance exactly `ε` from the interior.
pub fn build_cube(spec: &LatticeSpec, side: f64, center: &[i64]) -> Result<CubeDomain> {
    if center.len() != spec.dim() {
        return Err(Error::InvalidArgument("center has wrong dimension".into()));
    }
    let eps = spec.spacing();
    if !(side / eps >= 2.0) {
        return Err(Error::EmptyInterior { side, spacing: eps });
    }
    let half = interior_half_sites(side, eps).ok_or(Error::EmptyInterior { side, spacing: eps })?;
    let d = spec.dim();
    let h = half as i64;
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    let lo: Vec<i64> = center.iter().map(|c| c - h - 1).collect();
    for_each_site(&lo, &vec![2 * half + 3; d], |_, s| {
        let r = s
            .iter()
            .zip(center)
            .map(|(a, c)| (a - c).abs())
            .max()
            .unwrap_or(0);
        if r <= h {
            interior.push(s.to_vec());
        } else {
            boundary.push(s.to_vec());
        }
    });
    Ok(CubeDomain {
        spec: *spec,
        side,
        center: center.to_vec(),
        half_sites: half,
        interior,
        boundary,
    })
}

/// `data ← M ×_axis data` on a row-major tensor with extent `n` on every axis:
/// `out[.., i, ..] = Σ_k mat[i*n + k] data[.., k, ..]`.
pub(crate) fn mode_product(data: &[f64], dim: usize, n: usize, axis: usize, mat: &[f64]) -> Vec<f64> {
    let stride = n.pow((dim - 1 - axis) as u32);
    let block = stride * n;
    let mut out = vec![0.0; data.len()];
    for start in (0..data.len()).step_by(block) {
        let src = &data[start..start + block];
        let dst = &mut out[start..start + block];
        for i in 0..n {
            let row = &mut dst[i * stride..(i + 1) * stride];
            for k in 0..n {
                let m = mat[i * n + k];
                let col = &src[k * stride..(k + 1) * stride];
                for (o, v) in row.iter_mut().zip(col) {
                    *o += m * v;
                }
            }
        }
    }
    out
}

/// Contracts `axis` of a row-major tensor against `vec`, dropping that axis.
pub(crate) fn contract_axis(data: &[f64], dim: usize, n: usize, axis: usize, vec: &[f64]) -> Vec<f64> {
    let stride = n.pow((dim - 1 - axis) as u32);
    let block = stride * n;
    let mut out = vec![0.0; data.len() / n];
    for (b, start) in (0..data.len()).step_by(block).enumerate() {
        let dst = &mut out[b * stride..(b + 1) * stride];
        for (k, &c) in vec.iter().enumerate() {
            let col = &data[start + k * stride..start + (k + 1) * stride];
            for (o, v) in dst.iter_mut().zip(col) {
                *o += c * v;
            }
        }
    }
    out
}

/// Green's-function row of one start point: the Poisson weights on each face
/// and the interior sum `Σ_y G(x, y)`.
#[derive(Clone, Debug)]
pub(crate) struct FaceRow {
    /// `faces[2*axis]` is the low face, `faces[2*axis + 1]` the high face; each
    /// is row-major over the remaining axes in increasing order.
    pub faces: Vec<Vec<f64>>,
    pub green_sum: f64,
}

/// Exact solver for `(μ - Δ_1)` on `{0..N-1}^d` with Dirichlet data, in
/// lattice units (`μ = aε²`).
#[derive(Clone, Debug)]
pub(crate) struct CubeSolver {
    dim: usize,
    n: usize,
    mu: f64,
    /// `basis[i*n + k] = φ_{k+1}(i+1)`; symmetric.
    basis: Vec<f64>,
    /// `1 / (μ + Σ_axis λ_{k_axis})` over the mode grid.
    inv_eigen: Vec<f64>,
    /// `Σ_i φ_k(i)` per mode.
    mode_sums: Vec<f64>,
}

impl CubeSolver {
    pub fn new(dim: usize, n: usize, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::SolverFailure(format!("mass μ = {mu} must be finite and >= 0")));
        }
        if n == 0 {
            return Err(Error::SolverFailure("cube has no interior".into()));
        }
        let np1 = (n + 1) as f64;
        let norm = (2.0 / np1).sqrt();
        let pi = std::f64::consts::PI;
        let mut basis = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                basis[i * n + k] = norm * (pi * ((i + 1) * (k + 1)) as f64 / np1).sin();
            }
        }
        // λ_k = 2 - 2cos(πk/(N+1)) = 4 sin²(πk/(2(N+1))), accurate for small k.
        let lambda: Vec<f64> = (1..=n)
            .map(|k| 4.0 * (pi * k as f64 / (2.0 * np1)).sin().powi(2))
            .collect();
        let mode_sums: Vec<f64> = (0..n)
            .map(|k| (0..n).map(|i| basis[i * n + k]).sum())
            .collect();
        let mut inv_eigen = vec![0.0; n.pow(dim as u32)];
        for_each_site(&vec![0; dim], &vec![n; dim], |flat, k| {
            let e: f64 = mu + k.iter().map(|&k| lambda[k as usize]).sum::<f64>();
            inv_eigen[flat] = 1.0 / e;
        });
        Ok(Self {
            dim,
            n,
            mu,
            basis,
            inv_eigen,
            mode_sums,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Solves `(μ - Δ)h = rhs` with zero Dirichlet data.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut v = rhs.to_vec();
        for ax in 0..self.dim {
            v = mode_product(&v, self.dim, self.n, ax, &self.basis);
        }
        for (x, e) in v.iter_mut().zip(&self.inv_eigen) {
            *x *= e;
        }
        for ax in 0..self.dim {
            v = mode_product(&v, self.dim, self.n, ax, &self.basis);
        }
        v
    }

    /// Poisson weights and Green's sum for the start point with 0-based local
    /// index `start`.
    pub fn row(&self, start: &[usize]) -> FaceRow {
        let (d, n) = (self.dim, self.n);
        let mut c = self.inv_eigen.clone();
        // c_k = Π_axis φ_k(start_axis) / eigenvalue_k
        let mut stride = 1;
        for ax in (0..d).rev() {
            let phi = &self.basis[start[ax] * n..(start[ax] + 1) * n];
            for (flat, v) in c.iter_mut().enumerate() {
                *v *= phi[(flat / stride) % n];
            }
            stride *= n;
        }
        let mut stride = 1;
        let mut sums = c.clone();
        for _ in 0..d {
            for (flat, v) in sums.iter_mut().enumerate() {
                *v *= self.mode_sums[(flat / stride) % n];
            }
            stride *= n;
        }
        let green_sum: f64 = sums.iter().sum();
        let low: Vec<f64> = (0..n).map(|k| self.basis[k]).collect();
        let high: Vec<f64> = (0..n).map(|k| self.basis[(n - 1) * n + k]).collect();
        let mut faces = Vec::with_capacity(2 * d);
        for ax in 0..d {
            for edge in [&low, &high] {
                let mut f = contract_axis(&c, d, n, ax, edge);
                for other in 0..d - 1 {
                    f = mode_product(&f, d - 1, n, other, &self.basis);
                }
                faces.push(f);
            }
        }
        FaceRow { faces, green_sum }
    }
}

pub(crate) fn clamp_weight(w: f64) -> Result<f64> {
    if w >= 0.0 {
        Ok(w)
    } else if w >= -POSITIVITY_SLACK {
        log::trace!("clamping Poisson weight {w:e} to zero");
        Ok(0.0)
    } else {
        Err(Error::SolverFailure(format!("negative Poisson weight {w:e}")))
    }
}

fn solver_for(cube: &CubeDomain, a: f64) -> Result<CubeSolver> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!("mass a = {a} must be >= 0")));
    }
    let eps = cube.spec.spacing();
    CubeSolver::new(cube.spec.dim(), cube.sites_per_axis(), a * eps * eps)
}

/// Solves `(a - Δ_ε) h = 0` in the interior with `h = f` on the boundary.
/// `f` is indexed like [`CubeDomain::boundary`]; the result like
/// [`CubeDomain::interior`].
pub fn solve_dirichlet(cube: &CubeDomain, a: f64, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != cube.boundary.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boundary values for {} boundary sites",
            f.len(),
            cube.boundary.len()
        )));
    }
    let solver = solver_for(cube, a)?;
    let mut rhs = vec![0.0; cube.interior.len()];
    let mut nb = vec![0; cube.spec.dim()];
    for (b, &v) in cube.boundary.iter().zip(f) {
        for ax in 0..b.len() {
            for step in [-1, 1] {
                nb.copy_from_slice(b);
                nb[ax] += step;
                if cube.contains(&nb) {
                    rhs[cube.interior_flat(&nb)] += v;
                }
            }
        }
    }
    Ok(solver.solve(&rhs))
}

/// The Poisson kernel `P^a_U(x, ·)`: the boundary measure with
/// `h(x) = Σ_b w(b) f(b)` for the solution `h` of the Dirichlet problem.
#[derive(Clone, Debug)]
pub struct PoissonKernelRow<'a> {
    pub cube: &'a CubeDomain,
    pub a: f64,
    pub x: Vec<i64>,
    /// One weight per boundary site, in boundary order.
    pub weights: Vec<f64>,
    defect: f64,
}

impl PoissonKernelRow<'_> {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Poisson kernel row of the interior start point `x`.
pub fn poisson_kernel<'a>(cube: &'a CubeDomain, a: f64, x: &[i64]) -> Result<PoissonKernelRow<'a>> {
    if x.len() != cube.spec.dim() || !cube.contains(x) {
        return Err(Error::InvalidArgument(format!("{x:?} is not an interior site")));
    }
    let solver = solver_for(cube, a)?;
    let row = solver.row(&cube.local_index(x));
    let d = cube.spec.dim();
    let h = cube.half_sites as i64;
    let n = cube.sites_per_axis();
    let index: HashMap<&[i64], usize> = cube
        .boundary
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_slice(), i))
        .collect();
    let mut weights = vec![0.0; cube.boundary.len()];
    let mut site = vec![0; d];
    for ax in 0..d {
        for (side, face) in row.faces[2 * ax..2 * ax + 2].iter().enumerate() {
            for (t, &w) in face.iter().enumerate() {
                let mut rest = t;
                for other in (0..d).rev().filter(|&o| o != ax) {
                    site[other] = cube.center[other] - h + (rest % n) as i64;
                    rest /= n;
                }
                site[ax] = cube.center[ax] + if side == 0 { -h - 1 } else { h + 1 };
                weights[index[site.as_slice()]] = clamp_weight(w)?;
            }
        }
    }
    Ok(PoissonKernelRow {
        cube,
        a,
        x: x.to_vec(),
        weights,
        defect: solver.mu() * row.green_sum,
    })
}

/// `1 - Σ_b w(b)`, evaluated as `aε² Σ_y G(x, y)` to avoid cancellation.
pub fn defect_mass(row: &PoissonKernelRow<'_>) -> f64 {
    row.defect
}

/// Monte Carlo estimate of a Poisson kernel row with per-bin standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkEstimate {
    pub weights: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_walks: usize,
    /// Sample mean of the exit time `τ`.
    pub mean_exit_time: f64,
    pub seed: u64,
}

impl WalkEstimate {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ_b |w(b) - exact(b)|`.
    pub fn total_variation(&self, exact: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(exact)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn std_error_sum(&self) -> f64 {
        self.std_errors.iter().sum()
    }
}

#[derive(Default)]
struct WalkTally {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    exit_time: f64,
}

/// Estimates `P^a_U(x, b) = E_x[e^{-aτ}; X_τ = b]` with the continuous-time
/// simple random walk of generator `Δ_ε`: exponential holding times of rate
/// `2d/ε²` and uniform jumps to the `2d` neighbours.
///
/// Walks run in batches, each on its own ChaCha stream of `seed`, so the
/// estimate does not depend on the thread count.
pub fn walk_exit_oracle(
    cube: &CubeDomain,
    a: f64,
    x: &[i64],
    n_walks: usize,
    seed: u64,
) -> Result<WalkEstimate> {
    if !cube.contains(x) {
        return Err(Error::InvalidArgument(format!("{x:?} is not an interior site")));
    }
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!("mass a = {a} must be >= 0")));
    }
    let d = cube.spec.dim();
    let eps = cube.spec.spacing();
    let rate = 2.0 * d as f64 / (eps * eps);
    let clock = Exp::new(rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let index: HashMap<&[i64], usize> = cube
        .boundary
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_slice(), i))
        .collect();
    let nb = cube.boundary.len();
    let batches: Vec<(usize, usize)> = (0..n_walks)
        .step_by(WALK_BATCH)
        .enumerate()
        .map(|(i, s)| (i, WALK_BATCH.min(n_walks - s)))
        .collect();
    let tallies: Vec<Result<WalkTally>> = batches
        .par_iter()
        .map(|&(batch, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(batch as u64);
            let mut t = WalkTally {
                sum: vec![0.0; nb],
                sum_sq: vec![0.0; nb],
                exit_time: 0.0,
            };
            let mut pos = vec![0; d];
            for _ in 0..count {
                pos.copy_from_slice(x);
                let mut tau = 0.0;
                let mut steps = 0u64;
                while cube.contains(&pos) {
                    if steps == WALK_STEP_CAP {
                        return Err(Error::StepCapExceeded { cap: WALK_STEP_CAP });
                    }
                    tau += clock.sample(&mut rng);
                    let j = rng.random_range(0..2 * d);
                    pos[j / 2] += if j % 2 == 0 { 1 } else { -1 };
                    steps += 1;
                }
                let w = (-a * tau).exp();
                let b = index[pos.as_slice()];
                t.sum[b] += w;
                t.sum_sq[b] += w * w;
                t.exit_time += tau;
            }
            Ok(t)
        })
        .collect();
    let mut sum = vec![0.0; nb];
    let mut sum_sq = vec![0.0; nb];
    let mut exit_time = 0.0;
    for t in tallies {
        let t = t?;
        for b in 0..nb {
            sum[b] += t.sum[b];
            sum_sq[b] += t.sum_sq[b];
        }
        exit_time += t.exit_time;
    }
    let n = n_walks as f64;
    let weights: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_errors = weights
        .iter()
        .zip(&sum_sq)
        .map(|(m, sq)| ((sq / n - m * m).max(0.0) / n).sqrt())
        .collect();
    Ok(WalkEstimate {
        weights,
        std_errors,
        n_walks,
        mean_exit_time: exit_time / n,
        seed,
    })
}
