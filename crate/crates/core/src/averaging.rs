//! Mollified, translation-averaged Poisson operators `A^a_{ε_n,m}(R_m)`.
//!
//! The kernel of level `n`, scale index `m` and mass `a` averages the Poisson
//! kernel of the cube of side `R_m = L^{-(m-1)}` over cube centers `z` drawn
//! from the bump `c g_m(z) dz`. In lattice units (`ε_n = 1`) it depends only on
//! `k = n - m` and `μ = aε_n²`: the cube has `L^{k+1}` sites per side and the
//! bump radius is `L^{k+1}/4` sites. Everything is built in those units and
//! rescaled on the way out.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::KernelCache;
use crate::dirichlet::{clamp_weight, CubeSolver};
use crate::error::{Error, Result};
use crate::lattice::{for_each_site, scale_pow, LatticeKernel, LatticeSpec, MomentumPoint};

/// Canonical start offsets whose rows are solved per parallel chunk.
const ROW_CHUNK: usize = 16;
/// Largest averaging kernel, in stored weights, that will be built.
pub const WEIGHT_BUDGET: usize = 1 << 24;

/// Unnormalized profile `exp(-1/(1 - s²))` for `s < 1`, else 0.
fn bump_shape(s2: f64) -> f64 {
    if s2 < 1.0 {
        (-1.0 / (1.0 - s2)).exp()
    } else {
        0.0
    }
}

/// Surface area of the unit sphere `S^{d-1}`.
fn sphere_area(dim: usize) -> f64 {
    use std::f64::consts::PI;
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        _ => unreachable!("dimension checked by LatticeSpec"),
    }
}

/// The radial bump `g(x) = N exp(-1/(1 - (4|x|/L)²))` supported in `|x| < L/4`,
/// normalized so that `∫_{R^d} g = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    dim: usize,
    scale: u64,
    norm: f64,
}

impl BumpProfile {
    pub fn new(dim: usize, scale: u64) -> Self {
        // ∫ g = N (L/4)^d |S^{d-1}| ∫_0^1 e^{-1/(1-s²)} s^{d-1} ds; composite
        // Simpson on a grid fine enough for the smooth, flat-ended integrand.
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |s: f64| bump_shape(s * s) * s.powi(dim as i32 - 1);
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let radial = acc * h / 3.0;
        let radius = scale as f64 / 4.0;
        let norm = 1.0 / (radius.powi(dim as i32) * sphere_area(dim) * radial);
        Self { dim, scale, norm }
    }

    pub fn for_spec(spec: &LatticeSpec) -> Self {
        Self::new(spec.dim(), spec.scale())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Support radius `L/4`.
    pub fn radius(&self) -> f64 {
        self.scale as f64 / 4.0
    }

    /// Normalization factor `N`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// `g` at Euclidean radius `r`.
    pub fn value(&self, r: f64) -> f64 {
        let s = r / self.radius();
        self.norm * bump_shape(s * s)
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        self.value(x.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    /// `g_m(x) = L^{md} g(L^m x)`.
    pub fn scaled_at(&self, m: u32, x: &[f64]) -> f64 {
        let lm = (self.scale as f64).powi(m as i32);
        let y: Vec<f64> = x.iter().map(|c| c * lm).collect();
        lm.powi(self.dim as i32) * self.at(&y)
    }

    /// Stable hash identifying the profile in cache keys.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "bump-v1:exp(-1/(1-(4r/L)^2)):d={}:L={}:norm={:e}",
            self.dim, self.scale, self.norm
        );
        hex::encode(Sha256::digest(desc.as_bytes()))
    }
}

/// `c_ε = 1 / (ε^d Σ_{x ∈ (εZ)^d} g(x))`.
pub fn lattice_normalizer(profile: &BumpProfile, spacing: f64) -> Result<f64> {
    let d = profile.dim;
    let rho = profile.radius() / spacing;
    let rho2 = rho * rho;
    let r = rho.ceil() as i64;
    // g depends on |x|² only, which is an integer in site units.
    let table: Vec<f64> = (0..=(d as i64 * r * r))
        .map(|q| profile.norm * bump_shape(q as f64 / rho2))
        .collect();
    let mut sum = 0.0;
    for_each_site(&vec![-r; d], &vec![(2 * r + 1) as usize; d], |_, s| {
        let q: i64 = s.iter().map(|c| c * c).sum();
        sum += table[q as usize];
    });
    let total = sum * spacing.powi(d as i32);
    if !(total > 0.0) {
        return Err(Error::DegenerateBump { spacing });
    }
    Ok(1.0 / total)
}

/// An averaging kernel in lattice units: weights `w(u)` on `[-H, H]^d` with
/// `Σ_u w(u) = 1 - defect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct UnitAveraging {
    pub dim: usize,
    pub half_width: usize,
    pub weights: Vec<f64>,
    /// `1 - Σ w`, computed without cancellation.
    pub defect: f64,
}

impl UnitAveraging {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            half_width: 0,
            weights: vec![1.0],
            defect: 0.0,
        }
    }

    pub fn extent(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ_u w(u) u_0²` in lattice units.
    pub fn second_moment(&self) -> f64 {
        let h = self.half_width as i64;
        let stride = self.extent().pow(self.dim as u32 - 1);
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let u = (i / stride) as i64 - h;
                w * (u * u) as f64
            })
            .sum()
    }

    /// `1 - Â(θ) = defect + Σ_u w(u) 2 sin²(θ·u/2)` and `Â(θ)`, in lattice units.
    pub fn fourier_pair(&self, theta: &[f64]) -> (f64, f64) {
        let h = self.half_width as i64;
        let mut acc = 0.0;
        let mut phase = vec![0.0; self.dim];
        for_each_site(&vec![-h; self.dim], &vec![self.extent(); self.dim], |i, u| {
            let w = self.weights[i];
            if w != 0.0 {
                for (p, (t, c)) in phase.iter_mut().zip(theta.iter().zip(u)) {
                    *p = t * *c as f64;
                }
                let s = (0.5 * phase.iter().sum::<f64>()).sin();
                acc += w * 2.0 * s * s;
            }
        });
        let om = self.defect + acc;
        (om, self.mass() - acc)
    }

    /// Weights of the convolution of two kernels.
    pub fn convolve(&self, other: &Self) -> Self {
        let d = self.dim;
        let h = self.half_width + other.half_width;
        let e = 2 * h + 1;
        let mut out = vec![0.0; e.pow(d as u32)];
        let (ea, eb) = (self.extent(), other.extent());
        let strides = |ext: usize| -> Vec<usize> {
            (0..d).map(|ax| ext.pow((d - 1 - ax) as u32)).collect()
        };
        let (sa, sb, so) = (strides(ea), strides(eb), strides(e));
        for (i, &wa) in self.weights.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            let base: usize = (0..d).map(|ax| ((i / sa[ax]) % ea) * so[ax]).sum();
            for (j, &wb) in other.weights.iter().enumerate() {
                if wb == 0.0 {
                    continue;
                }
                let off: usize = (0..d).map(|ax| ((j / sb[ax]) % eb) * so[ax]).sum();
                out[base + off] += wa * wb;
            }
        }
        Self {
            dim: d,
            half_width: h,
            weights: out,
            defect: self.defect + other.defect - self.defect * other.defect,
        }
    }
}

/// A signed axis permutation `(σv)_i = sign_i v_{perm_i}`.
#[derive(Clone, Debug)]
struct SignedPerm {
    perm: Vec<usize>,
    sign: Vec<i64>,
}

impl SignedPerm {
    fn apply(&self, v: &[i64]) -> Vec<i64> {
        self.perm
            .iter()
            .zip(&self.sign)
            .map(|(&p, &s)| s * v[p])
            .collect()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Distinct images of `c` under the hyperoctahedral group, each with one
/// group element producing it.
fn orbit(c: &[i64]) -> Vec<(Vec<i64>, SignedPerm)> {
    let d = c.len();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for perm in permutations(d) {
        for mask in 0..(1u32 << d) {
            let sign: Vec<i64> = (0..d)
                .map(|i| if mask >> i & 1 == 1 { -1 } else { 1 })
                .collect();
            let g = SignedPerm {
                perm: perm.clone(),
                sign,
            };
            let y = g.apply(c);
            if seen.insert(y.clone()) {
                out.push((y, g));
            }
        }
    }
    out
}

/// Builds the lattice-unit averaging kernel for cube side `L^{depth+1}` sites
/// and mass `μ`. With `reduce_symmetry` only one Poisson row per cubic orbit
/// of start offsets is solved; without it every offset gets its own solve.
pub(crate) fn build_unit(
    dim: usize,
    log2_scale: u32,
    depth: u32,
    mu: f64,
    reduce_symmetry: bool,
) -> Result<UnitAveraging> {
    let side = 1i64 << (log2_scale * (depth + 1));
    let j = side / 2 - 1;
    let n = (2 * j + 1) as usize;
    let rho = side as f64 / 4.0;
    let zmax = rho.ceil() as i64 - 1;
    let h = (j + 1 + zmax) as usize;
    let e = 2 * h + 1;
    let sites = e.checked_pow(dim as u32).unwrap_or(usize::MAX);
    if sites > WEIGHT_BUDGET {
        return Err(Error::ProblemTooLarge {
            sites,
            budget: WEIGHT_BUDGET,
        });
    }
    let solver = CubeSolver::new(dim, n, mu)?;

    // Bump weights ω(z) on the ball |z| < ρ; they depend on |z|² only.
    let omega_of = |q: i64| bump_shape(q as f64 / (rho * rho));
    let mut omega_total = 0.0;
    for_each_site(&vec![-zmax; dim], &vec![(2 * zmax + 1) as usize; dim], |_, z| {
        omega_total += omega_of(z.iter().map(|c| c * c).sum());
    });
    if !(omega_total > 0.0) {
        return Err(Error::DegenerateBump {
            spacing: 1.0 / side as f64,
        });
    }

    // Group start offsets y = -z (relative to the cube center) by canonical
    // representative, or keep each offset on its own.
    let mut groups: BTreeMap<Vec<i64>, Vec<SignedPerm>> = BTreeMap::new();
    let identity = SignedPerm {
        perm: (0..dim).collect(),
        sign: vec![1; dim],
    };
    for_each_site(&vec![-zmax; dim], &vec![(2 * zmax + 1) as usize; dim], |_, y| {
        let q: i64 = y.iter().map(|c| c * c).sum();
        if omega_of(q) == 0.0 {
            return;
        }
        if reduce_symmetry {
            let mut c: Vec<i64> = y.iter().map(|v| v.abs()).collect();
            c.sort_unstable_by(|a, b| b.cmp(a));
            groups.entry(c).or_default();
        } else {
            groups.insert(y.to_vec(), vec![identity.clone()]);
        }
    });
    if reduce_symmetry {
        for (c, gs) in groups.iter_mut() {
            *gs = orbit(c).into_iter().map(|(_, g)| g).collect();
        }
    }

    let strides: Vec<usize> = (0..dim).map(|ax| e.pow((dim - 1 - ax) as u32)).collect();
    let center_flat: usize = strides.iter().map(|s| s * h).sum();
    let mut weights = vec![0.0; e.pow(dim as u32)];
    let mut defect = 0.0;
    let reps: Vec<(&Vec<i64>, &Vec<SignedPerm>)> = groups.iter().collect();
    for chunk in reps.chunks(ROW_CHUNK) {
        let rows: Vec<_> = chunk
            .par_iter()
            .map(|(c, _)| {
                let start: Vec<usize> = c.iter().map(|v| (v + j) as usize).collect();
                solver.row(&start)
            })
            .collect();
        for ((c, images), row) in chunk.iter().zip(rows) {
            let q: i64 = c.iter().map(|v| v * v).sum();
            let om = omega_of(q) / omega_total;
            defect += om * images.len() as f64 * mu * row.green_sum;
            // Displacements from the start point to each boundary site.
            let mut entries: Vec<(Vec<i64>, f64)> = Vec::new();
            for ax in 0..dim {
                for (side_idx, face) in row.faces[2 * ax..2 * ax + 2].iter().enumerate() {
                    for (t, &w) in face.iter().enumerate() {
                        let w = clamp_weight(w)?;
                        if w == 0.0 {
                            continue;
                        }
                        let mut v = vec![0i64; dim];
                        let mut rest = t;
                        for other in (0..dim).rev().filter(|&o| o != ax) {
                            v[other] = (rest % n) as i64 - j - c[other];
                            rest /= n;
                        }
                        v[ax] = if side_idx == 0 { -j - 1 } else { j + 1 } - c[ax];
                        entries.push((v, om * w));
                    }
                }
            }
            for g in images.iter() {
                // flat(σv) = center + Σ_i sign_i v_{perm_i} stride_i
                let mut coef = vec![0i64; dim];
                for i in 0..dim {
                    coef[g.perm[i]] = g.sign[i] * strides[i] as i64;
                }
                for (v, w) in &entries {
                    let off: i64 = v.iter().zip(&coef).map(|(a, b)| a * b).sum();
                    weights[(center_flat as i64 + off) as usize] += w;
                }
            }
        }
    }
    Ok(UnitAveraging {
        dim,
        half_width: h,
        weights,
        defect,
    })
}

/// Which operator an [`AveragingKernel`] represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AveragingKind {
    /// `A^a_{ε_n,m}(R_m)`.
    Single { m: u32 },
    /// The composite `𝒜^a_n`.
    Composite,
}

/// A translation-invariant defective probability kernel `A(0, du)` on the
/// `ε_n` lattice, stored as lattice-unit weights `w(u) = ε^d A(0,u)`.
#[derive(Clone, Debug)]
pub struct AveragingKernel {
    spec: LatticeSpec,
    kind: AveragingKind,
    a: f64,
    unit: Arc<UnitAveraging>,
}

impl AveragingKernel {
    pub(crate) fn from_unit(
        spec: LatticeSpec,
        kind: AveragingKind,
        a: f64,
        unit: Arc<UnitAveraging>,
    ) -> Self {
        Self { spec, kind, a, unit }
    }

    pub(crate) fn unit(&self) -> &Arc<UnitAveraging> {
        &self.unit
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn kind(&self) -> AveragingKind {
        self.kind
    }

    /// Mass parameter `a`.
    pub fn mass_parameter(&self) -> f64 {
        self.a
    }

    /// Cube side `R_m = L^{-(m-1)}` of a single kernel.
    pub fn cube_side(&self) -> Option<f64> {
        match self.kind {
            AveragingKind::Single { m } => Some(self.spec.scale_pow(1 - m as i32)),
            AveragingKind::Composite => None,
        }
    }

    /// Density `A(0, u)` with respect to `dz = ε^d Σ`.
    pub fn density(&self) -> LatticeKernel {
        let scale = 1.0 / self.spec.cell_volume();
        let h = self.unit.half_width;
        let mut k = LatticeKernel::centered(self.spec, h).with_even(true);
        for (v, w) in k.values_mut().iter_mut().zip(&self.unit.weights) {
            *v = w * scale;
        }
        k
    }

    /// Density at the site `u` (integer coordinates at spacing `ε_n`).
    pub fn density_at(&self, u: &[i64]) -> f64 {
        let h = self.unit.half_width as i64;
        let e = self.unit.extent();
        let mut idx = 0usize;
        for &c in u {
            if c.abs() > h {
                return 0.0;
            }
            idx = idx * e + (c + h) as usize;
        }
        self.unit.weights[idx] / self.spec.cell_volume()
    }

    /// Half-width in sites of the stored box; the support lies inside.
    pub fn half_width_sites(&self) -> usize {
        self.unit.half_width
    }

    /// Physical sup-norm radius of the exact support.
    pub fn support_radius(&self) -> f64 {
        self.density().support_radius()
    }

    /// Total mass `∫ A(0, du)`.
    pub fn mass(&self) -> f64 {
        self.unit.mass()
    }

    /// `1 - mass`, without cancellation.
    pub fn defect(&self) -> f64 {
        self.unit.defect
    }

    /// `∫ A(0, du) u_1²`; by cubic symmetry the second-moment matrix is this
    /// times the identity.
    pub fn second_moment(&self) -> f64 {
        self.unit.second_moment() * self.spec.spacing().powi(2)
    }

    /// `Â(p) = ∫ A(0, du) e^{-ip·u}`.
    pub fn fourier(&self, p: &MomentumPoint) -> f64 {
        self.unit.fourier_pair(&p.lattice_units()).1
    }

    /// `1 - Â(p)`, accurate for small `p` and small `a`.
    pub fn one_minus_fourier(&self, p: &MomentumPoint) -> f64 {
        self.unit.fourier_pair(&p.lattice_units()).0
    }
}

/// `A^a_{ε_n,m}(R_m)` for `0 <= m <= n`, built directly on the `ε_n` lattice.
pub fn build_averaging_kernel(spec: &LatticeSpec, m: u32, a: f64) -> Result<AveragingKernel> {
    KernelCache::new().averaging(spec, m, a)
}

pub(crate) fn check_mass(a: f64) -> Result<()> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mass a = {a} must be finite and >= 0"
        )));
    }
    Ok(())
}

pub(crate) fn check_scale_index(spec: &LatticeSpec, m: u32) -> Result<()> {
    if m > spec.level() {
        return Err(Error::InvalidArgument(format!(
            "scale index m = {m} exceeds level n = {}",
            spec.level()
        )));
    }
    Ok(())
}

/// `(Af)(x) = ∫ A(x, du) f(u) = ε^d Σ_v A(0, v) f(x + v)`.
pub fn apply_averaging(kernel: &AveragingKernel, f: &LatticeKernel) -> Result<LatticeKernel> {
    if f.spec() != kernel.spec() {
        return Err(Error::InvalidArgument(
            "kernel and field live on different lattices".into(),
        ));
    }
    let unit = &kernel.unit;
    let h = unit.half_width;
    let grown = f.grow(h);
    let mut out = grown.clone();
    let d = f.dim();
    let e = unit.extent();
    let nz: Vec<(Vec<i64>, f64)> = {
        let mut v = Vec::new();
        for_each_site(&vec![-(h as i64); d], &vec![e; d], |i, s| {
            if unit.weights[i] != 0.0 {
                v.push((s.to_vec(), unit.weights[i]));
            }
        });
        v
    };
    let mut shifted = vec![0i64; d];
    let (lo, shape) = (out.lo().to_vec(), out.shape().to_vec());
    let vals = out.values_mut();
    for_each_site(&lo, &shape, |i, x| {
        let mut acc = 0.0;
        for (v, w) in &nz {
            for ax in 0..d {
                shifted[ax] = x[ax] + v[ax];
            }
            acc += w * f.get(&shifted);
        }
        vals[i] = acc;
    });
    Ok(out.with_even(false))
}

/// `𝒜^a_n = A_{ε_n,n} ∗ ⋯ ∗ A_{ε_n,1}`; the identity for `n = 0`.
pub fn composite_averaging(spec: &LatticeSpec, a: f64) -> Result<AveragingKernel> {
    KernelCache::new().composite(spec, a)
}

/// `max_u |A^a_{ε_{n-1},m-1}(R_{m-1})(0,u) - L^{-d} A^{L²a}_{ε_n,m}(R_m)(0,u/L)|`
/// relative to the largest density on the left, over `offsets` (site indices
/// at spacing `ε_{n-1}`; all sites of the support if empty).
///
/// The left side is built with the symmetry-reduced row solver and the right
/// side with one solve per cube center, so the two are independent
/// computations of the same lattice-unit kernel.
pub fn scaling_residual(spec: &LatticeSpec, m: u32, a: f64, offsets: &[Vec<i64>]) -> Result<f64> {
    check_mass(a)?;
    if m == 0 || m > spec.level() {
        return Err(Error::InvalidArgument(format!(
            "scaling relation needs 1 <= m <= n, got m = {m}, n = {}",
            spec.level()
        )));
    }
    let coarse = spec.at_level(spec.level() - 1)?;
    let (d, p) = (spec.dim(), spec.log2_scale());
    let eps_c = coarse.spacing();
    let eps_f = spec.spacing();
    let scale = spec.scale() as f64;
    let lhs_unit = build_unit(d, p, coarse.level() - (m - 1), a * eps_c * eps_c, true)?;
    let rhs_unit = build_unit(d, p, spec.level() - m, scale * scale * a * eps_f * eps_f, false)?;
    let lhs = AveragingKernel::from_unit(coarse, AveragingKind::Single { m: m - 1 }, a, Arc::new(lhs_unit));
    let rhs = AveragingKernel::from_unit(
        *spec,
        AveragingKind::Single { m },
        scale * scale * a,
        Arc::new(rhs_unit),
    );
    let l_d = scale_pow(p, -(d as i32));
    let mut worst: f64 = 0.0;
    let mut eval = |u: &[i64]| {
        // u/L at spacing ε_n has the same integer coordinates as u at ε_{n-1}.
        let diff = lhs.density_at(u) - l_d * rhs.density_at(u);
        worst = worst.max(diff.abs());
    };
    if offsets.is_empty() {
        let h = lhs.half_width_sites().max(rhs.half_width_sites()) as i64;
        for_each_site(&vec![-h; d], &vec![(2 * h + 1) as usize; d], |_, u| eval(u));
    } else {
        for u in offsets {
            eval(u);
        }
    }
    let max = lhs.density().max_abs();
    Ok(worst / max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{laplacian_apply, measure_integral, sup_difference};
    use crate::torus::Torus;
    use proptest::prelude::*;

    fn spec(d: usize, p: u32, n: u32) -> LatticeSpec {
        LatticeSpec::new(d, p, n).unwrap()
    }

    #[test]
    fn bump_is_normalized() {
        // Independent check: midpoint rule on a Cartesian grid in d = 2.
        let g = BumpProfile::new(2, 4);
        let n = 800;
        let h = 2.0 * g.radius() / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -g.radius() + (i as f64 + 0.5) * h;
                let y = -g.radius() + (j as f64 + 0.5) * h;
                acc += g.at(&[x, y]);
            }
        }
        assert!((acc * h * h - 1.0).abs() < 1e-6);
        assert_eq!(g.value(1.0), 0.0);
        assert!(g.value(0.999) > 0.0);
    }

    #[test]
    fn normalizer_properties() {
        for (d, l) in [(1, 2u64), (2, 2), (2, 4), (3, 2)] {
            let g = BumpProfile::new(d, l);
            let mut errs = Vec::new();
            for k in 0..=4 {
                let eps = (l as f64).powi(-k);
                let c = lattice_normalizer(&g, eps).unwrap();
                assert!(c.is_finite() && c > 0.0 && c < 1e3);
                errs.push((c - 1.0).abs());
            }
            // c_ε → 1 under refinement once the bump is resolved.
            assert!(errs[4] < 1e-3, "{errs:?}");
            assert!(errs[4] < 1e-2 * errs[1], "{errs:?}");
        }
    }

    #[test]
    fn massless_kernel_is_probability() {
        for (d, p, n, m) in [(1, 1, 0, 0), (2, 1, 1, 0), (2, 2, 1, 1), (3, 1, 2, 1)] {
            let k = build_averaging_kernel(&spec(d, p, n), m, 0.0).unwrap();
            assert!((k.mass() - 1.0).abs() < 1e-10);
            assert!((measure_integral(&k.density()) - 1.0).abs() < 1e-10);
            assert!(k.defect().abs() < 1e-12);
            let p0 = MomentumPoint::zero(k.spec());
            assert!((k.fourier(&p0) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn support_and_symmetry() {
        for (d, p, n, m) in [(1, 2, 1, 0), (2, 1, 2, 1), (3, 1, 1, 0)] {
            let s = spec(d, p, n);
            let k = build_averaging_kernel(&s, m, 0.7).unwrap();
            let r_m = s.scale_pow(1 - m as i32);
            assert!(k.support_radius() < 0.75 * r_m);
            assert!(k.support_radius() <= r_m + 0.25 * s.scale_pow(1 - m as i32 - 1));
            let dens = k.density();
            assert!(dens.values().iter().all(|&v| v >= 0.0));
            // Mirrored sites accumulate their weights in different orders.
            assert!(dens.cubic_symmetry_residual() <= 1e-13 * dens.max_abs());
            assert!(dens.even_residual() <= 1e-13 * dens.max_abs());
        }
    }

    #[test]
    fn symmetry_reduction_matches_full_solve() {
        for (d, p, depth, mu) in [(2, 1, 1, 0.3), (3, 1, 1, 0.0), (2, 2, 1, 0.01)] {
            let a = build_unit(d, p, depth, mu, true).unwrap();
            let b = build_unit(d, p, depth, mu, false).unwrap();
            assert_eq!(a.half_width, b.half_width);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-15);
            }
            assert!((a.defect - b.defect).abs() < 1e-15);
        }
    }

    #[test]
    fn moments() {
        let k = build_averaging_kernel(&spec(2, 1, 2), 1, 0.5).unwrap();
        let dens = k.density();
        let eps = k.spec().spacing();
        let vol = k.spec().cell_volume();
        let (mut m1, mut m2, mut m11, mut m22, mut m12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        dens.for_each(|u, v| {
            let (x, y) = (u[0] as f64 * eps, u[1] as f64 * eps);
            m1 += vol * v * x;
            m2 += vol * v * y;
            m11 += vol * v * x * x;
            m22 += vol * v * y * y;
            m12 += vol * v * x * y;
        });
        assert!(m1.abs() < 1e-10 && m2.abs() < 1e-10 && m12.abs() < 1e-10);
        assert!((m11 - m22).abs() < 1e-10);
        assert!((m11 - k.second_moment()).abs() < 1e-12);
    }

    #[test]
    fn defect_matches_mass_and_bound() {
        for a in [0.0, 0.25, 1.0, 4.0] {
            for (d, p, n, m) in [(1, 1, 2, 0), (2, 2, 1, 1), (3, 1, 1, 0)] {
                let s = spec(d, p, n);
                let k = build_averaging_kernel(&s, m, a).unwrap();
                let r = k.cube_side().unwrap();
                assert!(k.defect() >= 0.0);
                assert!(k.defect() <= a * r * r / 2.0);
                assert!((1.0 - k.mass() - k.defect()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fourier_bounds() {
        let s = spec(2, 1, 1);
        let k = build_averaging_kernel(&s, 0, 1.0).unwrap();
        let r = k.cube_side().unwrap();
        let d = 2.0;
        for i in 0..40 {
            let t = i as f64 / 40.0 * std::f64::consts::PI / s.spacing();
            let p = MomentumPoint::new(&s, vec![t, 0.3 * t]).unwrap();
            let ah = k.fourier(&p);
            assert!(ah.abs() <= k.mass() + 1e-15);
            let one_minus = k.one_minus_fourier(&p);
            assert!((one_minus - (1.0 - ah)).abs() < 1e-13);
            let norm = p.norm_sq().sqrt();
            assert!(one_minus.abs() <= d * r * norm + d * 1.0 * r * r);
        }
    }

    #[test]
    fn apply_examples() {
        let s = spec(1, 1, 1);
        let k = build_averaging_kernel(&s, 0, 0.5).unwrap();
        let c = LatticeKernel::centered_from_fn(s, 30, |_| 2.0);
        let out = apply_averaging(&k, &c).unwrap();
        assert!((out.get(&[0]) - 2.0 * k.mass()).abs() < 1e-13);
        let noise = LatticeKernel::centered_from_fn(s, 12, |x| ((x[0] * 37 % 11) as f64 - 5.0) / 5.0);
        let out = apply_averaging(&k, &noise).unwrap();
        assert!(out.max_abs() <= noise.max_abs() * (1.0 + 1e-14));
    }

    #[test]
    fn fourier_consistency_on_torus() {
        // DFT(Af) = Â DFT(f) when the torus holds Af without wrap.
        let s = spec(2, 1, 1);
        let k = build_averaging_kernel(&s, 0, 1.0).unwrap();
        let f = LatticeKernel::centered_from_fn(s, 3, |x| ((x[0] * 5 + x[1] * 3) % 7) as f64 - 3.0);
        let af = apply_averaging(&k, &f).unwrap();
        let t = Torus::new(2, 32);
        let mut lhs = t.periodize(&af);
        t.forward(&mut lhs);
        let mut rhs = t.periodize(&f);
        t.forward(&mut rhs);
        let max = lhs.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let mut worst: f64 = 0.0;
        t.for_each_frequency(|i, theta| {
            // Correlation with an even kernel is a convolution.
            let p = MomentumPoint::new(&s, theta.iter().map(|x| x / s.spacing()).collect()).unwrap();
            worst = worst.max((lhs[i] - rhs[i] * k.fourier(&p)).norm());
        });
        assert!(worst <= 1e-10 * max);
    }

    #[test]
    fn harmonic_functions_are_fixed() {
        // Exponentials e^{κ·x} with Σ(2cosh κ_i - 2) = aε² are a-harmonic.
        let s = spec(2, 1, 1);
        let a = 1.5;
        let mu = a * s.spacing().powi(2);
        let kappa0 = 0.3f64;
        let kappa1 = (1.0 + (mu - (2.0 * kappa0.cosh() - 2.0)) / 2.0).acosh();
        let k = build_averaging_kernel(&s, 0, a).unwrap();
        let f = LatticeKernel::centered_from_fn(s, 20, |x| {
            (kappa0 * x[0] as f64 + kappa1 * x[1] as f64).exp()
        });
        let resid = laplacian_apply(&f).add_scaled(-a, &f);
        assert!(resid.get(&[0, 0]).abs() < 1e-10 * f.get(&[0, 0]));
        let af = apply_averaging(&k, &f).unwrap();
        for x in [[0, 0], [2, -1], [-3, 3]] {
            assert!((af.get(&x) - f.get(&x)).abs() <= 1e-9 * f.get(&x));
        }

        // A periodized resolvent column is a-harmonic away from its poles.
        let t = Torus::new(2, 32);
        let mut g = vec![num_complex::Complex64::default(); t.len()];
        t.for_each_frequency(|i, theta| {
            g[i].re = 1.0 / (mu + crate::lattice::unit_symbol(theta));
        });
        t.inverse(&mut g);
        let col = LatticeKernel::centered_from_fn(s, 13, |x| {
            g[t.index(&[x[0] - 16, x[1]])].re / t.len() as f64
        });
        let af = apply_averaging(&k, &col).unwrap();
        for x in [[0, 0], [3, 4], [-5, 0]] {
            assert!((af.get(&x) - col.get(&x)).abs() <= 1e-9 * col.get(&x));
        }
    }

    #[test]
    fn composite_examples() {
        let s0 = spec(2, 1, 0);
        let c = composite_averaging(&s0, 1.0).unwrap();
        assert_eq!(c.density().values(), &[1.0]);
        let s1 = spec(2, 1, 1);
        let c = composite_averaging(&s1, 0.7).unwrap();
        let single = build_averaging_kernel(&s1, 1, 0.7).unwrap();
        assert!(sup_difference(&c.density(), &single.density()) < 1e-12);
        let s2 = spec(1, 1, 3);
        let c = composite_averaging(&s2, 2.0).unwrap();
        let prod: f64 = (1..=3)
            .map(|m| build_averaging_kernel(&s2, m, 2.0).unwrap().mass())
            .product();
        assert!((c.mass() - prod).abs() < 1e-12);
        assert!((1.0 - c.defect() - prod).abs() < 1e-12);
        assert!(c.support_radius() < 3.0);
    }

    #[test]
    fn scaling_examples() {
        assert!(scaling_residual(&spec(2, 1, 1), 1, 1.0, &[]).unwrap() <= 1e-9);
        assert!(scaling_residual(&spec(2, 1, 2), 1, 1.0, &[]).unwrap() <= 1e-9);
        assert!(scaling_residual(&spec(1, 2, 2), 2, 0.0, &[vec![0], vec![3]]).unwrap() <= 1e-9);
        assert!(scaling_residual(&spec(1, 2, 2), 0, 0.0, &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn translation_invariance(
            vals in prop::collection::vec(-1.0f64..1.0, 25),
            b0 in -4i64..4,
            b1 in -4i64..4,
        ) {
            let s = spec(2, 1, 1);
            let k = build_averaging_kernel(&s, 0, 0.3).unwrap();
            let mut f = LatticeKernel::centered(s, 2);
            f.values_mut().copy_from_slice(&vals);
            let shifted = LatticeKernel::from_values(
                s,
                vec![-2 + b0, -2 + b1],
                vec![5, 5],
                vals.clone(),
            ).unwrap();
            let af = apply_averaging(&k, &f).unwrap();
            let a_shift = apply_averaging(&k, &shifted).unwrap();
            let mut worst: f64 = 0.0;
            af.for_each(|x, v| {
                worst = worst.max((v - a_shift.get(&[x[0] + b0, x[1] + b1])).abs());
            });
            prop_assert!(worst == 0.0);
        }
    }
}
