//! Lattice geometry, finite differences and norms on `(εZ)^d`.
//!
//! Sites are stored as integer coordinates at the kernel's own spacing
//! `ε = L^{-n}`; `ε` only enters as a scale factor. Kernels are densities with
//! respect to the lattice measure `dz = ε^d Σ_z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::Torus;

/// Largest supported dimension.
pub const MAX_DIM: usize = 4;

/// Dimension `d`, scale `L = 2^p` and level `n` of the lattice `(L^{-n} Z)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSpec {
    dim: usize,
    log2_scale: u32,
    level: u32,
}

impl LatticeSpec {
    pub fn new(dim: usize, log2_scale: u32, level: u32) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidSpec(format!(
                "dimension {dim} outside 1..={MAX_DIM}"
            )));
        }
        if log2_scale == 0 {
            return Err(Error::InvalidSpec("L = 2^p needs p >= 1".into()));
        }
        if log2_scale.saturating_mul(level + 2) > 40 {
            return Err(Error::InvalidSpec(format!(
                "L^(n+2) = 2^{} overflows the integer site range",
                log2_scale * (level + 2)
            )));
        }
        Ok(Self {
            dim,
            log2_scale,
            level,
        })
    }

    /// Builds the spec from `L` directly; `L` must be a power of two `>= 2`.
    pub fn with_scale(dim: usize, scale: u64, level: u32) -> Result<Self> {
        if scale < 2 || !scale.is_power_of_two() {
            return Err(Error::InvalidSpec(format!(
                "L = {scale} is not a power of two >= 2"
            )));
        }
        Self::new(dim, scale.trailing_zeros(), level)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log2_scale(&self) -> u32 {
        self.log2_scale
    }

    /// The block scale `L`.
    pub fn scale(&self) -> u64 {
        1 << self.log2_scale
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// `1/ε = L^n`, exact.
    pub fn sites_per_unit(&self) -> u64 {
        1 << (self.log2_scale * self.level)
    }

    /// `ε = L^{-n}`, exact in binary floating point.
    pub fn spacing(&self) -> f64 {
        scale_pow(self.log2_scale, -(self.level as i32))
    }

    /// `ε^d`, the weight of one site in the lattice measure.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Same `d` and `L` at another level.
    pub fn at_level(&self, level: u32) -> Result<Self> {
        Self::new(self.dim, self.log2_scale, level)
    }

    /// `L^k` as a float, exact for the supported range.
    pub fn scale_pow(&self, k: i32) -> f64 {
        scale_pow(self.log2_scale, k)
    }
}

pub(crate) fn scale_pow(log2_scale: u32, k: i32) -> f64 {
    2f64.powi(log2_scale as i32 * k)
}

/// Calls `f(flat_index, site)` for each site of the box `lo + [0, shape)` in
/// row-major order (last axis fastest).
pub(crate) fn for_each_site(lo: &[i64], shape: &[usize], mut f: impl FnMut(usize, &[i64])) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let mut site = lo.to_vec();
    for flat in 0..total {
        f(flat, &site);
        for ax in (0..lo.len()).rev() {
            site[ax] += 1;
            if site[ax] < lo[ax] + shape[ax] as i64 {
                break;
            }
            site[ax] = lo[ax];
        }
    }
}

/// Sup-norm distance between two sites given in integer coordinates.
pub fn sup_distance_sites(x: &[i64], y: &[i64]) -> i64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).max().unwrap_or(0)
}

/// Physical sup-norm distance `|x - y|` between two sites of `spec`'s lattice.
pub fn sup_distance(spec: &LatticeSpec, x: &[i64], y: &[i64]) -> f64 {
    sup_distance_sites(x, y) as f64 * spec.spacing()
}

/// A finitely supported function on `(εZ)^d`, stored densely on a box.
///
/// Values outside the box are zero. When the kernel represents a measure the
/// values are densities, so `∫ f = ε^d Σ f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeKernel {
    spec: LatticeSpec,
    lo: Vec<i64>,
    shape: Vec<usize>,
    values: Vec<f64>,
    even: bool,
}

impl LatticeKernel {
    /// The zero kernel on the box with lower corner `lo` and extent `shape`.
    pub fn zeros(spec: LatticeSpec, lo: Vec<i64>, shape: Vec<usize>) -> Self {
        assert_eq!(lo.len(), spec.dim(), "box corner has wrong dimension");
        assert_eq!(shape.len(), spec.dim(), "box shape has wrong dimension");
        let len = shape.iter().product();
        Self {
            spec,
            lo,
            shape,
            values: vec![0.0; len],
            even: false,
        }
    }

    /// The zero kernel on the centered box `[-half_width, half_width]^d`.
    pub fn centered(spec: LatticeSpec, half_width: usize) -> Self {
        let d = spec.dim();
        Self::zeros(
            spec,
            vec![-(half_width as i64); d],
            vec![2 * half_width + 1; d],
        )
    }

    pub fn from_fn(
        spec: LatticeSpec,
        lo: Vec<i64>,
        shape: Vec<usize>,
        mut f: impl FnMut(&[i64]) -> f64,
    ) -> Self {
        let mut k = Self::zeros(spec, lo, shape);
        let (lo, shape) = (k.lo.clone(), k.shape.clone());
        for_each_site(&lo, &shape, |i, s| k.values[i] = f(s));
        k
    }

    pub fn centered_from_fn(
        spec: LatticeSpec,
        half_width: usize,
        f: impl FnMut(&[i64]) -> f64,
    ) -> Self {
        let d = spec.dim();
        Self::from_fn(
            spec,
            vec![-(half_width as i64); d],
            vec![2 * half_width + 1; d],
            f,
        )
    }

    pub fn from_values(
        spec: LatticeSpec,
        lo: Vec<i64>,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if lo.len() != spec.dim() || shape.len() != spec.dim() {
            return Err(Error::InvalidArgument("box dimension mismatch".into()));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a box of {} sites",
                values.len(),
                shape.iter().product::<usize>()
            )));
        }
        Ok(Self {
            spec,
            lo,
            shape,
            values,
            even: false,
        })
    }

    /// The unit point mass at the origin as a density: value `ε^{-d}` at 0.
    pub fn dirac(spec: LatticeSpec) -> Self {
        let mut k = Self::centered(spec, 0);
        k.values[0] = 1.0 / spec.cell_volume();
        k.even = true;
        k
    }

    /// Value 1 at `site`, 0 elsewhere.
    pub fn indicator(spec: LatticeSpec, site: &[i64]) -> Self {
        let mut k = Self::zeros(spec, site.to_vec(), vec![1; spec.dim()]);
        k.values[0] = 1.0;
        k
    }

    /// Marks the kernel as even, `K(x) = K(-x)`. The caller vouches for it;
    /// see [`LatticeKernel::even_residual`].
    pub fn with_even(mut self, even: bool) -> Self {
        self.even = even;
        self
    }

    pub fn is_even(&self) -> bool {
        self.even
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Lower corner of the storage box.
    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    /// Upper corner of the storage box, inclusive.
    pub fn hi(&self) -> Vec<i64> {
        self.lo
            .iter()
            .zip(&self.shape)
            .map(|(l, s)| l + *s as i64 - 1)
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Values in row-major order over the storage box.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, site: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for ax in 0..self.dim() {
            let off = site[ax] - self.lo[ax];
            if off < 0 || off >= self.shape[ax] as i64 {
                return None;
            }
            idx = idx * self.shape[ax] + off as usize;
        }
        Some(idx)
    }

    pub fn site_of(&self, mut index: usize) -> Vec<i64> {
        let mut site = vec![0; self.dim()];
        for ax in (0..self.dim()).rev() {
            site[ax] = self.lo[ax] + (index % self.shape[ax]) as i64;
            index /= self.shape[ax];
        }
        site
    }

    /// Value at `site`, zero outside the storage box.
    pub fn get(&self, site: &[i64]) -> f64 {
        self.index_of(site).map_or(0.0, |i| self.values[i])
    }

    /// Sets the value at `site`.
    ///
    /// # Panics
    ///
    /// Panics if `site` lies outside the storage box.
    pub fn set(&mut self, site: &[i64], value: f64) {
        let i = self
            .index_of(site)
            .unwrap_or_else(|| panic!("site {site:?} outside kernel box"));
        self.values[i] = value;
    }

    /// Calls `f(site, value)` for every stored site.
    pub fn for_each(&self, mut f: impl FnMut(&[i64], f64)) {
        for_each_site(&self.lo, &self.shape, |i, s| f(s, self.values[i]));
    }

    /// Copy of the kernel on another box; values outside the new box are dropped.
    pub fn embed(&self, lo: Vec<i64>, shape: Vec<usize>) -> Self {
        let mut out = Self::zeros(self.spec, lo, shape);
        out.even = self.even;
        self.for_each(|s, v| {
            if let Some(i) = out.index_of(s) {
                out.values[i] = v;
            }
        });
        out
    }

    /// Copy on the storage box enlarged by `by` sites on every side.
    pub fn grow(&self, by: usize) -> Self {
        let lo = self.lo.iter().map(|l| l - by as i64).collect();
        let shape = self.shape.iter().map(|s| s + 2 * by).collect();
        self.embed(lo, shape)
    }

    /// Smallest box containing both kernels' boxes.
    pub fn union_box(&self, other: &Self) -> (Vec<i64>, Vec<usize>) {
        let (ha, hb) = (self.hi(), other.hi());
        let lo: Vec<i64> = (0..self.dim())
            .map(|ax| self.lo[ax].min(other.lo[ax]))
            .collect();
        let shape = (0..self.dim())
            .map(|ax| (ha[ax].max(hb[ax]) - lo[ax] + 1) as usize)
            .collect();
        (lo, shape)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self + c * other` on the union box.
    pub fn add_scaled(&self, c: f64, other: &Self) -> Self {
        let (lo, shape) = self.union_box(other);
        let mut out = self.embed(lo, shape);
        out.even = self.even && other.even;
        other.for_each(|s, v| {
            let i = out.index_of(s).expect("union box contains both");
            out.values[i] += c * v;
        });
        out
    }

    /// Pointwise product on the intersection of the boxes.
    pub fn pointwise_product(&self, other: &Self) -> Self {
        let (lo, shape) = self.union_box(other);
        let mut out = Self::zeros(self.spec, lo, shape);
        let (lo, shape) = (out.lo.clone(), out.shape.clone());
        for_each_site(&lo, &shape, |i, s| {
            out.values[i] = self.get(s) * other.get(s);
        });
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest sup-norm of a site, in sites, whose value exceeds `threshold`
    /// in absolute value; `None` if there is none.
    pub fn support_radius_sites(&self, threshold: f64) -> Option<i64> {
        let mut r = None;
        self.for_each(|s, v| {
            if v.abs() > threshold {
                let n = s.iter().map(|c| c.abs()).max().unwrap_or(0);
                r = Some(r.map_or(n, |m: i64| m.max(n)));
            }
        });
        r
    }

    /// Physical radius of the exact support (`0` for the zero kernel).
    pub fn support_radius(&self) -> f64 {
        self.support_radius_sites(0.0).unwrap_or(0) as f64 * self.spec.spacing()
    }

    /// `max |K(x) - K(-x)|` over stored sites.
    pub fn even_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        let mut neg = vec![0; self.dim()];
        self.for_each(|s, v| {
            for (n, c) in neg.iter_mut().zip(s) {
                *n = -c;
            }
            r = r.max((v - self.get(&neg)).abs());
        });
        r
    }

    /// Largest deviation under the generators of the cubic symmetry group:
    /// reflection of axis 0, transposition of axes 0 and 1, and the cyclic
    /// shift of axes.
    pub fn cubic_symmetry_residual(&self) -> f64 {
        let d = self.dim();
        let mut r: f64 = 0.0;
        let mut t = vec![0; d];
        self.for_each(|s, v| {
            t.copy_from_slice(s);
            t[0] = -t[0];
            r = r.max((v - self.get(&t)).abs());
            if d > 1 {
                t.copy_from_slice(s);
                t.swap(0, 1);
                r = r.max((v - self.get(&t)).abs());
                for ax in 0..d {
                    t[ax] = s[(ax + 1) % d];
                }
                r = r.max((v - self.get(&t)).abs());
            }
        });
        r
    }
}

/// `∫ f dz = ε^d Σ_x f(x)`.
pub fn measure_integral(f: &LatticeKernel) -> f64 {
    f.spec().cell_volume() * f.values().iter().sum::<f64>()
}

/// `sup_x |f(x) - g(x)|` over the union of the supports.
pub fn sup_difference(f: &LatticeKernel, g: &LatticeKernel) -> f64 {
    f.add_scaled(-1.0, g).max_abs()
}

/// A signed unit lattice direction `±e_axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub axis: usize,
    pub forward: bool,
}

impl Direction {
    pub fn forward(axis: usize) -> Self {
        Self {
            axis,
            forward: true,
        }
    }

    pub fn backward(axis: usize) -> Self {
        Self {
            axis,
            forward: false,
        }
    }

    pub fn reversed(self) -> Self {
        Self {
            axis: self.axis,
            forward: !self.forward,
        }
    }

    pub fn step(self) -> i64 {
        if self.forward {
            1
        } else {
            -1
        }
    }

    /// The `2d` directions `+e_0, -e_0, +e_1, ...`.
    pub fn all(dim: usize) -> Vec<Direction> {
        (0..dim)
            .flat_map(|ax| [Direction::forward(ax), Direction::backward(ax)])
            .collect()
    }
}

/// `(∇_e f)(x) = (f(x + εe) - f(x)) / ε`, with `f` extended by zero.
/// The result lives on the box grown by one site.
pub fn lattice_derivative(f: &LatticeKernel, e: Direction) -> LatticeKernel {
    assert!(e.axis < f.dim(), "direction axis out of range");
    let eps = f.spec().spacing();
    let mut out = f.grow(1);
    let src = out.values.clone();
    let stride: usize = out.shape[e.axis + 1..].iter().product();
    let extent = out.shape[e.axis];
    for (i, v) in out.values.iter_mut().enumerate() {
        let c = (i / stride) % extent;
        let nb = if e.forward {
            (c + 1 < extent).then(|| src[i + stride])
        } else {
            (c > 0).then(|| src[i - stride])
        };
        *v = (nb.unwrap_or(0.0) - src[i]) / eps;
    }
    out.even = false;
    out
}

/// `(Δ_ε f)(x) = ε^{-2} Σ_{±e} (f(x ± εe) - f(x))`, on the box grown by one.
pub fn laplacian_apply(f: &LatticeKernel) -> LatticeKernel {
    let eps2 = f.spec().spacing().powi(2);
    let mut out = f.grow(1);
    let src = out.values.clone();
    let d = f.dim();
    for (i, v) in out.values.iter_mut().enumerate() {
        let mut acc = -2.0 * d as f64 * src[i];
        let mut stride = 1;
        for ax in (0..d).rev() {
            let extent = out.shape[ax];
            let c = (i / stride) % extent;
            if c + 1 < extent {
                acc += src[i + stride];
            }
            if c > 0 {
                acc += src[i - stride];
            }
            stride *= extent;
        }
        *v = acc / eps2;
    }
    out
}

/// A momentum in the Brillouin zone `B_ε = [-π/ε, π/ε]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumPoint {
    components: Vec<f64>,
    spacing: f64,
}

impl MomentumPoint {
    pub fn new(spec: &LatticeSpec, components: Vec<f64>) -> Result<Self> {
        Self::with_spacing(spec.spacing(), components, spec.dim())
    }

    pub(crate) fn with_spacing(spacing: f64, components: Vec<f64>, dim: usize) -> Result<Self> {
        if components.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "momentum has {} components in dimension {dim}",
                components.len()
            )));
        }
        let bound = std::f64::consts::PI / spacing;
        for &c in &components {
            if !c.is_finite() || c.abs() > bound * (1.0 + 1e-12) {
                return Err(Error::OutsideBrillouinZone { value: c, bound });
            }
        }
        Ok(Self {
            components,
            spacing,
        })
    }

    /// The origin of the zone.
    pub fn zero(spec: &LatticeSpec) -> Self {
        Self {
            components: vec![0.0; spec.dim()],
            spacing: spec.spacing(),
        }
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|&c| c == 0.0)
    }

    /// Euclidean norm squared.
    pub fn norm_sq(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum()
    }

    /// `εp`, the momentum in lattice units.
    pub fn lattice_units(&self) -> Vec<f64> {
        self.components.iter().map(|c| c * self.spacing).collect()
    }
}

/// `Δ̂_ε(p) = 2ε^{-2} Σ_μ (cos(εp_μ) - 1)`, evaluated as `-4ε^{-2} Σ sin²(εp_μ/2)`
/// so that it keeps full relative accuracy near `p = 0`.
pub fn dispersion(p: &MomentumPoint) -> f64 {
    -unit_symbol(&p.lattice_units()) / p.spacing().powi(2)
}

/// `-Δ̂_1(θ) = 4 Σ sin²(θ_μ/2)` in lattice units.
pub(crate) fn unit_symbol(theta: &[f64]) -> f64 {
    theta.iter().map(|t| 4.0 * (0.5 * t).sin().powi(2)).sum()
}

/// Sites over which a norm is taken.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Region {
    /// All of `(εZ)^d`.
    Everywhere,
    /// The box `lo ..= hi` in site coordinates.
    Box { lo: Vec<i64>, hi: Vec<i64> },
}

impl Region {
    fn contains(&self, site: &[i64]) -> bool {
        match self {
            Region::Everywhere => true,
            Region::Box { lo, hi } => site
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(s, (l, h))| l <= s && s <= h),
        }
    }
}

fn region_integral_sq(f: &LatticeKernel, region: &Region) -> f64 {
    let mut acc = 0.0;
    f.for_each(|s, v| {
        if region.contains(s) {
            acc += v * v;
        }
    });
    acc * f.spec().cell_volume()
}

/// `‖f‖_{H_k(X)}` where
/// `‖f‖²_{H_k(X)} = Σ_{j≤k} 2^{-j} Σ_{e_1..e_j} ∫_X |∇_{e_1}⋯∇_{e_j} f|²`,
/// the inner sum running over ordered sequences of signed unit directions.
///
/// Derivatives commute, so each multiset of directions is evaluated once and
/// weighted by its number of orderings.
pub fn sobolev_norm(f: &LatticeKernel, k: usize, region: &Region) -> f64 {
    let dirs = Direction::all(f.dim());
    let mut total = region_integral_sq(f, region);
    let mut factorial = vec![1.0f64; k + 1];
    for j in 1..=k {
        factorial[j] = factorial[j - 1] * j as f64;
    }
    // Depth-first over non-decreasing direction indices, carrying the
    // derivative of the current prefix and the multiplicity counts.
    fn walk(
        g: &LatticeKernel,
        start: usize,
        depth: usize,
        k: usize,
        counts: &mut Vec<usize>,
        dirs: &[Direction],
        factorial: &[f64],
        region: &Region,
        total: &mut f64,
    ) {
        for idx in start..dirs.len() {
            let h = lattice_derivative(g, dirs[idx]);
            counts[idx] += 1;
            let j = depth + 1;
            let orderings =
                factorial[j] / counts.iter().map(|&c| factorial[c]).product::<f64>();
            *total += 0.5f64.powi(j as i32) * orderings * region_integral_sq(&h, region);
            if j < k {
                walk(&h, idx, j, k, counts, dirs, factorial, region, total);
            }
            counts[idx] -= 1;
        }
    }
    if k > 0 {
        let mut counts = vec![0; dirs.len()];
        walk(
            f,
            0,
            0,
            k,
            &mut counts,
            &dirs,
            &factorial,
            region,
            &mut total,
        );
    }
    total.sqrt()
}

/// `‖f‖_{H_k}` over all of `(εZ)^d` from the Fourier side,
/// `‖f‖² = ∫_{B_ε} |f̂(p)|² Σ_{j≤k} (-Δ̂(p))^j dp/(2π)^d`, evaluated exactly on
/// a torus large enough to hold `f` and its derivatives.
pub fn sobolev_norm_spectral(f: &LatticeKernel, k: usize) -> f64 {
    let d = f.dim();
    let extent = f.shape().iter().copied().max().unwrap_or(1);
    let side = (extent + 2 * k + 2).next_power_of_two().max(8);
    let torus = Torus::new(d, side);
    let mut buf = torus.periodize(f);
    torus.forward(&mut buf);
    let eps = f.spec().spacing();
    let mut acc = 0.0;
    let mut theta = vec![0.0; d];
    torus.for_each_frequency(|i, t| {
        theta.copy_from_slice(t);
        let lam = unit_symbol(&theta) / (eps * eps);
        let mut weight = 1.0;
        let mut pow = 1.0;
        for _ in 0..k {
            pow *= lam;
            weight += pow;
        }
        acc += buf[i].norm_sqr() * weight;
    });
    // f̂ = ε^d DFT(f) and ∫ dp/(2π)^d becomes (Mε)^{-d} Σ over the grid.
    (acc * f.spec().cell_volume() / (side as f64).powi(d as i32)).sqrt()
}

/// The two sides of the discrete energy identity
/// `a∫φh² + ½ Σ_{±e} ∫ φ (∇_e h)² = ∫ φ h g + ½ ∫ (Δφ) h²` with `g = (a - Δ)h`.
pub fn green_identity_sides(h: &LatticeKernel, phi: &LatticeKernel, a: f64) -> (f64, f64) {
    let (lo, shape) = h.union_box(phi);
    let h = h.embed(lo.clone(), shape.clone()).grow(2);
    let phi = phi.embed(lo, shape).grow(2);
    let lap_h = laplacian_apply(&h);
    let lap_phi = laplacian_apply(&phi);
    let grads: Vec<LatticeKernel> = Direction::all(h.dim())
        .into_iter()
        .map(|e| lattice_derivative(&h, e))
        .collect();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    h.for_each(|s, hv| {
        let pv = phi.get(s);
        let g = a * hv - lap_h.get(s);
        let grad_sq: f64 = grads.iter().map(|k| k.get(s).powi(2)).sum();
        lhs += a * pv * hv * hv + 0.5 * pv * grad_sq;
        rhs += pv * hv * g + 0.5 * lap_phi.get(s) * hv * hv;
    });
    let vol = h.spec().cell_volume();
    (lhs * vol, rhs * vol)
}

/// `|LHS - RHS|` of [`green_identity_sides`].
pub fn green_identity_residual(h: &LatticeKernel, phi: &LatticeKernel, a: f64) -> f64 {
    let (l, r) = green_identity_sides(h, phi, a);
    (l - r).abs()
}

/// Both sides of the Poincaré inequality `∫_I u² ≤ C Σ_e ∫_I |∇_e u|²` on the
/// unit cube `I = [0,1]^d ∩ (εZ)^d` with `C = d`, for `u` vanishing on `∂I`.
/// Returns `(lhs, rhs)`.
pub fn poincare_residual(u: &LatticeKernel) -> Result<(f64, f64)> {
    let n = u.spec().sites_per_unit() as i64;
    let d = u.dim();
    let mut bad = false;
    u.for_each(|s, v| {
        let inside = s.iter().all(|&c| c > 0 && c < n);
        if !inside && v != 0.0 {
            bad = true;
        }
    });
    if bad {
        return Err(Error::NonZeroBoundary);
    }
    let cube = Region::Box {
        lo: vec![0; d],
        hi: vec![n; d],
    };
    let lhs = region_integral_sq(u, &cube);
    let grad: f64 = (0..d)
        .map(|ax| region_integral_sq(&lattice_derivative(u, Direction::forward(ax)), &cube))
        .sum();
    Ok((lhs, d as f64 * grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(d: usize, p: u32, n: u32) -> LatticeSpec {
        LatticeSpec::new(d, p, n).unwrap()
    }

    fn random_kernel(spec: LatticeSpec, half: usize, vals: &[f64]) -> LatticeKernel {
        let mut k = LatticeKernel::centered(spec, half);
        for (v, x) in k.values_mut().iter_mut().zip(vals.iter().cycle()) {
            *v = *x;
        }
        k
    }

    fn inner(f: &LatticeKernel, g: &LatticeKernel) -> f64 {
        measure_integral(&f.pointwise_product(g))
    }

    #[test]
    fn spec_validation() {
        assert!(LatticeSpec::new(0, 1, 0).is_err());
        assert!(LatticeSpec::new(5, 1, 0).is_err());
        assert!(LatticeSpec::new(2, 0, 0).is_err());
        assert!(LatticeSpec::with_scale(2, 3, 0).is_err());
        let s = LatticeSpec::with_scale(3, 4, 2).unwrap();
        assert_eq!(s.scale(), 4);
        assert_eq!(s.sites_per_unit(), 16);
        assert_eq!(s.spacing() * s.sites_per_unit() as f64, 1.0);
    }

    #[test]
    fn integral_examples() {
        let one = LatticeKernel::indicator(spec(1, 1, 0), &[3]);
        assert_eq!(measure_integral(&one), 1.0);
        let half = LatticeKernel::indicator(spec(2, 1, 1), &[0, 0]);
        assert_eq!(measure_integral(&half), 0.25);
        assert_eq!(measure_integral(&LatticeKernel::dirac(spec(3, 2, 2))), 1.0);
    }

    #[test]
    fn sup_distance_examples() {
        let s = spec(2, 1, 0);
        assert_eq!(sup_distance(&s, &[0, 0], &[3, 1]), 3.0);
        assert_eq!(sup_distance(&s, &[4, -1], &[4, -1]), 0.0);
        assert_eq!(sup_distance_sites(&[1, -2, 0], &[0, 0, 0]), 2);
        assert_eq!(sup_distance(&spec(2, 1, 1), &[0, 0], &[3, 1]), 1.5);
    }

    #[test]
    fn derivative_examples() {
        let s = spec(1, 1, 0);
        let delta = LatticeKernel::indicator(s, &[0]);
        let f = lattice_derivative(&delta, Direction::forward(0));
        assert_eq!(f.get(&[-1]), 1.0);
        assert_eq!(f.get(&[0]), -1.0);
        assert_eq!(f.get(&[1]), 0.0);

        // A constant on a box differentiates to zero away from the box edge.
        let c = LatticeKernel::centered_from_fn(spec(2, 1, 1), 4, |_| 2.5);
        let g = lattice_derivative(&c, Direction::backward(1));
        for x in -3..=3 {
            for y in -3..=4 {
                assert_eq!(g.get(&[x, y]), 0.0);
            }
        }
    }

    #[test]
    fn laplacian_examples() {
        let delta = LatticeKernel::indicator(spec(1, 1, 0), &[0]);
        let l = laplacian_apply(&delta);
        assert_eq!(l.get(&[0]), -2.0);
        assert_eq!(l.get(&[1]), 1.0);
        assert_eq!(l.get(&[-1]), 1.0);

        let c = LatticeKernel::centered_from_fn(spec(3, 1, 0), 3, |_| 1.0);
        let l = laplacian_apply(&c);
        assert_eq!(l.get(&[0, 0, 0]), 0.0);
        assert_eq!(l.get(&[2, -2, 1]), 0.0);
    }

    #[test]
    fn dispersion_examples() {
        let s1 = spec(1, 1, 0);
        assert_eq!(dispersion(&MomentumPoint::zero(&spec(3, 1, 2))), 0.0);
        let p = MomentumPoint::new(&s1, vec![std::f64::consts::PI]).unwrap();
        assert!((dispersion(&p) + 4.0).abs() < 1e-14);
        assert!(MomentumPoint::new(&s1, vec![3.2]).is_err());
        // ε = 1/2 doubles the zone.
        assert!(MomentumPoint::new(&spec(1, 1, 1), vec![6.0]).is_ok());
    }

    #[test]
    fn sobolev_hand_oracle() {
        // δ_0 at ε = 1 in d = 1: the k = 0 part is 1 and each of ∇_± δ has two
        // unit entries, so ‖δ‖²_{H_1} = 1 + ½(2 + 2) = 3.
        let delta = LatticeKernel::indicator(spec(1, 1, 0), &[0]);
        let n = sobolev_norm(&delta, 1, &Region::Everywhere);
        assert!((n - 3f64.sqrt()).abs() < 1e-14);
        // k = 2 adds ¼ Σ over the four ordered pairs of ‖∇∇δ‖²: (++), (--) give
        // 1+4+1 = 6 each, (+-), (-+) give the Laplacian pattern, also 6.
        let n2 = sobolev_norm(&delta, 2, &Region::Everywhere);
        assert!((n2 * n2 - 9.0).abs() < 1e-12);
        assert!((sobolev_norm_spectral(&delta, 2) - n2).abs() < 1e-12);
    }

    #[test]
    fn sobolev_k0_is_l2_on_region() {
        let s = spec(2, 1, 1);
        let f = LatticeKernel::centered_from_fn(s, 2, |x| (x[0] + 2 * x[1]) as f64);
        let region = Region::Box {
            lo: vec![0, 0],
            hi: vec![1, 1],
        };
        let expect = ((0.0 + 4.0 + 1.0 + 9.0) * 0.25f64).sqrt();
        assert!((sobolev_norm(&f, 0, &region) - expect).abs() < 1e-14);
    }

    #[test]
    fn green_identity_examples() {
        let s = spec(2, 1, 0);
        let zero = LatticeKernel::centered(s, 3);
        let phi = LatticeKernel::centered_from_fn(s, 3, |x| {
            (9 - x[0] * x[0]) as f64 * (9 - x[1] * x[1]) as f64
        });
        assert_eq!(green_identity_residual(&zero, &phi, 1.0), 0.0);
        let h = LatticeKernel::centered_from_fn(s, 8, |_| 1.5);
        assert!(green_identity_residual(&h, &phi, 0.0) < 1e-12);
    }

    #[test]
    fn poincare_examples() {
        let s = spec(1, 4, 1); // ε = 1/16
        assert_eq!(
            poincare_residual(&LatticeKernel::centered(s, 2)).unwrap(),
            (0.0, 0.0)
        );
        let bump = LatticeKernel::from_fn(s, vec![0], vec![17], |x| {
            if x[0] % 16 == 0 {
                0.0
            } else {
                (std::f64::consts::PI * x[0] as f64 / 16.0).sin()
            }
        });
        let (l, r) = poincare_residual(&bump).unwrap();
        assert!(l > 0.0 && l <= r);
        let bad = LatticeKernel::indicator(s, &[16]);
        assert!(matches!(
            poincare_residual(&bad),
            Err(Error::NonZeroBoundary)
        ));
    }

    proptest! {
        #[test]
        fn adjointness(
            vf in prop::collection::vec(-1.0f64..1.0, 25),
            vg in prop::collection::vec(-1.0f64..1.0, 49),
            axis in 0usize..2,
            forward: bool,
        ) {
            let s = spec(2, 1, 1);
            let f = random_kernel(s, 2, &vf);
            let g = random_kernel(s, 3, &vg);
            let e = Direction { axis, forward };
            let lhs = inner(&lattice_derivative(&f, e), &g);
            let rhs = inner(&f, &lattice_derivative(&g, e.reversed()));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn laplacian_is_divergence(vf in prop::collection::vec(-1.0f64..1.0, 27)) {
            let s = spec(3, 1, 0);
            let f = random_kernel(s, 1, &vf);
            let lap = laplacian_apply(&f);
            // -Δ = ½ Σ_{±e} ∇_e^* ∇_e with ∇_e^* = ∇_{-e}.
            let mut acc = LatticeKernel::centered(s, 3);
            for e in Direction::all(3) {
                let dd = lattice_derivative(&lattice_derivative(&f, e), e.reversed());
                acc = acc.add_scaled(0.5, &dd);
            }
            let diff = sup_difference(&lap.scaled(-1.0), &acc);
            prop_assert!(diff < 1e-12);
        }

        #[test]
        fn leibniz_rule(
            vf in prop::collection::vec(-1.0f64..1.0, 9),
            vg in prop::collection::vec(-1.0f64..1.0, 25),
            axis in 0usize..2,
            forward: bool,
        ) {
            let s = spec(2, 1, 2);
            let eps = s.spacing();
            let f = random_kernel(s, 1, &vf);
            let g = random_kernel(s, 2, &vg);
            let e = Direction { axis, forward };
            let lhs = lattice_derivative(&f.pointwise_product(&g), e);
            let (df, dg) = (lattice_derivative(&f, e), lattice_derivative(&g, e));
            let rhs = df.pointwise_product(&g)
                .add_scaled(1.0, &f.pointwise_product(&dg))
                .add_scaled(eps, &df.pointwise_product(&dg));
            prop_assert!(sup_difference(&lhs, &rhs) < 1e-10);
        }

        #[test]
        fn quadratic_form(vf in prop::collection::vec(-1.0f64..1.0, 49)) {
            let s = spec(2, 1, 0);
            let f = random_kernel(s, 3, &vf);
            let lhs = -inner(&f, &laplacian_apply(&f));
            let rhs: f64 = Direction::all(2)
                .into_iter()
                .map(|e| 0.5 * inner(&lattice_derivative(&f, e), &lattice_derivative(&f, e)))
                .sum();
            prop_assert!((lhs - rhs).abs() < 1e-11 * (1.0 + lhs.abs()));
        }

        #[test]
        fn sobolev_routes_agree_and_grow(vf in prop::collection::vec(-1.0f64..1.0, 25), k in 0usize..4) {
            let f = random_kernel(spec(2, 1, 1), 2, &vf);
            let pos = sobolev_norm(&f, k, &Region::Everywhere);
            let spec_route = sobolev_norm_spectral(&f, k);
            prop_assert!((pos - spec_route).abs() <= 1e-10 * pos.max(1e-300));
            prop_assert!(sobolev_norm(&f, k + 1, &Region::Everywhere) >= pos);
        }

        #[test]
        fn green_identity_random(
            vh in prop::collection::vec(-1.0f64..1.0, 81),
            vp in prop::collection::vec(0.0f64..1.0, 81),
            a in 0.0f64..4.0,
        ) {
            let s = spec(2, 1, 1);
            let h = random_kernel(s, 4, &vh);
            let phi = random_kernel(s, 4, &vp);
            let (l, r) = green_identity_sides(&h, &phi, a);
            prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1e-300));
        }

        #[test]
        fn poincare_random(vu in prop::collection::vec(-1.0f64..1.0, 49)) {
            let s = spec(2, 3, 1); // ε = 1/8
            let mut u = LatticeKernel::zeros(s, vec![0, 0], vec![9, 9]);
            for (i, v) in vu.iter().enumerate() {
                u.set(&[1 + (i / 7) as i64, 1 + (i % 7) as i64], *v);
            }
            let (l, r) = poincare_residual(&u).unwrap();
            prop_assert!(l <= r);
        }

        #[test]
        fn dispersion_sandwich(t in prop::collection::vec(-1.0f64..1.0, 3), n in 0u32..3) {
            let s = spec(3, 1, n);
            let bound = std::f64::consts::PI / s.spacing();
            let p = MomentumPoint::new(&s, t.iter().map(|x| x * bound).collect()).unwrap();
            let lam = -dispersion(&p);
            let c = 2.0 / std::f64::consts::PI.powi(2);
            prop_assert!(lam <= p.norm_sq() * (1.0 + 1e-12));
            prop_assert!(lam >= 2.0 * c * p.norm_sq() * (1.0 - 1e-12));
        }
    }
}
