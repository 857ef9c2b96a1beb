//! Gaussian fluctuation fields with finite-range covariances, their
//! multiscale synthesis, and Monte Carlo renormalization-group steps.
//!
//! Fields live on a torus of `M` sites per axis. For a kernel whose support
//! fits in the torus, the periodized kernel agrees with the original on the
//! fundamental domain, so circulant sampling reproduces the covariance exactly.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecompositionLevel, PSD_TOLERANCE};
use crate::error::{Error, Result};
use crate::lattice::LatticeKernel;
use crate::torus::Torus;

/// A real field on the torus `(Z/MZ)^d`, indexed by integer sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub dim: usize,
    pub side: usize,
    pub spacing: f64,
    pub values: Vec<f64>,
    /// Level of the covariance the field was drawn from.
    pub level: u32,
    pub seed: u64,
    /// Index of the draw within the seed's stream.
    pub index: u64,
}

impl FieldSample {
    fn flat(&self, site: &[i64]) -> usize {
        let m = self.side as i64;
        site.iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(m) as usize)
    }

    /// Value at an integer site, wrapped onto the torus.
    pub fn get(&self, site: &[i64]) -> f64 {
        self.values[self.flat(site)]
    }

    /// `(1/M^d) Σ_y ζ(y) ζ(y + x)`, the translation-averaged product at offset `x`.
    pub fn translation_average(&self, offset: &[i64]) -> f64 {
        assert_eq!(offset.len(), self.dim, "offset dimension");
        let m = self.side;
        // wrap[ax][c] = (c + offset[ax]) mod M.
        let wrap: Vec<Vec<usize>> = offset
            .iter()
            .map(|&o| (0..m as i64).map(|c| (c + o).rem_euclid(m as i64) as usize).collect())
            .collect();
        let (outer, last) = wrap.split_at(self.dim - 1);
        let last = &last[0];
        let mut acc = 0.0;
        for (r, row) in self.values.chunks_exact(m).enumerate() {
            let mut rest = r;
            let mut shifted_row = 0;
            let mut stride = 1;
            for w in outer.iter().rev() {
                shifted_row += w[rest % m] * stride;
                rest /= m;
                stride *= m;
            }
            let target = &self.values[shifted_row * m..(shifted_row + 1) * m];
            acc += row.iter().zip(last).map(|(v, &j)| v * target[j]).sum::<f64>();
        }
        acc / self.values.len() as f64
    }
}

/// Circulant sampler for a finite-range covariance `E ζ(x)ζ(y) = Γ(x - y)`.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    kernel: LatticeKernel,
    torus: Torus,
    /// `√(λ_k / M^d)` for the torus eigenvalues `λ_k ≥ 0`.
    amplitude: Vec<f64>,
    min_spectrum: f64,
    max_spectrum: f64,
    clamped: usize,
    level: u32,
    seed: u64,
}

/// Spectral sampler on a torus of `side` sites per axis.
pub fn build_sampler(kernel: &LatticeKernel, side: usize, seed: u64) -> Result<GaussianSampler> {
    let range = kernel.support_radius_sites(0.0).unwrap_or(0) as usize;
    if !side.is_power_of_two() || side <= 2 * range {
        return Err(Error::TorusTooSmall {
            side,
            required_sites: 2 * range + 1,
        });
    }
    let torus = Torus::new(kernel.dim(), side);
    let mut buf = torus.periodize(kernel);
    torus.forward(&mut buf);
    let max_spectrum = buf.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.re));
    let min_spectrum = buf.iter().fold(f64::INFINITY, |m, v| m.min(v.re));
    let floor = -PSD_TOLERANCE * max_spectrum.abs();
    if min_spectrum < floor {
        return Err(Error::NegativeSpectrumBeyondTolerance {
            value: min_spectrum,
            tolerance: floor,
        });
    }
    let norm = 1.0 / torus.len() as f64;
    let mut clamped = 0;
    let amplitude = buf
        .iter()
        .map(|v| {
            if v.re < 0.0 {
                clamped += 1;
                0.0
            } else {
                (v.re * norm).sqrt()
            }
        })
        .collect();
    if clamped > 0 {
        log::info!("clamped {clamped} slightly negative spectrum values to zero");
    }
    Ok(GaussianSampler {
        kernel: kernel.clone(),
        torus,
        amplitude,
        min_spectrum,
        max_spectrum,
        clamped,
        level: kernel.spec().level(),
        seed,
    })
}

impl GaussianSampler {
    pub fn kernel(&self) -> &LatticeKernel {
        &self.kernel
    }

    pub fn side(&self) -> usize {
        self.torus.side()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The same sampler drawing from another seed's streams.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn min_spectrum(&self) -> f64 {
        self.min_spectrum
    }

    pub fn max_spectrum(&self) -> f64 {
        self.max_spectrum
    }

    /// Eigenvalues clamped from slightly negative to zero.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// The covariance of the sampled field at an integer offset: the
    /// periodized kernel.
    pub fn covariance(&self, offset: &[i64]) -> f64 {
        let m = self.side() as i64;
        let mut total = 0.0;
        self.kernel.for_each(|s, v| {
            if s.iter().zip(offset).all(|(a, b)| (a - b).rem_euclid(m) == 0) {
                total += v;
            }
        });
        total
    }

    /// Draws `2i` and `2i + 1` of the stream: real and imaginary parts of one
    /// complex transform, which are independent with the target covariance.
    pub fn sample_pair(&self, i: u64) -> [FieldSample; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i);
        let mut buf: Vec<Complex64> = self
            .amplitude
            .iter()
            .map(|a| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(a * re, a * im)
            })
            .collect();
        self.torus.inverse(&mut buf);
        let make = |values: Vec<f64>, index| FieldSample {
            dim: self.torus.dim(),
            side: self.side(),
            spacing: self.kernel.spec().spacing(),
            values,
            level: self.level,
            seed: self.seed,
            index,
        };
        [
            make(buf.iter().map(|v| v.re).collect(), 2 * i),
            make(buf.iter().map(|v| v.im).collect(), 2 * i + 1),
        ]
    }

    /// Draw `i` of the stream.
    pub fn sample(&self, i: u64) -> FieldSample {
        let [a, b] = self.sample_pair(i / 2);
        if i % 2 == 0 {
            a
        } else {
            b
        }
    }

    /// `f` applied to draws `0..count`, computed in parallel and returned in
    /// draw order.
    pub fn map_samples<T: Send>(
        &self,
        count: usize,
        f: impl Fn(&FieldSample) -> T + Sync,
    ) -> Vec<T> {
        let pairs = count.div_ceil(2) as u64;
        let mut out: Vec<T> = (0..pairs)
            .into_par_iter()
            .flat_map_iter(|i| {
                let [a, b] = self.sample_pair(i);
                [f(&a), f(&b)]
            })
            .collect();
        out.truncate(count);
        out
    }
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// `|mean - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_error
        }
    }
}

/// Empirical covariance at an offset against the exact value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub offset: Vec<i64>,
    pub exact: f64,
    pub estimate: Estimate,
}

/// Translation-averaged covariances of `count` draws at each offset.
pub fn empirical_covariance(
    sampler: &GaussianSampler,
    offsets: &[Vec<i64>],
    count: usize,
) -> Vec<CovarianceCheck> {
    let rows = sampler.map_samples(count, |s| {
        offsets
            .iter()
            .map(|o| s.translation_average(o))
            .collect::<Vec<_>>()
    });
    offsets
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            CovarianceCheck {
                offset: o.clone(),
                exact: sampler.covariance(o),
                estimate: Estimate::from_values(&col),
            }
        })
        .collect()
}

/// Samplers for a list of levels on a common torus side.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    samplers: Vec<GaussianSampler>,
    /// `L^{-j[φ]}` for level `j`.
    prefactors: Vec<f64>,
}

/// `φ(x) = Σ_j L^{-j[φ]} ζ_j(x/L^j)` with independent `ζ_j ~ μ_{Γ_j}`.
///
/// For `x ∈ Z^d`, `x/L^j` is the site of the `L^{-j}` lattice with the same
/// integer index, so every level is sampled on the same `M`-site torus.
pub fn synthesize(
    levels: &[DecompositionLevel],
    phi_dim: f64,
    side: usize,
    seed: u64,
) -> Result<Synthesizer> {
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no levels to synthesize".into()))?;
    let spec0 = first.gamma.spec();
    let mut samplers = Vec::with_capacity(levels.len());
    let mut prefactors = Vec::with_capacity(levels.len());
    for (j, lvl) in levels.iter().enumerate() {
        let s = lvl.gamma.spec();
        if s.dim() != spec0.dim() || s.scale() != spec0.scale() || s.level() != j as u32 {
            return Err(Error::InvalidArgument(
                "levels must share d and L and run j = 0, 1, ...".into(),
            ));
        }
        samplers.push(build_sampler(&lvl.gamma, side, level_seed(seed, j))?);
        prefactors.push(s.scale_pow(j as i32).powf(-phi_dim));
    }
    Ok(Synthesizer {
        samplers,
        prefactors,
    })
}

fn level_seed(seed: u64, j: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(j as u64 + 1))
}

impl Synthesizer {
    pub fn levels(&self) -> usize {
        self.samplers.len()
    }

    /// Draw `i` of the synthesized field.
    pub fn sample(&self, i: u64) -> FieldSample {
        let mut out = self.samplers[0].sample(i);
        out.values.iter_mut().for_each(|v| *v *= self.prefactors[0]);
        for (s, c) in self.samplers.iter().zip(&self.prefactors).skip(1) {
            let z = s.sample(i);
            for (o, v) in out.values.iter_mut().zip(&z.values) {
                *o += c * v;
            }
        }
        out.level = 0;
        out
    }

    /// `Σ_j L^{-2j[φ]} Γ_j(x/L^j)` at the integer offset `x`.
    pub fn covariance(&self, offset: &[i64]) -> f64 {
        self.samplers
            .iter()
            .zip(&self.prefactors)
            .map(|(s, c)| c * c * s.covariance(offset))
            .sum()
    }

    pub fn map_samples<T: Send>(
        &self,
        count: usize,
        f: impl Fn(&FieldSample) -> T + Sync,
    ) -> Vec<T> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| f(&self.sample(i)))
            .collect()
    }
}

/// Monte Carlo estimate of a complex expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgEstimate {
    pub mean: Complex64,
    /// Standard errors of the real and imaginary parts.
    pub std_error: Complex64,
    pub samples: usize,
}

/// `z_{n+1}(φ) = ∫ dμ_{Γ_n}(ζ) z_n(ζ + φ_{L^{-1}})` with
/// `φ_{L^{-1}}(x) = L^{-[φ]} φ(x/L)`.
///
/// `φ` is a field on the `ε_{n+1}` lattice; on a common torus `x/L` has the
/// same integer index as `x`, so `φ_{L^{-1}}` is `φ` scaled by `L^{-[φ]}`.
pub fn rg_step(
    z: impl Fn(&FieldSample) -> Complex64 + Sync,
    sampler: &GaussianSampler,
    phi: &FieldSample,
    phi_dim: f64,
    n_mc: usize,
    seed: u64,
) -> Result<RgEstimate> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    if phi.side != sampler.side() || phi.dim != sampler.kernel.dim() {
        return Err(Error::InvalidArgument("field and sampler tori differ".into()));
    }
    let c = (sampler.kernel.spec().scale() as f64).powf(-phi_dim);
    let vals = sampler.with_seed(seed).map_samples(n_mc, |zeta| {
        let mut psi = zeta.clone();
        for (p, f) in psi.values.iter_mut().zip(&phi.values) {
            *p += c * f;
        }
        z(&psi)
    });
    let re = Estimate::from_values(&vals.iter().map(|v| v.re).collect::<Vec<_>>());
    let im = Estimate::from_values(&vals.iter().map(|v| v.im).collect::<Vec<_>>());
    Ok(RgEstimate {
        mean: Complex64::new(re.mean, im.mean),
        std_error: Complex64::new(re.std_error, im.std_error),
        samples: n_mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::KernelCache;
    use crate::decomposition::{decompose, fluctuation_position};
    use crate::lattice::LatticeSpec;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    proptest! {
        #[test]
        fn translation_average_matches_direct_sum(
            dim in 1usize..=3,
            side in 1usize..=6,
            raw in prop::collection::vec(-1.0f64..1.0, 216),
            offset in prop::collection::vec(-9i64..=9, 3),
        ) {
            let n = side.pow(dim as u32);
            let f = FieldSample {
                dim, side, spacing: 1.0, values: raw[..n].to_vec(), level: 0, seed: 0, index: 0,
            };
            let offset = &offset[..dim];
            let t = Torus::new(dim, side);
            let mut direct = 0.0;
            t.for_each_site(|i, y| {
                let shifted: Vec<i64> = y.iter().zip(offset).map(|(a, b)| a + b).collect();
                direct += f.values[i] * f.get(&shifted);
            });
            direct /= n as f64;
            prop_assert!((f.translation_average(offset) - direct).abs() < 1e-12);
        }
    }

    fn level(d: usize, n: u32, a: f64) -> DecompositionLevel {
        let cache = KernelCache::new();
        crate::decomposition::rescaled_fluctuation(&cache, &LatticeSpec::new(d, 1, n).unwrap(), a)
            .unwrap()
    }

    #[test]
    fn white_noise_has_flat_spectrum() {
        let s = LatticeSpec::new(2, 1, 1).unwrap();
        let delta = LatticeKernel::dirac(s);
        let sm = build_sampler(&delta, 8, 1).unwrap();
        assert_eq!(sm.min_spectrum(), sm.max_spectrum());
        assert_eq!(sm.max_spectrum(), 4.0);
        let est = empirical_covariance(&sm, &[vec![0, 0], vec![1, 0]], 2000);
        assert!(est[0].estimate.z_score(4.0) < 4.0);
        assert!(est[1].estimate.z_score(0.0) < 4.0);
    }

    #[test]
    fn guards() {
        let s = LatticeSpec::new(1, 1, 0).unwrap();
        let k = LatticeKernel::centered_from_fn(s, 5, |x| (-(x[0] as f64).abs()).exp());
        assert!(matches!(build_sampler(&k, 8, 0), Err(Error::TorusTooSmall { .. })));
        assert!(matches!(build_sampler(&k, 24, 0), Err(Error::TorusTooSmall { .. })));
        assert!(build_sampler(&k, 16, 0).is_ok());
        let bad = LatticeKernel::centered_from_fn(s, 1, |x| if x[0] == 0 { 0.0 } else { 1.0 });
        assert!(matches!(
            build_sampler(&bad, 8, 0),
            Err(Error::NegativeSpectrumBeyondTolerance { .. })
        ));
    }

    #[test]
    fn spectrum_of_a_psd_level_is_nonnegative() {
        let cache = KernelCache::new();
        let s = LatticeSpec::new(2, 1, 0).unwrap();
        let pk = fluctuation_position(&cache, &s, 1.0).unwrap();
        let sm = build_sampler(&pk.kernel, 64, 3).unwrap();
        assert!(sm.min_spectrum() >= -PSD_TOLERANCE * sm.max_spectrum());
        // Doubling the torus leaves the fundamental-domain covariance unchanged.
        let big = build_sampler(&pk.kernel, 128, 3).unwrap();
        for o in [[0, 0], [1, 2], [3, 0]] {
            assert_eq!(sm.covariance(&o), big.covariance(&o));
            assert_eq!(sm.covariance(&o), pk.kernel.get(&o));
        }
    }

    #[test]
    fn reproducible_and_independent_streams() {
        let lvl = level(2, 1, 1.0);
        let a = build_sampler(&lvl.gamma, 32, 7).unwrap();
        assert_eq!(a.sample(5), a.sample(5));
        let b = build_sampler(&lvl.gamma, 32, 8).unwrap();
        let cross = Estimate::from_values(
            &(0..2000u64)
                .map(|i| a.sample(i).get(&[0, 0]) * b.sample(i).get(&[0, 0]))
                .collect::<Vec<_>>(),
        );
        assert!(cross.z_score(0.0) < 4.0);
    }

    #[test]
    fn origin_marginal_passes_chi_squared() {
        let lvl = level(2, 1, 1.0);
        let sm = build_sampler(&lvl.gamma, 64, 11).unwrap();
        let sd = sm.covariance(&[0, 0]).sqrt();
        let vals = sm.map_samples(10_000, |s| s.get(&[0, 0]) / sd);
        let bins = 20;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut counts = vec![0f64; bins];
        for v in &vals {
            let b = ((normal.cdf(*v) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1.0;
        }
        let expect = vals.len() as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "χ² = {chi2}, p = {p}");
    }

    #[test]
    fn synthesis_matches_partial_sum() {
        let cache = KernelCache::new();
        let levels = decompose(&cache, 2, 1, 1.0, 2).unwrap();
        let syn = synthesize(&levels, 0.0, 32, 5).unwrap();
        let offsets = [[0i64, 0], [1, 0], [2, 1], [5, 5]];
        let rows = syn.map_samples(2000, |f| {
            offsets.iter().map(|o| f.translation_average(o)).collect::<Vec<_>>()
        });
        for (k, o) in offsets.iter().enumerate() {
            let est = Estimate::from_values(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
            let exact = levels[0].gamma.get(o) + levels[1].gamma.get(o);
            assert!((syn.covariance(o) - exact).abs() < 1e-15);
            assert!(est.z_score(exact) < 4.0, "{o:?}: {est:?} vs {exact}");
        }
        // One level reduces to the plain sampler.
        let one = synthesize(&levels[..1], 0.0, 32, 5).unwrap();
        let plain = build_sampler(&levels[0].gamma, 32, level_seed(5, 0)).unwrap();
        assert_eq!(one.sample(3).values, plain.sample(3).values);
    }

    #[test]
    fn rg_step_examples() {
        let lvl = level(2, 1, 1.0);
        let sm = build_sampler(&lvl.gamma, 32, 1).unwrap();
        let phi = FieldSample {
            values: (0..32 * 32).map(|i| (i as f64 * 0.1).sin()).collect(),
            ..sm.sample(0)
        };
        let one = rg_step(|_| Complex64::new(1.0, 0.0), &sm, &phi, 0.0, 50, 1).unwrap();
        assert_eq!(one.mean, Complex64::new(1.0, 0.0));

        // Characteristic functional with k = δ_0 - 2δ_{(1,0)}.
        let k = [([0i64, 0], 1.0), ([1, 0], -2.0)];
        let pair = |f: &FieldSample| k.iter().map(|(s, c)| c * f.get(s)).sum::<f64>();
        let var: f64 = k
            .iter()
            .flat_map(|(x, a)| k.iter().map(move |(y, b)| (x, a, y, b)))
            .map(|(x, a, y, b)| a * b * sm.covariance(&[x[0] - y[0], x[1] - y[1]]))
            .sum();
        let shift = pair(&phi) * 0.5f64.powf(0.3);
        let exact = Complex64::from_polar((-0.5 * var).exp(), shift);
        let est = rg_step(|f| Complex64::from_polar(1.0, pair(f)), &sm, &phi, 0.3, 20_000, 2).unwrap();
        assert!((est.mean.re - exact.re).abs() < 4.0 * est.std_error.re, "{est:?} {exact}");
        assert!((est.mean.im - exact.im).abs() < 4.0 * est.std_error.im, "{est:?} {exact}");
    }

    #[test]
    fn semigroup_consistency_for_a_quadratic() {
        // Two-level truncation C_n = Γ_n + L^{-2[φ]} Γ_{n+1}(·/L) with z_n(ψ) = ψ(0)².
        let cache = KernelCache::new();
        let levels = decompose(&cache, 2, 1, 1.0, 2).unwrap();
        let (phi_dim, side) = (0.0, 32);
        let inner = build_sampler(&levels[0].gamma, side, 0).unwrap();
        let outer = build_sampler(&levels[1].gamma, side, 22).unwrap();
        let z = |f: &FieldSample| Complex64::new(f.get(&[0, 0]).powi(2), 0.0);
        let outer_vals: Vec<f64> = (0..400u64)
            .map(|i| {
                rg_step(z, &inner, &outer.sample(i), phi_dim, 200, 1000 + i)
                    .unwrap()
                    .mean
                    .re
            })
            .collect();
        let est = Estimate::from_values(&outer_vals);
        let exact = levels[0].gamma.get(&[0, 0]) + levels[1].gamma.get(&[0, 0]);
        assert!(est.z_score(exact) < 4.0, "{est:?} vs {exact}");
    }
}
