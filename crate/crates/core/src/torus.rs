//! Multidimensional FFTs on the discrete torus `(Z/MZ)^d`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::lattice::{for_each_site, LatticeKernel};

/// Lines gathered per batched FFT call; bounds the scratch buffer.
const LINE_BATCH: usize = 4096;

/// A `d`-dimensional torus with `M` sites per axis, stored row-major.
#[derive(Clone)]
pub struct Torus {
    dim: usize,
    side: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Torus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Torus")
            .field("dim", &self.dim)
            .field("side", &self.side)
            .finish()
    }
}

impl Torus {
    pub fn new(dim: usize, side: usize) -> Self {
        assert!(side >= 1 && dim >= 1);
        let mut planner = FftPlanner::new();
        Self {
            dim,
            side,
            forward: planner.plan_fft_forward(side),
            inverse: planner.plan_fft_inverse(side),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of sites, `M^d`.
    pub fn len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unnormalized forward transform `X_k = Σ_j x_j e^{-2πi j·k/M}`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
    }

    /// Unnormalized inverse transform `x_j = Σ_k X_k e^{2πi j·k/M}`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "buffer does not match torus");
        let m = self.side;
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut lines = Vec::new();
        for axis in 0..self.dim {
            let stride = m.pow((self.dim - 1 - axis) as u32);
            if stride == 1 {
                fft.process_with_scratch(data, &mut scratch);
                continue;
            }
            let block = stride * m;
            for start in (0..data.len()).step_by(block) {
                let blk = &mut data[start..start + block];
                let mut r0 = 0;
                while r0 < stride {
                    let nl = LINE_BATCH.min(stride - r0);
                    lines.clear();
                    lines.resize(nl * m, Complex64::default());
                    for t in 0..m {
                        let row = &blk[t * stride + r0..t * stride + r0 + nl];
                        for (l, v) in row.iter().enumerate() {
                            lines[l * m + t] = *v;
                        }
                    }
                    fft.process_with_scratch(&mut lines, &mut scratch);
                    for t in 0..m {
                        let row = &mut blk[t * stride + r0..t * stride + r0 + nl];
                        for (l, v) in row.iter_mut().enumerate() {
                            *v = lines[l * m + t];
                        }
                    }
                    r0 += nl;
                }
            }
        }
    }

    /// Residue of a site coordinate modulo `M`.
    pub fn wrap(&self, c: i64) -> usize {
        c.rem_euclid(self.side as i64) as usize
    }

    /// Flat index of a site after wrapping each coordinate.
    pub fn index(&self, site: &[i64]) -> usize {
        site.iter().fold(0, |acc, &c| acc * self.side + self.wrap(c))
    }

    /// Representative of a residue in `(-M/2, M/2]`.
    pub fn signed(&self, k: usize) -> i64 {
        let m = self.side as i64;
        let k = k as i64;
        if 2 * k > m {
            k - m
        } else {
            k
        }
    }

    /// Periodization of a kernel's stored values onto the torus.
    pub fn periodize(&self, f: &LatticeKernel) -> Vec<Complex64> {
        self.periodize_box(f.lo(), f.shape(), f.values())
    }

    pub fn periodize_box(&self, lo: &[i64], shape: &[usize], values: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.len()];
        for_each_site(lo, shape, |i, s| {
            out[self.index(s)].re += values[i];
        });
        out
    }

    /// Calls `f(flat_index, θ)` for each torus frequency with `θ` the lattice-unit
    /// momentum `2πk/M` taken in `(-π, π]`.
    pub fn for_each_frequency(&self, mut f: impl FnMut(usize, &[f64])) {
        let step = 2.0 * std::f64::consts::PI / self.side as f64;
        let table: Vec<f64> = (0..self.side)
            .map(|k| self.signed(k) as f64 * step)
            .collect();
        let mut idx = vec![0usize; self.dim];
        let mut theta = vec![table[0]; self.dim];
        for flat in 0..self.len() {
            f(flat, &theta);
            for ax in (0..self.dim).rev() {
                idx[ax] += 1;
                if idx[ax] < self.side {
                    theta[ax] = table[idx[ax]];
                    break;
                }
                idx[ax] = 0;
                theta[ax] = table[0];
            }
        }
    }

    /// Calls `f(flat_index, site)` with `site` the representative of each torus
    /// point in `(-M/2, M/2]^d`.
    pub fn for_each_site(&self, mut f: impl FnMut(usize, &[i64])) {
        let mut idx = vec![0usize; self.dim];
        let mut site = vec![0i64; self.dim];
        for flat in 0..self.len() {
            f(flat, &site);
            for ax in (0..self.dim).rev() {
                idx[ax] += 1;
                if idx[ax] < self.side {
                    site[ax] = self.signed(idx[ax]);
                    break;
                }
                idx[ax] = 0;
                site[ax] = 0;
            }
        }
    }
}
