//! Memoization of averaging kernels, in memory and optionally on disk.
//!
//! In memory, kernels are keyed by their lattice-unit parameters, so that
//! physically different `(n, m, a)` sharing `n - m` and `aε_n²` reuse one build.
//! On disk each kernel is a versioned JSON file keyed by the physical
//! parameters `(d, L, n, m, a, R_m)` and the bump fingerprint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::averaging::{
    build_unit, check_mass, check_scale_index, AveragingKernel, AveragingKind, BumpProfile,
    UnitAveraging,
};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;

/// Version of the on-disk container.
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct UnitKey {
    dim: usize,
    log2_scale: u32,
    depth: u32,
    composite: bool,
    mu_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileKey {
    dim: usize,
    scale: u64,
    level: u32,
    m: u32,
    mass: f64,
    side: f64,
    bump: String,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    version: u32,
    key: FileKey,
    kernel: UnitAveraging,
}

/// Summary of one kernel held by the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedKernelInfo {
    pub dim: usize,
    pub scale: u64,
    /// `n - m`; the cube has `L^{depth+1}` sites per side.
    pub depth: u32,
    pub composite: bool,
    /// `aε_n²`.
    pub lattice_mass: f64,
    pub defect: f64,
    pub mass: f64,
}

/// Shared kernel store; cheap to query from several threads.
#[derive(Debug, Default)]
pub struct KernelCache {
    units: Mutex<HashMap<UnitKey, Arc<UnitAveraging>>>,
    dir: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl KernelCache {
    /// An in-memory cache.
    pub fn new() -> Self {
        Self::default()
    }

    /// A cache that also persists kernels under `dir`, creating it if needed.
    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Lookups answered without building, from memory or disk.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Kernels built from scratch.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Every kernel currently held in memory, in a stable order.
    pub fn entries(&self) -> Vec<CachedKernelInfo> {
        let units = self.units.lock().expect("cache lock poisoned");
        let mut keys: Vec<&UnitKey> = units.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| {
                let u = &units[k];
                CachedKernelInfo {
                    dim: k.dim,
                    scale: 1 << k.log2_scale,
                    depth: k.depth,
                    composite: k.composite,
                    lattice_mass: f64::from_bits(k.mu_bits),
                    defect: u.defect,
                    mass: u.mass(),
                }
            })
            .collect()
    }

    fn lookup(&self, key: &UnitKey) -> Option<Arc<UnitAveraging>> {
        self.units
            .lock()
            .expect("cache lock poisoned")
            .get(key)
            .cloned()
    }

    fn store(&self, key: UnitKey, unit: UnitAveraging) -> Arc<UnitAveraging> {
        let mut units = self.units.lock().expect("cache lock poisoned");
        units.entry(key).or_insert_with(|| Arc::new(unit)).clone()
    }

    fn file_path(&self, key: &FileKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| {
            d.join(format!(
                "avg-d{}-L{}-n{}-m{}-a{:016x}-{}.json",
                key.dim,
                key.scale,
                key.level,
                key.m,
                key.mass.to_bits(),
                &key.bump[..16]
            ))
        })
    }

    fn read_file(&self, key: &FileKey) -> Result<Option<UnitAveraging>> {
        let Some(path) = self.file_path(key) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let entry: FileEntry = serde_json::from_slice(&fs::read(&path)?)?;
        if entry.version != CACHE_VERSION {
            return Err(Error::Cache(format!(
                "{} has version {}, expected {CACHE_VERSION}",
                path.display(),
                entry.version
            )));
        }
        if entry.key != *key {
            return Err(Error::Cache(format!("{} holds a different kernel", path.display())));
        }
        let k = &entry.kernel;
        if k.dim != key.dim || k.weights.len() != k.extent().pow(k.dim as u32) {
            return Err(Error::Cache(format!("{} is malformed", path.display())));
        }
        Ok(Some(entry.kernel))
    }

    fn write_file(&self, key: &FileKey, unit: &UnitAveraging) -> Result<()> {
        let Some(path) = self.file_path(key) else {
            return Ok(());
        };
        let entry = FileEntry {
            version: CACHE_VERSION,
            key: key.clone(),
            kernel: unit.clone(),
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// `A^a_{ε_n,m}(R_m)` on `spec`'s lattice.
    pub fn averaging(&self, spec: &LatticeSpec, m: u32, a: f64) -> Result<AveragingKernel> {
        check_mass(a)?;
        check_scale_index(spec, m)?;
        let eps = spec.spacing();
        let mu = a * eps * eps;
        let key = UnitKey {
            dim: spec.dim(),
            log2_scale: spec.log2_scale(),
            depth: spec.level() - m,
            composite: false,
            mu_bits: mu.to_bits(),
        };
        let kind = AveragingKind::Single { m };
        if let Some(u) = self.lookup(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(AveragingKernel::from_unit(*spec, kind, a, u));
        }
        let fkey = FileKey {
            dim: spec.dim(),
            scale: spec.scale(),
            level: spec.level(),
            m,
            mass: a,
            side: spec.scale_pow(1 - m as i32),
            bump: BumpProfile::for_spec(spec).fingerprint(),
        };
        let unit = match self.read_file(&fkey)? {
            Some(u) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                u
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                log::debug!(
                    "building averaging kernel d={} L={} n={} m={} a={a}",
                    spec.dim(),
                    spec.scale(),
                    spec.level(),
                    m
                );
                let u = build_unit(spec.dim(), spec.log2_scale(), key.depth, mu, true)?;
                self.write_file(&fkey, &u)?;
                u
            }
        };
        let unit = self.store(key, unit);
        Ok(AveragingKernel::from_unit(*spec, kind, a, unit))
    }

    /// Factors `A^a_{ε_n,m}(R_m)` of `𝒜^a_n`, ordered `m = n, n-1, ..., 1`.
    pub fn composite_factors(&self, spec: &LatticeSpec, a: f64) -> Result<Vec<AveragingKernel>> {
        (1..=spec.level())
            .rev()
            .map(|m| self.averaging(spec, m, a))
            .collect()
    }

    /// `𝒜^a_n` as a single kernel (the identity for `n = 0`).
    pub fn composite(&self, spec: &LatticeSpec, a: f64) -> Result<AveragingKernel> {
        check_mass(a)?;
        let eps = spec.spacing();
        let key = UnitKey {
            dim: spec.dim(),
            log2_scale: spec.log2_scale(),
            depth: spec.level(),
            composite: true,
            mu_bits: (a * eps * eps).to_bits(),
        };
        let kind = AveragingKind::Composite;
        if let Some(u) = self.lookup(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(AveragingKernel::from_unit(*spec, kind, a, u));
        }
        let mut acc = UnitAveraging::identity(spec.dim());
        for f in self.composite_factors(spec, a)? {
            acc = acc.convolve(f.unit());
        }
        let unit = self.store(key, acc);
        Ok(AveragingKernel::from_unit(*spec, kind, a, unit))
    }
}
