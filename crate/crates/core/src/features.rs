//! Per-path feature cache: for every Monte Carlo path and maturity, the
//! packed Cholesky factor `U(T)` of `-Q(T)` and the stochastic integral
//! `v(T) = int_0^T vec(S^{<=N}_t) dZ_t`. Once built, any coefficient vector
//! can be priced without touching signatures again.
//!
//! # Binary layout (little-endian, version 1)
//!
//! ```text
//! magic      8 bytes  "SIGFEAT\0"
//! version    u32
//! level      u32      signature level N
//! dim        u32      alphabet size (2: time + primary)
//! n_mat      u32
//! n_steps    u64
//! horizon    f64
//! seed       u64
//! n_paths    u64
//! antithetic u32      0 or 1
//! primary    5 x f64  x0, kappa, theta, nu, rho
//! failures   u64      paths whose factorization failed
//! ridged     u64      factorizations that needed the ridge
//! maturities n_mat x f64
//! records    n_paths x n_mat x (d_N (d_N+1)/2 + d_N) f64
//! valid      n_paths x u8
//! ```

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::model::{factor_neg_q, QMatrixBuilder};
use crate::signature::SignatureAccumulator;
use crate::sim::{correlate_into, euler_cir_into, BrownianSource, HestonParams, TimeGrid};
use crate::tensor::Labeling;

const MAGIC: &[u8; 8] = b"SIGFEAT\0";
const VERSION: u32 = 1;

/// Everything that determines a feature cache.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    /// Primary CIR process; `primary.rho` correlates `Z` with its driver `W`.
    pub primary: HestonParams,
    pub grid: TimeGrid,
    pub maturities: Vec<f64>,
    pub level: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn basis_size(&self) -> usize {
        Labeling::new(self.dim(), self.level).expect("dim 2").size()
    }

    fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        if self.level == 0 {
            return domain("signature level must be at least 1");
        }
        if self.n_paths == 0 {
            return domain("need at least one path");
        }
        if self.maturities.is_empty() {
            return domain("need at least one maturity");
        }
        for &t in &self.maturities {
            if self.grid.index_of(t)? == 0 {
                return domain("maturities must be positive");
            }
        }
        Ok(())
    }
}

/// Immutable per-path, per-maturity features.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    spec: FeatureSpec,
    size: usize,
    tri: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
    failures: usize,
    ridged: usize,
}

impl FeatureCache {
    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    /// `d_N`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_paths(&self) -> usize {
        self.spec.n_paths
    }

    pub fn n_maturities(&self) -> usize {
        self.spec.maturities.len()
    }

    pub fn maturities(&self) -> &[f64] {
        &self.spec.maturities
    }

    /// Paths excluded because `-Q` could not be factorized.
    pub fn failures(&self) -> usize {
        self.failures
    }

    /// Factorizations that succeeded only after the diagonal ridge.
    pub fn ridged(&self) -> usize {
        self.ridged
    }

    pub fn is_valid(&self, path: usize) -> bool {
        self.valid[path]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn record_len(&self) -> usize {
        self.tri + self.size
    }

    fn path_stride(&self) -> usize {
        self.record_len() * self.n_maturities()
    }

    /// `(packed U, v)` for a path and maturity column.
    pub fn record(&self, path: usize, maturity: usize) -> (&[f64], &[f64]) {
        let start = path * self.path_stride() + maturity * self.record_len();
        let rec = &self.data[start..start + self.record_len()];
        rec.split_at(self.tri)
    }

    /// Column index of maturity `t`.
    pub fn maturity_index(&self, t: f64) -> Result<usize> {
        self.spec
            .maturities
            .iter()
            .position(|&m| (m - t).abs() < 1e-9)
            .ok_or_else(|| Error::Domain(format!("maturity {t} is not in the feature cache")))
    }

    /// Simulate the primary process, stream its time-augmented signature at
    /// cap `2N+1`, and record `(U(T), v(T))` at each maturity.
    pub fn build(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dim();
        let level = spec.level;
        let builder = QMatrixBuilder::new(dim, level)?;
        let size = builder.size();
        let tri = size * (size + 1) / 2;
        let record_len = tri + size;
        let n_mat = spec.maturities.len();
        let grid = spec.grid;
        let n = grid.n_steps();
        let dt = grid.dt();
        let mat_idx: Vec<usize> = spec
            .maturities
            .iter()
            .map(|&t| grid.index_of(t))
            .collect::<Result<_>>()?;
        let last = *mat_idx.iter().max().expect("non-empty");
        let mut source = BrownianSource::new(spec.seed, grid);
        source.antithetic = spec.antithetic;

        struct BlockOut {
            data: Vec<f64>,
            valid: Vec<bool>,
            failures: usize,
            ridged: usize,
        }

        let blocks = source.map_blocks(spec.n_paths, |_, dw, db, count| {
            let mut out = BlockOut {
                data: vec![0.0; count * n_mat * record_len],
                valid: vec![true; count],
                failures: 0,
                ridged: 0,
            };
            let mut acc = SignatureAccumulator::new(dim, builder.required_cap()).expect("valid cap");
            let mut x = Vec::with_capacity(n + 1);
            let mut dz = vec![0.0; n];
            let mut v = vec![0.0; size];
            let mut q = vec![0.0; size * size];
            for p in 0..count {
                let dwp = &dw[p * n..p * n + last];
                let dbp = &db[p * n..p * n + last];
                euler_cir_into(&spec.primary, dwp, dt, &mut x);
                correlate_into(dwp, dbp, spec.primary.rho, &mut dz[..last]);
                acc.reset();
                v.fill(0.0);
                for k in 0..last {
                    let sig = acc.signature().coeffs();
                    let z = dz[k];
                    for (vi, s) in v.iter_mut().zip(&sig[..size]) {
                        *vi += s * z;
                    }
                    acc.push_increment(&[dt, x[k + 1] - x[k]]);
                    for (m, _) in mat_idx.iter().enumerate().filter(|(_, &i)| i == k + 1) {
                        builder.fill(acc.signature().coeffs(), &mut q);
                        let rec_start = (p * n_mat + m) * record_len;
                        let rec = &mut out.data[rec_start..rec_start + record_len];
                        match factor_neg_q(&q, size) {
                            Ok(f) => {
                                if f.ridge > 0.0 {
                                    out.ridged += 1;
                                }
                                rec[..tri].copy_from_slice(f.factor.packed());
                            }
                            Err(_) => {
                                if out.valid[p] {
                                    out.failures += 1;
                                }
                                out.valid[p] = false;
                            }
                        }
                        rec[tri..].copy_from_slice(&v);
                    }
                }
            }
            out
        });

        let mut data = Vec::with_capacity(spec.n_paths * n_mat * record_len);
        let mut valid = Vec::with_capacity(spec.n_paths);
        let (mut failures, mut ridged) = (0, 0);
        for b in blocks {
            data.extend(b.data);
            valid.extend(b.valid);
            failures += b.failures;
            ridged += b.ridged;
        }
        Ok(FeatureCache {
            spec,
            size,
            tri,
            data,
            valid,
            failures,
            ridged,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(s.level as u32).to_le_bytes())?;
        w.write_all(&(s.dim() as u32).to_le_bytes())?;
        w.write_all(&(s.maturities.len() as u32).to_le_bytes())?;
        w.write_all(&(s.grid.n_steps() as u64).to_le_bytes())?;
        w.write_all(&s.grid.horizon().to_le_bytes())?;
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&(s.n_paths as u64).to_le_bytes())?;
        w.write_all(&u32::from(s.antithetic).to_le_bytes())?;
        for x in [s.primary.x0, s.primary.kappa, s.primary.theta, s.primary.nu, s.primary.rho] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.failures as u64).to_le_bytes())?;
        w.write_all(&(self.ridged as u64).to_le_bytes())?;
        for m in &s.maturities {
            w.write_all(&m.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        let flags: Vec<u8> = self.valid.iter().map(|&v| u8::from(v)).collect();
        w.write_all(&flags)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CacheMismatch("not a feature cache file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::CacheMismatch(format!(
                "unsupported feature cache version {version}"
            )));
        }
        let level = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim != 2 {
            return Err(Error::CacheMismatch(format!("unsupported alphabet size {dim}")));
        }
        let n_mat = read_u32(&mut r)? as usize;
        let n_steps = read_u64(&mut r)? as usize;
        let horizon = read_f64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let n_paths = read_u64(&mut r)? as usize;
        let antithetic = read_u32(&mut r)? != 0;
        let mut pp = [0.0; 5];
        for x in &mut pp {
            *x = read_f64(&mut r)?;
        }
        let failures = read_u64(&mut r)? as usize;
        let ridged = read_u64(&mut r)? as usize;
        let mut maturities = vec![0.0; n_mat];
        for m in &mut maturities {
            *m = read_f64(&mut r)?;
        }
        let spec = FeatureSpec {
            primary: HestonParams {
                x0: pp[0],
                kappa: pp[1],
                theta: pp[2],
                nu: pp[3],
                rho: pp[4],
            },
            grid: TimeGrid::new(n_steps, horizon)?,
            maturities,
            level,
            n_paths,
            seed,
            antithetic,
        };
        let size = spec.basis_size();
        let tri = size * (size + 1) / 2;
        let n_vals = n_paths * n_mat * (tri + size);
        let mut raw = vec![0u8; n_vals * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut flags = vec![0u8; n_paths];
        r.read_exact(&mut flags)?;
        Ok(FeatureCache {
            spec,
            size,
            tri,
            data,
            valid: flags.into_iter().map(|f| f != 0).collect(),
            failures,
            ridged,
        })
    }

    /// Load a cache and insist it was built from `expected`.
    pub fn load_matching<R: Read>(r: R, expected: &FeatureSpec) -> Result<Self> {
        let cache = Self::read_from(r)?;
        if &cache.spec != expected {
            return Err(Error::CacheMismatch(format!(
                "cache was built for {:?}, run expects {:?}",
                cache.spec, expected
            )));
        }
        Ok(cache)
    }

    /// CSV export: `path,maturity,kind,index,value` for the first `max_paths`.
    pub fn write_csv<W: Write>(&self, out: W, max_paths: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["path", "maturity", "kind", "index", "value"])?;
        for p in 0..self.n_paths().min(max_paths) {
            for (m, t) in self.spec.maturities.iter().enumerate() {
                let (u, v) = self.record(p, m);
                for (i, x) in u.iter().enumerate() {
                    wtr.write_record([p.to_string(), t.to_string(), "U".into(), i.to_string(), x.to_string()])?;
                }
                for (i, x) in v.iter().enumerate() {
                    wtr.write_record([p.to_string(), t.to_string(), "v".into(), i.to_string(), x.to_string()])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Apply `f(path, packed U, v)` to every valid path of maturity column
    /// `m`, in fixed blocks, folding each block with `fold` and returning the
    /// block results in order.
    pub(crate) fn map_paths<T, F>(&self, m: usize, block: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut dyn Iterator<Item = (&[f64], &[f64])>) -> T + Sync,
    {
        let n = self.n_paths();
        (0..n.div_ceil(block))
            .into_par_iter()
            .map(|b| {
                let range = b * block..(n.min((b + 1) * block));
                let mut it = range
                    .filter(|&p| self.valid[p])
                    .map(|p| self.record(p, m));
                f(&mut it)
            })
            .collect()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> FeatureSpec {
        FeatureSpec {
            primary: HestonParams { x0: 0.1, kappa: 2.0, theta: 0.15, nu: 0.2, rho: 0.0 },
            grid: TimeGrid::new(48, 1.6).unwrap(),
            maturities: vec![0.1, 0.6, 1.1, 1.6],
            level: 3,
            n_paths: 37,
            seed: 11,
            antithetic: false,
        }
    }

    #[test]
    fn binary_round_trip() {
        let cache = FeatureCache::build(small_spec()).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = FeatureCache::load_matching(buf.as_slice(), &small_spec()).unwrap();
        assert_eq!(back.data, cache.data);
        assert_eq!(back.valid, cache.valid);
        let mut other = small_spec();
        other.seed = 12;
        assert!(matches!(
            FeatureCache::load_matching(buf.as_slice(), &other),
            Err(Error::CacheMismatch(_))
        ));
        assert!(FeatureCache::read_from(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn stochastic_integral_head_is_z() {
        let spec = small_spec();
        let cache = FeatureCache::build(spec.clone()).unwrap();
        let source = BrownianSource::new(spec.seed, spec.grid);
        let (_, db) = source.block(0, 1);
        // rho = 0 so Z = B; v[0] = Z_T
        let z_t: f64 = db[..48].iter().sum();
        let (_, v) = cache.record(0, 3);
        assert!((v[0] - z_t).abs() < 1e-13);
        assert_eq!(cache.maturity_index(1.1).unwrap(), 2);
        assert!(cache.maturity_index(0.7).is_err());
    }

    #[test]
    fn rejects_off_grid_maturities() {
        let mut spec = small_spec();
        spec.maturities = vec![0.11];
        assert!(FeatureCache::build(spec).is_err());
    }
}
