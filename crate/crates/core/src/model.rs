//! Signature volatility model `sigma_t(l) = <l, S(X)^{<=N}_t>` driven by a
//! time-augmented primary path `(t, X_t)`.
//!
//! With `Z = rho W + sqrt(1-rho^2) B` the discounted price solves
//! `dS = S sigma_t(l) dZ`, hence
//! `S_T(l) = S0 exp(l^T Q(T) l + l^T int_0^T vec(S^{<=N}_t) dZ_t)` where
//! `Q(T)_{IJ} = -1/2 <(e_I ⧢ e_J) ⊗ e_0, S^{<=2N+1}_T>` is negative
//! semi-definite. Pricing uses the upper Cholesky factor `U` of `-Q`:
//! `l^T Q l = -|U l|^2`.

use crate::error::{domain, Error, Result};
use crate::signature::SignatureStream;
use crate::tensor::{Labeling, PairShuffles, TruncatedTensor};

/// Letter of the time coordinate in a time-augmented alphabet.
pub const TIME_LETTER: u8 = 0;

/// Coefficient vector `l` over words of length `<= level`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigVolCoefficients {
    labeling: Labeling,
    values: Vec<f64>,
}

impl SigVolCoefficients {
    pub fn new(dim: usize, level: usize, values: Vec<f64>) -> Result<Self> {
        let labeling = Labeling::new(dim, level)?;
        if values.len() != labeling.size() {
            return domain(format!(
                "expected {} coefficients, got {}",
                labeling.size(),
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("non-finite coefficient");
        }
        Ok(SigVolCoefficients { labeling, values })
    }

    /// `(c, 0, ..., 0)`: constant volatility `c`.
    pub fn constant(dim: usize, level: usize, c: f64) -> Result<Self> {
        let labeling = Labeling::new(dim, level)?;
        let mut values = vec![0.0; labeling.size()];
        values[0] = c;
        Self::new(dim, level, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labeling(&self) -> Labeling {
        self.labeling
    }

    pub fn as_tensor(&self) -> TruncatedTensor {
        TruncatedTensor::from_coeffs(self.labeling.dim(), self.labeling.cap(), self.values.clone())
            .expect("validated on construction")
    }
}

/// Precomputed shuffle functionals `(e_I ⧢ e_J) ⊗ e_0` for all unordered
/// pairs of basis words of length `<= level`, resolved against the
/// level-`2N+1` labeling.
#[derive(Clone, Debug)]
pub struct QMatrixBuilder {
    level: usize,
    size: usize,
    table: PairShuffles,
}

impl QMatrixBuilder {
    pub fn new(dim: usize, level: usize) -> Result<Self> {
        let table = PairShuffles::new(dim, level, 2 * level, Some(TIME_LETTER))?;
        let size = Labeling::new(dim, level)?.size();
        Ok(QMatrixBuilder { level, size, table })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// `d_N`, the side of `Q`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Signature cap needed by [`Self::q_matrix`]: `2N + 1`.
    pub fn required_cap(&self) -> usize {
        2 * self.level + 1
    }

    /// Row-major symmetric `Q`, built on the upper triangle and mirrored.
    pub fn q_matrix(&self, sig: &TruncatedTensor) -> Result<Vec<f64>> {
        if sig.dim() != self.table.dim() {
            return domain("signature alphabet does not match the Q builder");
        }
        if sig.cap() < self.required_cap() {
            return domain(format!(
                "Q at level {} needs a signature of cap {}, got {}",
                self.level,
                self.required_cap(),
                sig.cap()
            ));
        }
        let mut q = vec![0.0; self.size * self.size];
        self.fill(sig.coeffs(), &mut q);
        Ok(q)
    }

    /// Fill `out` (row-major `d_N x d_N`) from raw cap-`2N+1` coefficients.
    pub fn fill(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.size;
        for (i, j, terms) in self.table.entries() {
            let v = -0.5 * PairShuffles::eval(terms, coeffs);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

/// `Q(T)` from a signature at cap `>= 2N+1` (builds the shuffle table on the fly).
pub fn q_matrix(sig: &TruncatedTensor, level: usize) -> Result<Vec<f64>> {
    QMatrixBuilder::new(sig.dim(), level)?.q_matrix(sig)
}

/// Packed upper-triangular matrix, rows stored contiguously:
/// row `i` holds `U[i][i..n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperFactor {
    n: usize,
    packed: Vec<f64>,
}

impl UpperFactor {
    pub fn from_packed(n: usize, packed: Vec<f64>) -> Result<Self> {
        if packed.len() != n * (n + 1) / 2 {
            return domain(format!(
                "packed factor of side {n} needs {} entries, got {}",
                n * (n + 1) / 2,
                packed.len()
            ));
        }
        Ok(UpperFactor { n, packed })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j < i {
            0.0
        } else {
            self.packed[packed_index(self.n, i, j)]
        }
    }

    /// Dense row-major `U^T U`.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..=i.min(j)).map(|r| self.get(r, i) * self.get(r, j)).sum();
            }
        }
        out
    }
}

#[inline]
pub(crate) fn packed_index(n: usize, i: usize, j: usize) -> usize {
    // rows 0..i hold n + (n-1) + ... + (n-i+1) entries
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Outcome of factorizing `-Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub factor: UpperFactor,
    /// Diagonal ridge added after a failed first attempt (0 if none).
    pub ridge: f64,
}

/// Upper Cholesky factor `U` with `U^T U = -Q` (row-major `q`, side `n`).
///
/// On a non-positive pivot the factorization is retried once on
/// `-Q + eps I` with `eps = 1e-12 trace(-Q) / n`.
pub fn factor_neg_q(q: &[f64], n: usize) -> Result<Factorization> {
    if q.len() != n * n {
        return domain(format!("Q must have {} entries, got {}", n * n, q.len()));
    }
    let a: Vec<f64> = q.iter().map(|v| -v).collect();
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    if trace == 0.0 && a.iter().all(|&v| v == 0.0) {
        return Ok(Factorization {
            factor: UpperFactor::from_packed(n, vec![0.0; n * (n + 1) / 2])?,
            ridge: 0.0,
        });
    }
    if let Some(f) = cholesky_upper(&a, n, 0.0) {
        return Ok(Factorization { factor: f, ridge: 0.0 });
    }
    let eps = 1e-12 * trace.abs() / n as f64;
    cholesky_upper(&a, n, eps)
        .map(|f| Factorization { factor: f, ridge: eps })
        .ok_or_else(|| Error::Numerical("Cholesky of -Q failed even with ridge".into()))
}

fn cholesky_upper(a: &[f64], n: usize, ridge: f64) -> Option<UpperFactor> {
    let mut packed = vec![0.0; n * (n + 1) / 2];
    // U[i][j] for j >= i, computed row by row
    for i in 0..n {
        let mut d = a[i * n + i] + ridge;
        for r in 0..i {
            let u = packed[packed_index(n, r, i)];
            d -= u * u;
        }
        if !(d > 0.0) {
            // an exactly zero row of a PSD matrix factors as a zero row
            let row_zero = d == 0.0 && (i..n).all(|j| a[i * n + j] == 0.0);
            if !row_zero {
                return None;
            }
            continue;
        }
        let dii = d.sqrt();
        packed[packed_index(n, i, i)] = dii;
        for j in i + 1..n {
            let mut s = a[i * n + j];
            for r in 0..i {
                s -= packed[packed_index(n, r, i)] * packed[packed_index(n, r, j)];
            }
            packed[packed_index(n, i, j)] = s / dii;
        }
    }
    Some(UpperFactor { n, packed })
}

/// `|U l|^2`.
#[inline]
pub fn quad_form(packed: &[f64], n: usize, ell: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut off = 0;
    for i in 0..n {
        let row = &packed[off..off + n - i];
        let mut s = 0.0;
        for (u, l) in row.iter().zip(&ell[i..]) {
            s += u * l;
        }
        acc += s * s;
        off += n - i;
    }
    acc
}

/// Left-point Ito sum `sum_k vec(S^{<=N}_{t_k}) dZ_k`.
pub fn sig_stochastic_integral(stream: &SignatureStream, dz: &[f64]) -> Result<Vec<f64>> {
    if stream.len() != dz.len() + 1 {
        return domain(format!(
            "stream has {} points but {} increments were given",
            stream.len(),
            dz.len()
        ));
    }
    let n = stream.sigs()[0].coeffs().len();
    let mut v = vec![0.0; n];
    for (s, &z) in stream.sigs().iter().zip(dz) {
        for (acc, c) in v.iter_mut().zip(s.coeffs()) {
            *acc += c * z;
        }
    }
    Ok(v)
}

/// `S0 exp(-|U l|^2 + l^T v)`.
pub fn terminal_price(ell: &[f64], factor: &UpperFactor, v: &[f64], s0: f64) -> f64 {
    let a = quad_form(&factor.packed, factor.n, ell);
    let b: f64 = ell.iter().zip(v).map(|(l, x)| l * x).sum();
    s0 * (b - a).exp()
}

/// `sigma_t(l)` along a stream.
pub fn sig_vol_path(ell: &SigVolCoefficients, stream: &SignatureStream) -> Result<Vec<f64>> {
    let n = ell.values.len();
    stream
        .sigs()
        .iter()
        .map(|s| {
            if s.coeffs().len() < n || s.dim() != ell.labeling.dim() {
                return domain("stream cap or alphabet does not cover the coefficients");
            }
            Ok(s.coeffs()[..n].iter().zip(&ell.values).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Trapezoidal `-1/2 int_0^T sigma_t(l)^2 dt` along a stream; the quadrature
/// counterpart of `l^T Q(T) l`.
pub fn half_integrated_variance(ell: &SigVolCoefficients, stream: &SignatureStream) -> Result<f64> {
    let vol = sig_vol_path(ell, stream)?;
    let t = stream.times();
    let mut acc = 0.0;
    for k in 0..vol.len() - 1 {
        acc += 0.5 * (vol[k] * vol[k] + vol[k + 1] * vol[k + 1]) * (t[k + 1] - t[k]);
    }
    Ok(-0.5 * acc)
}

/// `l^T Q l` for row-major `Q`.
pub fn q_form(q: &[f64], ell: &[f64]) -> f64 {
    let n = ell.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += ell[i] * q[i * n + j] * ell[j];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::{signature_stream, time_augment, SampledPath};
    use crate::tensor::Word;

    fn sample_path(n: usize, horizon: f64) -> SampledPath {
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * horizon / n as f64).collect();
        let xs: Vec<f64> = times
            .iter()
            .map(|t| 0.1 + 0.05 * (7.0 * t).sin() + 0.02 * (23.0 * t).cos())
            .collect();
        time_augment(&SampledPath::scalar(times, xs).unwrap())
    }

    #[test]
    fn packed_indexing() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                assert_eq!(packed_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn q_leading_entries() {
        let p = sample_path(60, 0.6);
        let sig = crate::signature::signature(&p, 7).unwrap();
        let q = q_matrix(&sig, 3).unwrap();
        let t = 0.6;
        assert!((q[0] + t / 2.0).abs() < 1e-14);
        assert!((q[1] + t * t / 4.0).abs() < 1e-14);
        assert!((q[15] + t * t / 4.0).abs() < 1e-14);
        for i in 0..15 {
            for j in 0..15 {
                assert_eq!(q[i * 15 + j], q[j * 15 + i]);
            }
        }
    }

    #[test]
    fn q_needs_high_cap() {
        let p = sample_path(10, 0.5);
        let sig = crate::signature::signature(&p, 6).unwrap();
        assert!(q_matrix(&sig, 3).is_err());
    }

    #[test]
    fn q_form_matches_quadrature() {
        let p = sample_path(400, 1.1);
        let stream = signature_stream(&p, 7).unwrap();
        let q = q_matrix(stream.last(), 3).unwrap();
        let s3 = signature_stream(&p, 3).unwrap();
        let ell = SigVolCoefficients::new(
            2,
            3,
            vec![0.2, 0.1, 1.0, -0.3, 0.05, -0.04, 0.01, 0.3, -0.01, -0.01, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let lhs = q_form(&q, ell.values());
        let rhs = half_integrated_variance(&ell, &s3).unwrap();
        assert!((lhs - rhs).abs() <= 2e-3 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn factor_trivial_cases() {
        let n = 4;
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            q[i * n + i] = -1.0;
        }
        let f = factor_neg_q(&q, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(f.factor.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let z = factor_neg_q(&vec![0.0; n * n], n).unwrap();
        assert!(z.factor.packed().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn factor_reconstructs_signature_q() {
        let p = sample_path(100, 1.6);
        let sig = crate::signature::signature(&p, 7).unwrap();
        let q = q_matrix(&sig, 3).unwrap();
        let f = factor_neg_q(&q, 15).unwrap();
        let g = f.factor.gram();
        let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&q) {
            assert!((a + b).abs() <= 1e-9 * (1.0 + qmax));
        }
    }

    #[test]
    fn factor_rejects_indefinite() {
        // -Q = [[1, 2], [2, 1]] has a negative eigenvalue
        let q = vec![-1.0, -2.0, -2.0, -1.0];
        assert!(factor_neg_q(&q, 2).is_err());
    }

    #[test]
    fn stochastic_integral_components() {
        let p = sample_path(20, 0.4);
        let st = signature_stream(&p, 3).unwrap();
        let dz: Vec<f64> = (0..20).map(|k| ((k * 7919) % 13) as f64 * 0.01 - 0.06).collect();
        let v = sig_stochastic_integral(&st, &dz).unwrap();
        let z_t: f64 = dz.iter().sum();
        assert!((v[0] - z_t).abs() < 1e-15);
        let t_dz: f64 = dz.iter().enumerate().map(|(k, z)| st.times()[k] * z).sum();
        assert!((v[1] - t_dz).abs() < 1e-15);
        let zero = sig_stochastic_integral(&st, &vec![0.0; 20]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        assert!(sig_stochastic_integral(&st, &dz[..5]).is_err());
    }

    #[test]
    fn constant_coefficients_give_black_scholes_terminal() {
        let p = sample_path(30, 0.6);
        let st7 = signature_stream(&p, 7).unwrap();
        let st3 = signature_stream(&p, 3).unwrap();
        let dz: Vec<f64> = (0..30).map(|k| if k % 2 == 0 { 0.03 } else { -0.01 }).collect();
        let v = sig_stochastic_integral(&st3, &dz).unwrap();
        let q = q_matrix(st7.last(), 3).unwrap();
        let f = factor_neg_q(&q, 15).unwrap();
        let c = 0.25;
        let ell = SigVolCoefficients::constant(2, 3, c).unwrap();
        let s = terminal_price(ell.values(), &f.factor, &v, 100.0);
        let z_t: f64 = dz.iter().sum();
        let bs = 100.0 * (-0.5 * c * c * 0.6 + c * z_t).exp();
        assert!((s - bs).abs() < 1e-10);
        let zero = SigVolCoefficients::constant(2, 3, 0.0).unwrap();
        assert_eq!(terminal_price(zero.values(), &f.factor, &v, 100.0), 100.0);
    }

    #[test]
    fn vol_path_basics() {
        let p = sample_path(10, 0.3);
        let st = signature_stream(&p, 3).unwrap();
        let one = SigVolCoefficients::constant(2, 3, 1.0).unwrap();
        assert!(sig_vol_path(&one, &st).unwrap().iter().all(|&s| s == 1.0));
        let lab = Labeling::new(2, 3).unwrap();
        let mut e1 = vec![0.0; 15];
        e1[lab.label(&Word::new(vec![1])).unwrap()] = 1.0;
        let e1 = SigVolCoefficients::new(2, 3, e1).unwrap();
        let vol = sig_vol_path(&e1, &st).unwrap();
        for k in 0..p.len() {
            assert!((vol[k] - (p.point(k)[1] - p.point(0)[1])).abs() < 1e-15);
        }
    }
}
