//! Signatures of sampled paths.
//!
//! A [`SampledPath`] is read as its piecewise-linear interpolant. On each
//! linear piece the signature is the tensor exponential of the increment,
//! and pieces are glued with Chen's identity `S_{0,t} ⊗ S_{t,T} = S_{0,T}`.

use crate::error::{domain, Result};
use crate::tensor::{concat_product, TruncatedTensor};

/// Strictly increasing time grid with `dim`-dimensional samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPath {
    times: Vec<f64>,
    dim: usize,
    /// Row-major `(times.len(), dim)`.
    values: Vec<f64>,
}

impl SampledPath {
    pub fn new(times: Vec<f64>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return domain("path dimension must be positive");
        }
        if times.is_empty() {
            return domain("path needs at least one sample");
        }
        if values.len() != times.len() * dim {
            return domain(format!(
                "expected {} values for {} samples of dimension {dim}, got {}",
                times.len() * dim,
                times.len(),
                values.len()
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("time grid must be strictly increasing");
        }
        if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return domain("path contains non-finite entries");
        }
        Ok(SampledPath { times, dim, values })
    }

    /// One-dimensional path from `(t, x)` samples.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::new(times, 1, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increment(&self, k: usize) -> Vec<f64> {
        let a = self.point(k);
        let b = self.point(k + 1);
        b.iter().zip(a).map(|(y, x)| y - x).collect()
    }

    /// Restriction to samples `from..=to`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to >= self.len() {
            return domain(format!("invalid slice {from}..={to} of {} samples", self.len()));
        }
        Ok(SampledPath {
            times: self.times[from..=to].to_vec(),
            dim: self.dim,
            values: self.values[from * self.dim..(to + 1) * self.dim].to_vec(),
        })
    }

    /// Number of leading coordinates that coincide with the time grid.
    /// A value above one means the path was time-augmented twice.
    pub fn leading_time_coordinates(&self) -> usize {
        (0..self.dim)
            .take_while(|&c| (0..self.len()).all(|k| self.point(k)[c] == self.times[k]))
            .count()
    }

    /// Sum of `|ΔX|_1` over segments.
    pub fn one_variation(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|k| self.increment(k).iter().map(|d| d.abs()).sum::<f64>())
            .sum()
    }
}

/// `t -> (t, X_t)`: time becomes coordinate 0.
pub fn time_augment(path: &SampledPath) -> SampledPath {
    let dim = path.dim + 1;
    let mut values = Vec::with_capacity(path.len() * dim);
    for k in 0..path.len() {
        values.push(path.times[k]);
        values.extend_from_slice(path.point(k));
    }
    SampledPath {
        times: path.times.clone(),
        dim,
        values,
    }
}

/// Signature of a single linear segment: `exp_⊗(increment)` truncated at `cap`.
pub fn segment_exp(increment: &[f64], cap: usize) -> Result<TruncatedTensor> {
    if increment.iter().any(|x| !x.is_finite()) {
        return domain("non-finite increment");
    }
    TruncatedTensor::exp_of_vector(increment, cap)
}

/// Running signature `S_{0,t}` updated in place by `S <- S ⊗ exp(Δ)`.
///
/// The update uses a Horner scheme per level,
/// `S'_k = S_k + (...((S_0 Δ/k + S_1) Δ/(k-1) + S_2) ...) Δ/1`,
/// processing levels from the top so lower levels are still the old values.
#[derive(Clone, Debug)]
pub struct SignatureAccumulator {
    sig: TruncatedTensor,
    scratch_a: Vec<f64>,
    scratch_b: Vec<f64>,
}

impl SignatureAccumulator {
    pub fn new(dim: usize, cap: usize) -> Result<Self> {
        let sig = TruncatedTensor::unit(dim, cap)?;
        let top = sig.labeling().level_len(cap);
        Ok(SignatureAccumulator {
            sig,
            scratch_a: vec![0.0; top],
            scratch_b: vec![0.0; top],
        })
    }

    pub fn reset(&mut self) {
        let c = self.sig.coeffs_mut();
        c.fill(0.0);
        c[0] = 1.0;
    }

    pub fn signature(&self) -> &TruncatedTensor {
        &self.sig
    }

    pub fn push_increment(&mut self, delta: &[f64]) {
        let lab = self.sig.labeling();
        let d = lab.dim();
        debug_assert_eq!(delta.len(), d);
        let cap = lab.cap();
        let coeffs = self.sig.coeffs_mut();
        for level in (1..=cap).rev() {
            // acc starts at level 1: S_0 * Δ / level
            let s0 = coeffs[0];
            let inv = 1.0 / level as f64;
            let mut acc_len = d;
            for (a, &x) in self.scratch_a[..d].iter_mut().zip(delta) {
                *a = s0 * x * inv;
            }
            for m in 1..level {
                let src = lab.level_range(m);
                let scale = 1.0 / (level - m) as f64;
                let (cur, next) = (&mut self.scratch_a, &mut self.scratch_b);
                for (i, s) in coeffs[src].iter().enumerate() {
                    let base = (cur[i] + s) * scale;
                    let row = &mut next[i * d..(i + 1) * d];
                    for (r, &x) in row.iter_mut().zip(delta) {
                        *r = base * x;
                    }
                }
                acc_len *= d;
                std::mem::swap(&mut self.scratch_a, &mut self.scratch_b);
            }
            let dst = lab.level_range(level);
            for (c, a) in coeffs[dst].iter_mut().zip(&self.scratch_a[..acc_len]) {
                *c += a;
            }
        }
    }
}

/// Signature of the piecewise-linear interpolant of `path`, truncated at `cap`.
pub fn signature(path: &SampledPath, cap: usize) -> Result<TruncatedTensor> {
    if path.len() < 2 {
        return domain("signature needs at least two samples");
    }
    let mut acc = SignatureAccumulator::new(path.dim, cap)?;
    for k in 0..path.len() - 1 {
        acc.push_increment(&path.increment(k));
    }
    Ok(acc.sig)
}

/// Same value as [`signature`] but computed as an explicit fold of
/// [`concat_product`] over segment exponentials.
pub fn signature_by_products(path: &SampledPath, cap: usize) -> Result<TruncatedTensor> {
    if path.len() < 2 {
        return domain("signature needs at least two samples");
    }
    let mut sig = TruncatedTensor::unit(path.dim, cap)?;
    for k in 0..path.len() - 1 {
        sig = concat_product(&sig, &segment_exp(&path.increment(k), cap)?, cap)?;
    }
    Ok(sig)
}

/// Prefix signatures `S_{0,t_k}` at every grid point.
#[derive(Clone, Debug)]
pub struct SignatureStream {
    times: Vec<f64>,
    sigs: Vec<TruncatedTensor>,
}

impl SignatureStream {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sigs(&self) -> &[TruncatedTensor] {
        &self.sigs
    }

    pub fn len(&self) -> usize {
        self.sigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigs.is_empty()
    }

    pub fn last(&self) -> &TruncatedTensor {
        self.sigs.last().expect("stream is never empty")
    }

    /// CSV rows `t,c0,c1,...` in label order.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> crate::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let n = self.sigs.first().map_or(0, |s| s.coeffs().len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("c{i}")));
        wtr.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.sigs) {
            let mut row = vec![t.to_string()];
            row.extend(s.coeffs().iter().map(|c| c.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn signature_stream(path: &SampledPath, cap: usize) -> Result<SignatureStream> {
    if path.len() < 2 {
        return domain("signature stream needs at least two samples");
    }
    let mut acc = SignatureAccumulator::new(path.dim, cap)?;
    let mut sigs = Vec::with_capacity(path.len());
    sigs.push(acc.sig.clone());
    for k in 0..path.len() - 1 {
        acc.push_increment(&path.increment(k));
        sigs.push(acc.sig.clone());
    }
    Ok(SignatureStream {
        times: path.times.clone(),
        sigs,
    })
}

/// Euclidean norm of each level block.
pub fn factorial_decay_profile(s: &TruncatedTensor) -> Vec<f64> {
    (0..=s.cap())
        .map(|k| s.level(k).iter().map(|c| c * c).sum::<f64>().sqrt())
        .collect()
}

/// Least-squares fit of `ln ||level k|| ≈ k ln C - ln k!` over levels with
/// non-zero norm; returns the fitted `C`. Diagnostic only.
pub fn fitted_decay_constant(profile: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut ln_fact = 0.0;
    for (k, &norm) in profile.iter().enumerate().skip(1) {
        ln_fact += (k as f64).ln();
        if norm > 0.0 {
            let y = norm.ln() + ln_fact;
            num += k as f64 * y;
            den += (k * k) as f64;
        }
    }
    (den > 0.0).then(|| (num / den).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Labeling, Word};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn time_augment_shapes() {
        let p = SampledPath::scalar(vec![0.0, 1.0], vec![2.5, 2.5]).unwrap();
        let a = time_augment(&p);
        assert_eq!(a.dim(), 2);
        assert_eq!(a.point(0), &[0.0, 2.5]);
        assert_eq!(a.point(1), &[1.0, 2.5]);
        assert_eq!(a.leading_time_coordinates(), 1);
        let twice = time_augment(&a);
        assert_eq!(twice.leading_time_coordinates(), 2);

        let q = SampledPath::scalar(vec![0.0, 0.1, 0.2, 0.3], vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let qa = time_augment(&q);
        assert_eq!((qa.dim(), qa.len()), (2, 4));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SampledPath::scalar(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(SampledPath::scalar(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(SampledPath::scalar(vec![0.0, 1.0], vec![1.0, f64::NAN]).is_err());
        let single = SampledPath::scalar(vec![0.0], vec![1.0]).unwrap();
        assert!(signature(&single, 3).is_err());
    }

    #[test]
    fn segment_exp_values() {
        let zero = segment_exp(&[0.0, 0.0], 3).unwrap();
        assert_eq!(zero, TruncatedTensor::unit(2, 3).unwrap());
        let x = 1.7;
        let e = segment_exp(&[x], 4).unwrap();
        let expected = [1.0, x, x * x / 2.0, x.powi(3) / 6.0, x.powi(4) / 24.0];
        for (c, e) in e.coeffs().iter().zip(expected) {
            assert!(close(*c, e, 1e-15));
        }
        let (a, b) = (0.3, -2.0);
        let e2 = segment_exp(&[a, b], 2).unwrap();
        assert!(close(e2.coeff(&Word::new(vec![0, 1])).unwrap(), a * b / 2.0, 1e-16));
        assert!(segment_exp(&[f64::INFINITY], 2).is_err());
    }

    #[test]
    fn horner_matches_product_fold() {
        let times: Vec<f64> = (0..7).map(|k| k as f64 * 0.3).collect();
        let vals = vec![
            0.0, 1.0, -0.5, 0.2, 0.4, 0.1, 1.0, -1.0, 0.3, 0.8, 0.0, 2.0, -0.7, 0.6, 0.2, 0.5, 0.1, -0.4,
            1.3, 0.9, 0.0,
        ];
        let p = SampledPath::new(times, 3, vals).unwrap();
        let a = signature(&p, 5).unwrap();
        let b = signature_by_products(&p, 5).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!(close(*x, *y, 1e-13 * (1.0 + y.abs())));
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let p = SampledPath::scalar(vec![0.0, 0.2, 0.5, 1.0], vec![1.0, 1.6, 0.9, 1.5]).unwrap();
        let s = signature(&p, 5).unwrap();
        let inc: f64 = 0.5;
        let mut fact = 1.0;
        for k in 0..=5 {
            if k > 0 {
                fact *= k as f64;
            }
            let err = (s.level(k)[0] - inc.powi(k as i32) / fact).abs();
            assert!(err < 1e-14, "level {k}: err {err:e}");
        }
    }

    #[test]
    fn linear_path_is_single_exponential() {
        let p = SampledPath::new(vec![0.0, 0.5, 1.0], 2, vec![0.0, 0.0, 0.5, -1.0, 1.0, -2.0]).unwrap();
        let s = signature(&p, 4).unwrap();
        let e = segment_exp(&[1.0, -2.0], 4).unwrap();
        for (x, y) in s.coeffs().iter().zip(e.coeffs()) {
            assert!(close(*x, *y, 1e-14));
        }
    }

    #[test]
    fn stream_endpoints() {
        let p = SampledPath::new(vec![0.0, 0.1, 0.3, 0.4], 2, vec![0.0, 1.0, 0.1, 0.5, 0.3, 0.9, 0.4, 0.2]).unwrap();
        let st = signature_stream(&p, 3).unwrap();
        assert_eq!(st.len(), 4);
        assert_eq!(st.sigs()[0], TruncatedTensor::unit(2, 3).unwrap());
        assert_eq!(st.last(), &signature(&p, 3).unwrap());
        // Chen split against a directly computed suffix
        for k in 1..3 {
            let suffix = signature(&p.slice(k, 3).unwrap(), 3).unwrap();
            let joined = concat_product(&st.sigs()[k], &suffix, 3).unwrap();
            for (x, y) in joined.coeffs().iter().zip(st.last().coeffs()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn time_words_are_powers() {
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
        let xs: Vec<f64> = times.iter().map(|t| (3.0 * t).sin()).collect();
        let p = time_augment(&SampledPath::scalar(times.clone(), xs).unwrap());
        let st = signature_stream(&p, 4).unwrap();
        let lab = Labeling::new(2, 4).unwrap();
        for (t, s) in times.iter().zip(st.sigs()) {
            let mut fact = 1.0;
            for k in 1..=4usize {
                fact *= k as f64;
                let idx = lab.label(&Word::new(vec![0u8; k])).unwrap();
                assert!(close(s.coeffs()[idx], t.powi(k as i32) / fact, 1e-12));
            }
        }
    }

    #[test]
    fn decay_profile_basics() {
        let unit = TruncatedTensor::unit(2, 3).unwrap();
        assert_eq!(factorial_decay_profile(&unit), vec![1.0, 0.0, 0.0, 0.0]);
        let x: f64 = -0.8;
        let prof = factorial_decay_profile(&segment_exp(&[x], 3).unwrap());
        assert!(close(prof[1], x.abs(), 1e-16));
        assert!(close(prof[2], x * x / 2.0, 1e-16));
        assert!(close(prof[3], x.abs().powi(3) / 6.0, 1e-16));
        let c = fitted_decay_constant(&prof).unwrap();
        assert!(close(c, 0.8, 1e-12));
    }
}
