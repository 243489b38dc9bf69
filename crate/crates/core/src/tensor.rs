//! Truncated tensor algebra over a finite alphabet.
//!
//! Elements of `T^N(R^d)` are stored densely: one coefficient per word of
//! length at most `N`, ordered by a graded lexicographic [`Labeling`]
//! (shorter words first, then lexicographic with letter `0 < 1 < ...`).
//! For `d = 2`, `N = 3` the order is
//! `(), (0), (1), (0,0), (0,1), (1,0), (1,1), (0,0,0), ..., (1,1,1)`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{domain, Result};

/// A multi-index `(i_1, ..., i_n)` over the alphabet `{0, ..., d-1}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Word(Vec<u8>);

impl Word {
    pub fn new(letters: impl Into<Vec<u8>>) -> Self {
        Word(letters.into())
    }

    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn letters(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Concatenation `self · other`.
    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&other.0);
        Word(letters)
    }

    /// `self · (letter)`.
    pub fn with_letter(&self, letter: u8) -> Word {
        let mut letters = self.0.clone();
        letters.push(letter);
        Word(letters)
    }

    fn split_last(&self) -> Option<(u8, Word)> {
        self.0
            .split_last()
            .map(|(&last, rest)| (last, Word(rest.to_vec())))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "()");
        }
        write!(f, "(")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, ")")
    }
}

impl From<&[u8]> for Word {
    fn from(letters: &[u8]) -> Self {
        Word(letters.to_vec())
    }
}

/// Graded lexicographic bijection between words of length `<= cap` on a
/// `dim`-letter alphabet and `0..size()`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labeling {
    dim: usize,
    cap: usize,
}

impl Labeling {
    pub fn new(dim: usize, cap: usize) -> Result<Self> {
        if dim == 0 {
            return domain("alphabet size must be positive");
        }
        if dim > u8::MAX as usize + 1 {
            return domain(format!("alphabet size {dim} exceeds 256 letters"));
        }
        Ok(Labeling { dim, cap })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// `d_N = sum_{k=0}^{N} d^k`.
    pub fn size(&self) -> usize {
        self.level_offset(self.cap + 1)
    }

    /// Index of the first word of length `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        if self.dim == 1 {
            level
        } else {
            (self.dim.pow(level as u32) - 1) / (self.dim - 1)
        }
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.dim.pow(level as u32)
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.level_offset(level);
        start..start + self.level_len(level)
    }

    pub fn label(&self, word: &Word) -> Result<usize> {
        if word.len() > self.cap {
            return domain(format!(
                "word {word} longer than labeling cap {}",
                self.cap
            ));
        }
        let mut within = 0usize;
        for &l in word.letters() {
            if l as usize >= self.dim {
                return domain(format!(
                    "letter {l} out of range for alphabet size {}",
                    self.dim
                ));
            }
            within = within * self.dim + l as usize;
        }
        Ok(self.level_offset(word.len()) + within)
    }

    pub fn unlabel(&self, index: usize) -> Result<Word> {
        if index >= self.size() {
            return domain(format!("label {index} out of range 0..{}", self.size()));
        }
        let mut level = 0;
        while self.level_offset(level + 1) <= index {
            level += 1;
        }
        let mut within = index - self.level_offset(level);
        let mut letters = vec![0u8; level];
        for slot in letters.iter_mut().rev() {
            *slot = (within % self.dim) as u8;
            within /= self.dim;
        }
        Ok(Word(letters))
    }

    /// All words in label order.
    pub fn words(&self) -> impl Iterator<Item = Word> + '_ {
        (0..self.size()).map(move |i| self.unlabel(i).expect("index in range"))
    }
}

/// Dense element of the truncated tensor algebra `T^cap(R^dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedTensor {
    labeling: Labeling,
    coeffs: Vec<f64>,
}

impl TruncatedTensor {
    pub fn zeros(dim: usize, cap: usize) -> Result<Self> {
        let labeling = Labeling::new(dim, cap)?;
        Ok(TruncatedTensor {
            coeffs: vec![0.0; labeling.size()],
            labeling,
        })
    }

    /// The multiplicative identity `1 = (1, 0, 0, ...)`.
    pub fn unit(dim: usize, cap: usize) -> Result<Self> {
        let mut t = Self::zeros(dim, cap)?;
        t.coeffs[0] = 1.0;
        Ok(t)
    }

    pub fn from_coeffs(dim: usize, cap: usize, coeffs: Vec<f64>) -> Result<Self> {
        let labeling = Labeling::new(dim, cap)?;
        if coeffs.len() != labeling.size() {
            return domain(format!(
                "expected {} coefficients for d={dim}, N={cap}, got {}",
                labeling.size(),
                coeffs.len()
            ));
        }
        if let Some(bad) = coeffs.iter().position(|c| !c.is_finite()) {
            return domain(format!("non-finite coefficient at label {bad}"));
        }
        Ok(TruncatedTensor { labeling, coeffs })
    }

    /// Basis element `e_w`.
    pub fn basis(dim: usize, cap: usize, word: &Word) -> Result<Self> {
        let mut t = Self::zeros(dim, cap)?;
        let idx = t.labeling.label(word)?;
        t.coeffs[idx] = 1.0;
        Ok(t)
    }

    /// Truncated tensor exponential of a level-one element,
    /// `exp(x) = sum_k x^{⊗k} / k!`.
    pub fn exp_of_vector(x: &[f64], cap: usize) -> Result<Self> {
        let mut t = Self::unit(x.len(), cap)?;
        for level in 1..=cap {
            let prev = t.labeling.level_range(level - 1);
            let cur = t.labeling.level_range(level);
            let k = level as f64;
            let (lo, hi) = t.coeffs.split_at_mut(cur.start);
            let src = &lo[prev];
            let dst = &mut hi[..cur.len()];
            for (i, &s) in src.iter().enumerate() {
                for (j, &xj) in x.iter().enumerate() {
                    dst[i * x.len() + j] = s * xj / k;
                }
            }
        }
        Ok(t)
    }

    pub fn labeling(&self) -> Labeling {
        self.labeling
    }

    pub fn dim(&self) -> usize {
        self.labeling.dim
    }

    pub fn cap(&self) -> usize {
        self.labeling.cap
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.coeffs[self.labeling.level_range(level)]
    }

    pub fn coeff(&self, word: &Word) -> Result<f64> {
        Ok(self.coeffs[self.labeling.label(word)?])
    }

    /// Keep only levels `<= cap`.
    pub fn truncate(&self, cap: usize) -> Result<Self> {
        if cap > self.cap() {
            return domain(format!(
                "cannot truncate level-{} tensor to higher cap {cap}",
                self.cap()
            ));
        }
        let labeling = Labeling::new(self.dim(), cap)?;
        Ok(TruncatedTensor {
            coeffs: self.coeffs[..labeling.size()].to_vec(),
            labeling,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Truncated product `a ⊗ b` in `T^cap`. Levels missing from either factor
/// count as zero.
pub fn concat_product(a: &TruncatedTensor, b: &TruncatedTensor, cap: usize) -> Result<TruncatedTensor> {
    if a.dim() != b.dim() {
        return domain(format!(
            "alphabet mismatch in tensor product: {} vs {}",
            a.dim(),
            b.dim()
        ));
    }
    let mut out = TruncatedTensor::zeros(a.dim(), cap)?;
    let lab = out.labeling;
    for level in 0..=cap {
        let dst_range = lab.level_range(level);
        let dst = &mut out.coeffs[dst_range];
        for left in 0..=level {
            let right = level - left;
            if left > a.cap() || right > b.cap() {
                continue;
            }
            let av = a.level(left);
            let bv = b.level(right);
            let stride = bv.len();
            for (i, &ai) in av.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let row = &mut dst[i * stride..(i + 1) * stride];
                for (d, &bj) in row.iter_mut().zip(bv) {
                    *d += ai * bj;
                }
            }
        }
    }
    Ok(out)
}

/// `<ell, a> = sum_w ell_w a_w` over the common cap.
pub fn pair(ell: &TruncatedTensor, a: &TruncatedTensor) -> Result<f64> {
    if ell.dim() != a.dim() {
        return domain(format!(
            "alphabet mismatch in pairing: {} vs {}",
            ell.dim(),
            a.dim()
        ));
    }
    let n = ell.coeffs.len().min(a.coeffs.len());
    Ok(ell.coeffs[..n]
        .iter()
        .zip(&a.coeffs[..n])
        .map(|(x, y)| x * y)
        .sum())
}

/// Finite formal sum of words with positive integer multiplicities.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordSum {
    terms: BTreeMap<Word, u64>,
}

impl WordSum {
    pub fn single(word: Word) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(word, 1);
        WordSum { terms }
    }

    pub fn add(&mut self, word: Word, multiplicity: u64) {
        if multiplicity > 0 {
            *self.terms.entry(word).or_insert(0) += multiplicity;
        }
    }

    pub fn merge(&mut self, other: WordSum) {
        for (w, m) in other.terms {
            self.add(w, m);
        }
    }

    pub fn multiplicity(&self, word: &Word) -> u64 {
        self.terms.get(word).copied().unwrap_or(0)
    }

    pub fn total_multiplicity(&self) -> u64 {
        self.terms.values().sum()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Word, u64)> {
        self.terms.iter().map(|(w, &m)| (w, m))
    }

    /// Right-multiply every word by a single letter, `(sum) ⊗ e_letter`.
    pub fn append_letter(&self, letter: u8) -> WordSum {
        WordSum {
            terms: self
                .terms
                .iter()
                .map(|(w, &m)| (w.with_letter(letter), m))
                .collect(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.terms.keys().map(Word::len).max().unwrap_or(0)
    }

    /// `<sum, a>`; every word must fit under the tensor's cap.
    pub fn pair(&self, a: &TruncatedTensor) -> Result<f64> {
        let lab = a.labeling();
        let mut acc = 0.0;
        for (w, &m) in &self.terms {
            acc += m as f64 * a.coeffs[lab.label(w)?];
        }
        Ok(acc)
    }

    /// Resolve words to labels, producing a sparse functional.
    pub fn to_sparse(&self, labeling: &Labeling) -> Result<Vec<(usize, u64)>> {
        self.terms
            .iter()
            .map(|(w, &m)| Ok((labeling.label(w)?, m)))
            .collect()
    }
}

/// Shuffle product `e_I ⧢ e_J`, computed by the recursion
/// `(I'⧢J)·i_n + (I⧢J')·j_m` with `I⧢() = ()⧢I = I`.
pub fn shuffle_words(left: &Word, right: &Word) -> WordSum {
    let mut memo = BTreeMap::new();
    shuffle_rec(left, right, &mut memo)
}

fn shuffle_rec(
    left: &Word,
    right: &Word,
    memo: &mut BTreeMap<(usize, usize), WordSum>,
) -> WordSum {
    if left.is_empty() {
        return WordSum::single(right.clone());
    }
    if right.is_empty() {
        return WordSum::single(left.clone());
    }
    let key = (left.len(), right.len());
    if let Some(hit) = memo.get(&key) {
        return hit.clone();
    }
    let (li, left_rest) = left.split_last().expect("non-empty");
    let (rj, right_rest) = right.split_last().expect("non-empty");
    let mut out = shuffle_rec(&left_rest, right, memo).append_letter(li);
    out.merge(shuffle_rec(left, &right_rest, memo).append_letter(rj));
    memo.insert(key, out.clone());
    out
}

/// Precomputed shuffle functionals for every unordered pair of basis words
/// up to `word_cap`, optionally followed by a trailing letter, resolved
/// against a target labeling.
#[derive(Clone, Debug)]
pub struct PairShuffles {
    dim: usize,
    word_cap: usize,
    target: Labeling,
    /// `(label_i, label_j, [(target label, multiplicity)])` with `label_i <= label_j`.
    entries: Vec<(usize, usize, Vec<(usize, u64)>)>,
}

impl PairShuffles {
    /// Shuffles `e_I ⧢ e_J` for `|I|, |J| <= word_cap` and
    /// `|I| + |J| <= max_combined`, each followed by `suffix` when given.
    pub fn new(dim: usize, word_cap: usize, max_combined: usize, suffix: Option<u8>) -> Result<Self> {
        let words = Labeling::new(dim, word_cap)?;
        let extra = usize::from(suffix.is_some());
        let target = Labeling::new(dim, max_combined + extra)?;
        if let Some(s) = suffix {
            if s as usize >= dim {
                return domain(format!("suffix letter {s} out of range"));
            }
        }
        let all: Vec<Word> = words.words().collect();
        let mut entries = Vec::new();
        for (i, wi) in all.iter().enumerate() {
            for (j, wj) in all.iter().enumerate().skip(i) {
                if wi.len() + wj.len() > max_combined {
                    continue;
                }
                let mut sh = shuffle_words(wi, wj);
                if let Some(s) = suffix {
                    sh = sh.append_letter(s);
                }
                entries.push((i, j, sh.to_sparse(&target)?));
            }
        }
        Ok(PairShuffles {
            dim,
            word_cap,
            target,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word_cap(&self) -> usize {
        self.word_cap
    }

    /// Labeling the functionals are resolved against.
    pub fn target(&self) -> Labeling {
        self.target
    }

    pub fn entries(&self) -> &[(usize, usize, Vec<(usize, u64)>)] {
        &self.entries
    }

    /// Evaluate one functional against raw coefficients in target order.
    #[inline]
    pub fn eval(terms: &[(usize, u64)], coeffs: &[f64]) -> f64 {
        terms.iter().map(|&(k, m)| m as f64 * coeffs[k]).sum()
    }
}

/// `max |a_I a_J - <I⧢J, a>|` over pairs with `|I| + |J| <= max_combined_degree`.
/// Zero (up to roundoff) exactly when `a` is group-like to that degree.
pub fn group_like_defect(a: &TruncatedTensor, max_combined_degree: usize) -> Result<f64> {
    let table = PairShuffles::new(a.dim(), max_combined_degree, max_combined_degree, None)?;
    group_like_defect_with(a, &table)
}

/// [`group_like_defect`] with a reusable shuffle table.
pub fn group_like_defect_with(a: &TruncatedTensor, table: &PairShuffles) -> Result<f64> {
    if a.coeffs[0] != 1.0 {
        return domain(format!(
            "group-like check needs zeroth coefficient 1, got {}",
            a.coeffs[0]
        ));
    }
    if table.dim != a.dim() {
        return domain("alphabet mismatch between tensor and shuffle table");
    }
    if table.target.cap() > a.cap() {
        return domain(format!(
            "combined degree {} exceeds tensor cap {}",
            table.target.cap(),
            a.cap()
        ));
    }
    let c = a.coeffs();
    let mut worst: f64 = 0.0;
    for (i, j, terms) in &table.entries {
        let defect = (c[*i] * c[*j] - PairShuffles::eval(terms, c)).abs();
        worst = worst.max(defect);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(letters: &[u8]) -> Word {
        Word::new(letters.to_vec())
    }

    #[test]
    fn graded_lex_labels() {
        let lab = Labeling::new(2, 3).unwrap();
        assert_eq!(lab.size(), 15);
        assert_eq!(lab.label(&Word::empty()).unwrap(), 0);
        assert_eq!(lab.label(&w(&[0])).unwrap(), 1);
        assert_eq!(lab.label(&w(&[1])).unwrap(), 2);
        assert_eq!(lab.label(&w(&[0, 1])).unwrap(), 4);
        assert_eq!(lab.label(&w(&[1, 1, 1])).unwrap(), 14);
        // brute-force enumeration: length first, then lexicographic
        let mut all = Vec::new();
        for len in 0..=3usize {
            let mut level: Vec<Vec<u8>> = vec![vec![]];
            for _ in 0..len {
                level = level
                    .into_iter()
                    .flat_map(|p| {
                        (0..2u8).map(move |l| {
                            let mut q = p.clone();
                            q.push(l);
                            q
                        })
                    })
                    .collect();
            }
            all.extend(level);
        }
        for (i, letters) in all.iter().enumerate() {
            assert_eq!(lab.label(&w(letters)).unwrap(), i);
            assert_eq!(lab.unlabel(i).unwrap(), w(letters));
        }
    }

    #[test]
    fn label_errors() {
        let lab = Labeling::new(2, 2).unwrap();
        assert!(lab.label(&w(&[0, 0, 0])).is_err());
        assert!(lab.label(&w(&[2])).is_err());
        assert!(lab.unlabel(7).is_err());
        assert!(Labeling::new(0, 2).is_err());
    }

    #[test]
    fn unit_is_identity() {
        let b = TruncatedTensor::from_coeffs(2, 2, vec![0.3, 1.0, -2.0, 0.5, 0.25, -1.5, 4.0]).unwrap();
        let one = TruncatedTensor::unit(2, 2).unwrap();
        assert_eq!(concat_product(&one, &b, 2).unwrap(), b);
        assert_eq!(concat_product(&b, &one, 2).unwrap(), b);
    }

    #[test]
    fn one_dimensional_exponentials_multiply() {
        let (x, y) = (0.7, -1.3);
        let a = TruncatedTensor::exp_of_vector(&[x], 6).unwrap();
        let b = TruncatedTensor::exp_of_vector(&[y], 6).unwrap();
        let ab = concat_product(&a, &b, 6).unwrap();
        let direct = TruncatedTensor::exp_of_vector(&[x + y], 6).unwrap();
        for (p, q) in ab.coeffs().iter().zip(direct.coeffs()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn level_two_matches_brute_convolution() {
        let a = TruncatedTensor::from_coeffs(2, 2, vec![0.5, 1.0, -2.0, 0.3, 0.7, -0.1, 2.0]).unwrap();
        let b = TruncatedTensor::from_coeffs(2, 2, vec![1.5, -0.4, 0.9, 1.1, -0.6, 0.2, 0.8]).unwrap();
        let ab = concat_product(&a, &b, 2).unwrap();
        let lab = Labeling::new(2, 2).unwrap();
        for i in 0..2u8 {
            for j in 0..2u8 {
                let word = w(&[i, j]);
                let mut expected = 0.0;
                // all splittings word = u·v
                for cut in 0..=2 {
                    let u = w(&word.letters()[..cut]);
                    let v = w(&word.letters()[cut..]);
                    expected += a.coeff(&u).unwrap() * b.coeff(&v).unwrap();
                }
                assert!((ab.coeffs()[lab.label(&word).unwrap()] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn product_alphabet_mismatch() {
        let a = TruncatedTensor::unit(2, 2).unwrap();
        let b = TruncatedTensor::unit(3, 2).unwrap();
        assert!(concat_product(&a, &b, 2).is_err());
        assert!(pair(&a, &b).is_err());
    }

    #[test]
    fn shuffle_short_example() {
        let s = shuffle_words(&w(&[1, 2]), &w(&[3]));
        assert_eq!(s.len(), 3);
        assert_eq!(s.multiplicity(&w(&[1, 3, 2])), 1);
        assert_eq!(s.multiplicity(&w(&[3, 1, 2])), 1);
        assert_eq!(s.multiplicity(&w(&[1, 2, 3])), 1);
    }

    #[test]
    fn shuffle_seven_term_example() {
        let s = shuffle_words(&w(&[1, 2, 3]), &w(&[2, 1]));
        let expected: [(&[u8], u64); 7] = [
            (&[1, 2, 3, 2, 1], 1),
            (&[1, 2, 1, 2, 3], 1),
            (&[1, 2, 2, 1, 3], 2),
            (&[1, 2, 2, 3, 1], 2),
            (&[2, 1, 1, 2, 3], 2),
            (&[2, 1, 2, 1, 3], 1),
            (&[2, 1, 2, 3, 1], 1),
        ];
        assert_eq!(s.len(), 7);
        for (letters, m) in expected {
            assert_eq!(s.multiplicity(&w(letters)), m, "word {:?}", letters);
        }
        assert_eq!(s.total_multiplicity(), 10);
    }

    #[test]
    fn shuffle_with_empty() {
        let i = w(&[0, 1, 1]);
        assert_eq!(shuffle_words(&i, &Word::empty()), WordSum::single(i.clone()));
        assert_eq!(shuffle_words(&Word::empty(), &i), WordSum::single(i));
    }

    #[test]
    fn pair_picks_coordinates() {
        let a = TruncatedTensor::from_coeffs(2, 1, vec![1.0, 0.25, -3.0]).unwrap();
        let e1 = TruncatedTensor::basis(2, 1, &w(&[1])).unwrap();
        assert_eq!(pair(&e1, &a).unwrap(), -3.0);
        let zero = TruncatedTensor::zeros(2, 1).unwrap();
        assert_eq!(pair(&zero, &a).unwrap(), 0.0);
    }

    #[test]
    fn exponential_is_group_like() {
        let e = TruncatedTensor::exp_of_vector(&[0.4, -1.1, 0.3], 5).unwrap();
        assert!(group_like_defect(&e, 5).unwrap() < 1e-14);
    }

    #[test]
    fn ito_lift_is_not_group_like() {
        let (db, dt) = (0.37, 0.01);
        let ito = TruncatedTensor::from_coeffs(1, 2, vec![1.0, db, 0.5 * db * db - 0.5 * dt]).unwrap();
        let defect = group_like_defect(&ito, 2).unwrap();
        assert!((defect - dt).abs() < 1e-15);
    }

    #[test]
    fn group_like_needs_unit_scalar() {
        let t = TruncatedTensor::zeros(2, 2).unwrap();
        assert!(group_like_defect(&t, 2).is_err());
    }

    #[test]
    fn worked_q_entry_shuffle() {
        // (111 ⧢ 01) ⊗ 0
        let s = shuffle_words(&w(&[1, 1, 1]), &w(&[0, 1])).append_letter(0);
        assert_eq!(s.multiplicity(&w(&[1, 1, 1, 0, 1, 0])), 1);
        assert_eq!(s.multiplicity(&w(&[1, 1, 0, 1, 1, 0])), 2);
        assert_eq!(s.multiplicity(&w(&[1, 0, 1, 1, 1, 0])), 3);
        assert_eq!(s.multiplicity(&w(&[0, 1, 1, 1, 1, 0])), 4);
        assert_eq!(s.len(), 4);
    }
}
