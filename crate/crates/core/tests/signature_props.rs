use proptest::prelude::*;
use sigvol::signature::{signature, signature_by_products, signature_stream, time_augment, SampledPath};
use sigvol::tensor::{concat_product, group_like_defect, shuffle_words, Labeling, TruncatedTensor, Word};

fn path_strategy(dim: usize) -> impl Strategy<Value = SampledPath> {
    prop::collection::vec((0.01f64..0.2, prop::collection::vec(-0.5f64..0.5, dim)), 2..20).prop_map(move |steps| {
        let mut times = vec![0.0];
        let mut values = vec![0.0; dim];
        for (dt, inc) in steps {
            times.push(times.last().unwrap() + dt);
            let prev = values.len() - dim;
            for c in 0..dim {
                values.push(values[prev + c] + inc[c]);
            }
        }
        SampledPath::new(times, dim, values).unwrap()
    })
}

fn word_strategy(dim: u8) -> impl Strategy<Value = Word> {
    prop::collection::vec(0..dim, 0..5).prop_map(Word::new)
}

fn close(a: &TruncatedTensor, b: &TruncatedTensor, tol: f64) -> bool {
    a.coeffs().iter().zip(b.coeffs()).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn chen_split(path in path_strategy(2), frac in 0.0f64..1.0) {
        let last = path.len() - 1;
        let k = ((frac * last as f64) as usize).clamp(1, last - 1);
        let left = signature(&path.slice(0, k).unwrap(), 5).unwrap();
        let right = signature(&path.slice(k, last).unwrap(), 5).unwrap();
        let joined = concat_product(&left, &right, 5).unwrap();
        prop_assert!(close(&joined, &signature(&path, 5).unwrap(), 1e-12));
    }

    #[test]
    fn horner_matches_products(path in path_strategy(3)) {
        prop_assert!(close(&signature(&path, 4).unwrap(), &signature_by_products(&path, 4).unwrap(), 1e-12));
    }

    #[test]
    fn signatures_are_group_like(path in path_strategy(2)) {
        let s = signature(&path, 6).unwrap();
        prop_assert!(group_like_defect(&s, 6).unwrap() < 1e-10);
    }

    #[test]
    fn time_words_are_factorial_powers(path in path_strategy(1)) {
        let aug = time_augment(&path);
        let stream = signature_stream(&aug, 5).unwrap();
        let lab = Labeling::new(2, 5).unwrap();
        for (t, s) in stream.times().iter().zip(stream.sigs()) {
            let mut fact = 1.0;
            for k in 1..=5usize {
                fact *= k as f64;
                let idx = lab.label(&Word::new(vec![0u8; k])).unwrap();
                prop_assert!((s.coeffs()[idx] - t.powi(k as i32) / fact).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shuffle_counts_are_binomial(a in word_strategy(3), b in word_strategy(3)) {
        let sh = shuffle_words(&a, &b);
        let (n, k) = ((a.len() + b.len()) as u64, a.len() as u64);
        let binom = (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1));
        prop_assert_eq!(sh.total_multiplicity(), binom);
        prop_assert_eq!(sh, shuffle_words(&b, &a));
    }

    #[test]
    fn refining_a_linear_piece_changes_nothing(path in path_strategy(2)) {
        // inserting a midpoint on a linear segment leaves the signature unchanged
        let mut times = path.times().to_vec();
        let mut values: Vec<f64> = (0..path.len()).flat_map(|k| path.point(k).to_vec()).collect();
        let mid: Vec<f64> = path.point(0).iter().zip(path.point(1)).map(|(a, b)| 0.5 * (a + b)).collect();
        times.insert(1, 0.5 * (times[0] + times[1]));
        for (c, v) in mid.into_iter().enumerate() {
            values.insert(2 + c, v);
        }
        let refined = SampledPath::new(times, 2, values).unwrap();
        prop_assert!(close(&signature(&refined, 5).unwrap(), &signature(&path, 5).unwrap(), 1e-12));
    }
}
