//! Statistical oracles for the corpus generator.

use proptest::prelude::*;
use proxygap::data::{
    apply_ood_shift, gen_background_traced, gen_dataset, gen_example, DatasetConfig, LabeledExample, OodShift, SlotKind,
    SplitSizes, Theta, PREFIX_LEN,
};
use proxygap::experiment::{PRIMARY_A, PRIMARY_B};
use proxygap::rng::StreamKey;
use proxygap::vocab::{self, bucket_of, Vocabulary, VOCAB_SIZE};

const N: usize = 10_000;
/// Two-sided 99% normal quantile.
const Z99: f64 = 2.576;
/// 0.999 quantile of chi-square with 56 degrees of freedom.
const CHI2_56_999: f64 = 94.46;

fn examples(theta: Theta, n: usize, tag: &str) -> Vec<LabeledExample> {
    let vocab = Vocabulary::build();
    let key = StreamKey::root(2024).child(tag);
    (0..n).map(|i| gen_example(&mut key.child(i).rng(), &theta, &vocab).unwrap()).collect()
}

/// Asserts `hits / n` lies in the 99% band around `p` (exact at p in {0, 1}).
fn assert_rate(hits: usize, n: usize, p: f64, what: &str) {
    let rate = hits as f64 / n as f64;
    let half = Z99 * (p * (1.0 - p) / n as f64).sqrt() + 0.5 / n as f64;
    assert!((rate - p).abs() <= half, "{what}: {rate} vs {p} (band ±{half})");
}

fn theta(rho: f64, eta: f64) -> Theta {
    Theta::new(0.5, rho, eta, 0.5, 3)
}

fn observed_same(e: &LabeledExample) -> Option<bool> {
    Some(bucket_of(e.u1())? == bucket_of(e.u2())?)
}

#[test]
fn informative_fraction_matches_rho() {
    for rho in [0.0, 0.1, 0.6, 0.95, 1.0] {
        let exs = examples(theta(rho, 0.05), N, "rho");
        assert_rate(exs.iter().filter(|e| e.informative).count(), N, rho, &format!("rho {rho}"));
    }
}

#[test]
fn label_flip_rate_matches_eta() {
    for eta in [0.0, 0.01, 0.08, 0.3] {
        let exs = examples(theta(1.0, eta), N, "eta");
        let flips = exs.iter().filter(|e| observed_same(e) != Some(e.label == 1)).count();
        assert_rate(flips, N, eta, &format!("eta {eta}"));
    }
}

#[test]
fn bayes_decoder_reaches_one_minus_eta() {
    for eta in [0.0, 0.08, 0.2] {
        let exs = examples(theta(1.0, eta), N, "bayes");
        let hits = exs
            .iter()
            .filter(|e| u8::from(observed_same(e).expect("informative")) == e.label)
            .count();
        assert_rate(hits, N, 1.0 - eta, &format!("decoder at eta {eta}"));
    }
}

#[test]
fn labels_are_independent_of_tokens_when_rho_is_zero() {
    let exs = examples(theta(0.0, 0.0), N, "indep");
    assert_rate(exs.iter().filter(|e| e.label == 1).count(), N, 0.5, "label rate");
    let decodable: Vec<_> = exs.iter().filter_map(|e| observed_same(e).map(|s| (s, e.label))).collect();
    assert!(decodable.len() > 100);
    let hits = decodable.iter().filter(|(s, l)| u8::from(*s) == *l).count();
    assert_rate(hits, decodable.len(), 0.5, "decoder at rho 0");
}

#[test]
fn uniform_filler_passes_chi_square() {
    let key = StreamKey::root(7).child("chi2");
    let mut counts = [0usize; VOCAB_SIZE];
    for i in 0..N {
        let bg = gen_background_traced(&mut key.child(i).rng(), 0.0, 0.0, 3, PREFIX_LEN).unwrap();
        for (t, k) in bg.tokens.iter().zip(&bg.kinds) {
            assert_ne!(*k, SlotKind::Motif);
            if *k == SlotKind::Uniform {
                counts[*t as usize] += 1;
            }
        }
    }
    let content = &counts[vocab::CONTENT_START as usize..];
    let total: usize = content.iter().sum();
    assert_eq!(total, counts.iter().sum::<usize>());
    let expected = total as f64 / content.len() as f64;
    let chi2: f64 = content.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_56_999, "chi-square {chi2}");
}

/// Conditional bigram entropy `H(x_t | x_{t-1})` of background prefixes, in bits.
fn bigram_entropy(exs: &[LabeledExample]) -> f64 {
    let mut pair = vec![0f64; VOCAB_SIZE * VOCAB_SIZE];
    let mut first = [0f64; VOCAB_SIZE];
    for e in exs {
        for w in e.tokens[..PREFIX_LEN].windows(2) {
            pair[w[0] as usize * VOCAB_SIZE + w[1] as usize] += 1.0;
            first[w[0] as usize] += 1.0;
        }
    }
    let total: f64 = first.iter().sum();
    pair.iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(i, &c)| -c / total * (c / first[i / VOCAB_SIZE]).log2())
        .sum()
}

#[test]
fn background_heavy_corpus_has_lower_bigram_entropy() {
    let a = bigram_entropy(&examples(PRIMARY_A, 5_000, "ent-a"));
    let b = bigram_entropy(&examples(PRIMARY_B, 5_000, "ent-b"));
    assert!(a < b, "A {a:.3} bits, B {b:.3} bits");
    // a fully templated prefix is deterministic given depth
    let templated = examples(Theta::new(1.0, 0.5, 0.0, 1.0, 1), 500, "ent-t");
    assert!(templated.iter().all(|e| e.tokens[..PREFIX_LEN] == templated[0].tokens[..PREFIX_LEN]));
    assert!(bigram_entropy(&templated) < a);
}

fn background_histogram(exs: &[LabeledExample]) -> Vec<f64> {
    let mut h = vec![0f64; VOCAB_SIZE];
    for e in exs {
        for &t in &e.tokens[..PREFIX_LEN] {
            h[t as usize] += 1.0;
        }
    }
    let total: f64 = h.iter().sum();
    h.iter().map(|c| c / total).collect()
}

#[test]
fn ood_split_shifts_background_but_not_the_task() {
    let sizes = SplitSizes {
        n_train: 10,
        n_val: 10,
        n_test: N,
        n_ood: N,
    };
    let set = gen_dataset(&DatasetConfig::new(PRIMARY_A, sizes, 5)).unwrap();
    let (p, q) = (background_histogram(&set.test), background_histogram(&set.ood));
    let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!(tv > 0.1, "total variation {tv}");
    for (what, f) in [
        ("label", (|e: &LabeledExample| e.label == 1) as fn(&LabeledExample) -> bool),
        ("informative", |e| e.informative),
        ("u1 bucket 1", |e| e.bucket_u1 == Some(1)),
        ("u2 bucket 1", |e| e.bucket_u2 == Some(1)),
    ] {
        let a = set.test.iter().filter(|e| f(e)).count() as f64 / N as f64;
        let b = set.ood.iter().filter(|e| f(e)).count() as f64 / N as f64;
        // two-sample 99% band
        let pooled = (a + b) / 2.0;
        let half = Z99 * (2.0 * pooled * (1.0 - pooled) / N as f64).sqrt() + 1.0 / N as f64;
        assert!((a - b).abs() <= half, "{what}: test {a}, ood {b}");
    }
}

#[test]
fn ood_transform_keeps_suffixes_bit_identical() {
    let exs = examples(PRIMARY_B, N, "ood-suffix");
    let shift = OodShift::seeded(&StreamKey::root(3).child("shift"), PRIMARY_B.b, PRIMARY_B.p);
    let shifted = apply_ood_shift(&exs, &shift);
    let mut changed = 0;
    for (a, b) in exs.iter().zip(&shifted) {
        assert_eq!(a.suffix(), b.suffix());
        assert_eq!((a.label, a.informative, a.bucket_u1, a.bucket_u2), (b.label, b.informative, b.bucket_u1, b.bucket_u2));
        changed += usize::from(a.tokens[..PREFIX_LEN] != b.tokens[..PREFIX_LEN]);
    }
    assert!(changed > N * 9 / 10, "{changed} of {N} prefixes changed");
    assert_eq!(apply_ood_shift(&exs, &OodShift::identity()), exs);
}

fn arb_theta() -> impl Strategy<Value = Theta> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=0.5f64, 0.0..=1.0f64, 1u32..7).prop_map(|(b, rho, eta, p, d)| Theta::new(b, rho, eta, p, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn examples_are_well_formed(theta in arb_theta(), seed in any::<u64>()) {
        let vocab = Vocabulary::build();
        let e = gen_example(&mut StreamKey::root(seed).rng(), &theta, &vocab).unwrap();
        prop_assert_eq!(e.tokens[0], vocab::OPEN);
        prop_assert!(e.tokens[..PREFIX_LEN].iter().all(|&t| vocab::is_scaffold(t) || vocab::is_content(t)));
        let s = e.suffix();
        prop_assert_eq!([s[0], s[2], s[4], s[5]], [vocab::MARKER, vocab::MARKER, vocab::QUERY, vocab.answer_for(e.label)]);
        prop_assert!(!vocab::is_scaffold(s[1]) && !vocab::is_scaffold(s[3]));
        prop_assert_eq!(e.bucket_u1, bucket_of(e.u1()));
        prop_assert_eq!(e.bucket_u2, bucket_of(e.u2()));
        if e.informative {
            prop_assert!(e.bucket_u1.is_some() && e.bucket_u2.is_some());
        }
        if theta.eta == 0.0 && e.informative {
            prop_assert_eq!(observed_same(&e), Some(e.label == 1));
        }
        let shifted = OodShift::seeded(&StreamKey::root(seed).child("s"), theta.b, theta.p).apply(0, &e);
        prop_assert_eq!(shifted.suffix(), e.suffix());
    }

    #[test]
    fn scaffold_nesting_never_exceeds_depth(theta in arb_theta(), seed in any::<u64>()) {
        let bg = gen_background_traced(&mut StreamKey::root(seed).rng(), theta.b, theta.p, theta.d, PREFIX_LEN).unwrap();
        prop_assert!(bg.depth >= 1 && bg.depth <= theta.d);
        let mut open = 0i32;
        for &t in &bg.tokens {
            match t {
                vocab::OPEN => open += 1,
                vocab::CLOSE => open -= 1,
                _ => {}
            }
            prop_assert!(open >= 0 && open <= bg.depth as i32);
        }
    }
}
