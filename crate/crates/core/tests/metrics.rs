use std::collections::HashMap;

use lkaguard::dataset::Label;
use lkaguard::metrics::{
    bleu4, classify_metrics, evaluate, invert_report, lcs_len, rouge_l, rouge_n, round_half_up_2, samples_per_second,
    AlertModel, ConfusionCounts, MetricsError, PublishedRow, Reference,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- independent oracles -------------------------------------------------

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Modified n-gram precision counted by linear scans instead of hashing.
fn oracle_clipped(c: &[String], r: &[String], n: usize) -> (f64, f64) {
    if c.len() < n {
        return (0.0, 0.0);
    }
    let grams = |t: &[String]| -> Vec<Vec<String>> { (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect() };
    let cg = grams(c);
    let rg = if r.len() >= n { grams(r) } else { Vec::new() };
    let mut used = vec![false; rg.len()];
    let mut matched = 0.0;
    for g in &cg {
        if let Some(k) = (0..rg.len()).find(|&k| !used[k] && &rg[k] == g) {
            used[k] = true;
            matched += 1.0;
        }
    }
    (matched, cg.len() as f64)
}

fn oracle_bleu(c: &str, r: &str) -> f64 {
    let (c, r) = (oracle_tokens(c), oracle_tokens(r));
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 1..=4 {
        let (m, total) = oracle_clipped(&c, &r, n);
        let p = if n == 1 { m / total } else { (m + 1.0) / (total + 1.0) };
        prod *= p;
    }
    if prod == 0.0 {
        return 0.0;
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * prod.powf(0.25)
}

/// Memoized recursive LCS.
fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const WORDS: [&str; 8] = ["the", "lane", "line", "is", "faded", "ahead", "curve", "car"];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

// ---- classification ------------------------------------------------------

#[test]
fn classify_inverted_row() {
    let m = classify_metrics(&ConfusionCounts::new(213, 60, 484, 243));
    assert_eq!(round_half_up_2(m.accuracy), 69.70);
    assert_eq!(round_half_up_2(m.precision), 78.02);
    assert_eq!(round_half_up_2(m.recall), 46.71);
    assert_eq!(round_half_up_2(m.f1), 58.44);
}

#[test]
fn classify_perfect() {
    let m = classify_metrics(&ConfusionCounts::new(456, 0, 544, 0));
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (100.0, 100.0, 100.0, 100.0));
}

proptest! {
    #[test]
    fn classify_is_scale_consistent(tp in 0u64..300, fp in 0u64..300, tn in 0u64..300, fn_ in 0u64..300, k in 1u64..20) {
        let a = classify_metrics(&ConfusionCounts::new(tp, fp, tn, fn_));
        let b = classify_metrics(&ConfusionCounts::new(k * tp, k * fp, k * tn, k * fn_));
        for (x, y) in [(a.accuracy, b.accuracy), (a.precision, b.precision), (a.recall, b.recall), (a.f1, b.f1)] {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&x));
        }
        let n = (tp + fp + tn + fn_) as f64;
        if n > 0.0 {
            prop_assert!((a.accuracy - 100.0 * (tp + tn) as f64 / n).abs() < 1e-9);
        }
    }
}

// ---- text metrics --------------------------------------------------------

#[test]
fn bleu_identity_and_disjoint() {
    assert_eq!(bleu4("the lane line is faded", "the lane line is faded"), 100.0);
    assert_eq!(bleu4("sharp curve", "faded lane marking ahead"), 0.0);
    assert_eq!(bleu4("", "anything"), 0.0);
}

#[test]
fn bleu_worked_example() {
    let c = "the lane line is faded ahead";
    let r = "the lane line is badly faded ahead";
    // Hand count: unigrams 6/6, bigrams 4/5, trigrams 2/4, 4-grams 1/3;
    // smoothed: 1, 5/6, 3/5, 2/4; BP = exp(1 - 7/6).
    let hand = 100.0 * (1.0f64 - 7.0 / 6.0).exp() * ((5.0f64 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0)).powf(0.25);
    assert!((bleu4(c, r) - hand).abs() < 1e-9);
    assert!((bleu4(c, r) - oracle_bleu(c, r)).abs() < 1e-6);
}

#[test]
fn bleu_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let c = random_sentence(&mut rng, 12);
        let r = random_sentence(&mut rng, 12);
        let got = bleu4(&c, &r);
        assert!((got - oracle_bleu(&c, &r)).abs() < 1e-6, "{c:?} / {r:?}");
        assert!((0.0..=100.0 + 1e-9).contains(&got));
    }
}

#[test]
fn rouge_worked_examples() {
    assert_eq!(rouge_n("the car departs lane", "the car leaves the lane", 1), 60.0);
    assert_eq!(rouge_l("the car departs lane", "the car leaves the lane"), 60.0);
    assert_eq!(rouge_n("faded lane", "faded lane", 2), 100.0);
    assert_eq!(rouge_n("sharp curve", "faded lane", 1), 0.0);
    assert_eq!(rouge_n("anything", "", 1), 0.0);
    assert_eq!(rouge_l("", "the lane"), 0.0);
    // Bigram recall: "the car" matches; reference has 4 bigrams.
    assert_eq!(rouge_n("the car departs lane", "the car leaves the lane", 2), 25.0);
}

#[test]
fn rouge_l_matches_lcs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let c = random_sentence(&mut rng, 12);
        let r = random_sentence(&mut rng, 12);
        let (ct, rt) = (oracle_tokens(&c), oracle_tokens(&r));
        let expected = if rt.is_empty() { 0.0 } else { 100.0 * (oracle_lcs(&ct, &rt) as f64 / rt.len() as f64) };
        assert_eq!(rouge_l(&c, &r), expected);
    }
}

proptest! {
    #[test]
    fn lcs_matches_recursive_oracle(a in proptest::collection::vec(0u8..4, 0..12), b in proptest::collection::vec(0u8..4, 0..12)) {
        let sa: Vec<String> = a.iter().map(|v| v.to_string()).collect();
        let sb: Vec<String> = b.iter().map(|v| v.to_string()).collect();
        prop_assert_eq!(lcs_len(&sa, &sb), oracle_lcs(&sa, &sb));
    }

    #[test]
    fn text_metrics_bounded(words in proptest::collection::vec("[a-d]{1,3}", 0..12), other in proptest::collection::vec("[a-d]{1,3}", 0..12)) {
        let a = words.join(" ");
        let b = other.join(" ");
        for v in [bleu4(&a, &b), rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
        if words.len() >= 4 {
            prop_assert!((bleu4(&a, &a) - 100.0).abs() < 1e-9);
        }
    }
}

// ---- evaluation ----------------------------------------------------------

struct Fixed(&'static str);

impl AlertModel for Fixed {
    type Input = ();
    fn respond(&self, _: &()) -> Result<String, MetricsError> {
        Ok(self.0.to_string())
    }
}

struct Replay;

impl AlertModel for Replay {
    type Input = Reference;
    fn respond(&self, r: &Reference) -> Result<String, MetricsError> {
        Ok(r.text())
    }
}

fn paper_split() -> Vec<Reference> {
    (0..1000)
        .map(|i| {
            if i < 456 {
                Reference {
                    label: Label::Yes,
                    explanation: format!("The lane line {i} is faded ahead."),
                }
            } else {
                Reference {
                    label: Label::No,
                    explanation: String::new(),
                }
            }
        })
        .collect()
}

#[test]
fn always_no_model() {
    let refs = paper_split();
    let r = evaluate(&Fixed("No."), &vec![(); refs.len()], &refs).unwrap();
    assert!((r.accuracy - 54.4).abs() < 1e-9);
    assert_eq!((r.recall, r.f1, r.precision), (0.0, 0.0, 0.0));
    assert_eq!(r.counts, ConfusionCounts::new(0, 0, 544, 456));
    assert_eq!(r.n_text_samples, 456);
    assert!((r.sps - samples_per_second(r.n_samples, r.wall_seconds)).abs() < 1e-9 * r.sps.max(1.0));
}

#[test]
fn malformed_counts_as_no() {
    let refs = paper_split();
    let r = evaluate(&Fixed("hmm"), &vec![(); refs.len()], &refs).unwrap();
    assert_eq!(r.counts.malformed_as_no, 1000);
    assert_eq!(r.counts.tn, 544);
    assert_eq!(r.counts.fn_, 456);
}

#[test]
fn replay_model_is_perfect() {
    let refs = paper_split();
    let r = evaluate(&Replay, &refs, &refs).unwrap();
    assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (100.0, 100.0, 100.0, 100.0));
    assert!((r.bleu4 - 100.0).abs() < 1e-9);
    assert!((r.rouge_l - 100.0).abs() < 1e-9);
    assert!((r.rouge1 - 100.0).abs() < 1e-9);
    let back: lkaguard::metrics::EvalReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn evaluation_errors() {
    assert!(matches!(evaluate(&Fixed("No."), &[], &[]), Err(MetricsError::EmptyEvalSet)));
    let refs = paper_split();
    assert!(matches!(
        evaluate(&Fixed("No."), &[(), ()], &refs[..1]),
        Err(MetricsError::LengthMismatch { .. })
    ));
}

#[test]
fn sps_from_wall_time() {
    assert_eq!(round_half_up_2(samples_per_second(1000, 507.6)), 1.97);
}

// ---- table inversion -----------------------------------------------------

fn row(a: f64, p: f64, r: f64, f: f64) -> PublishedRow {
    PublishedRow {
        accuracy: a,
        precision: p,
        recall: r,
        f1: f,
    }
}

#[test]
fn invert_best_row() {
    let inv = invert_report(&row(69.80, 78.02, 46.71, 58.63), 456, 544);
    assert!(!inv.exact);
    assert_eq!(inv.matrices, vec![ConfusionCounts::new(213, 60, 484, 243)]);
    assert!(inv.max_deviation <= 0.25, "{}", inv.max_deviation);
    let shares = inv.matrices[0].shares();
    assert!((shares[0] - 21.4).abs() <= 0.2);
    assert!((shares[3] - 24.2).abs() <= 0.2);
}

#[test]
fn invert_round_trips_known_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let tp = rng.gen_range(1..456);
        let fp = rng.gen_range(1..544);
        let truth = ConfusionCounts::new(tp, fp, 544 - fp, 456 - tp);
        let m = classify_metrics(&truth);
        let published = row(
            round_half_up_2(m.accuracy),
            round_half_up_2(m.precision),
            round_half_up_2(m.recall),
            round_half_up_2(m.f1),
        );
        let inv = invert_report(&published, 456, 544);
        assert!(inv.exact);
        assert_eq!(inv.matrices, vec![truth]);
    }
}

#[test]
fn invert_impossible_row_falls_back() {
    let inv = invert_report(&row(50.0, 100.0, 100.0, 100.0), 456, 544);
    assert!(!inv.exact);
    assert!(!inv.matrices.is_empty());
    assert!(inv.max_deviation > 10.0);
}
