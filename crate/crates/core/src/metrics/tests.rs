use super::*;
use crate::corpus::{DictionaryConstruction, Lang};
use crate::lm::ModelConfig;
use proptest::prelude::*;

fn direct_js(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

fn hist(counts: &[u64]) -> HashMap<usize, u64> {
    counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i, c)).collect()
}

fn normalize(counts: &[u64]) -> Vec<f64> {
    let n: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[test]
fn js_worked_example() {
    let js = js_divergence_counts(&hist(&[3, 1]), &hist(&[1, 3])).unwrap();
    assert!((js - direct_js(&[0.75, 0.25], &[0.25, 0.75])).abs() < 1e-15);
    assert!((js - 0.1308).abs() < 1e-4);
    assert!((js / std::f64::consts::LN_2 - 0.1887).abs() < 1e-4);
}

#[test]
fn js_extremes() {
    assert_eq!(js_divergence_counts(&hist(&[2, 5, 1]), &hist(&[4, 10, 2])).unwrap(), 0.0);
    let disjoint = js_divergence_counts(&hist(&[1, 0]), &hist(&[0, 1])).unwrap();
    assert!((disjoint - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(js_divergence_counts(&hist(&[]), &hist(&[1])), Err(Error::EmptyCorpus)));
}

proptest! {
    #[test]
    fn js_matches_definition(a in prop::collection::vec(0u64..20, 6), b in prop::collection::vec(0u64..20, 6)) {
        prop_assume!(a.iter().sum::<u64>() > 0 && b.iter().sum::<u64>() > 0);
        let js = js_divergence_counts(&hist(&a), &hist(&b)).unwrap();
        prop_assert!((js - direct_js(&normalize(&a), &normalize(&b))).abs() < 1e-12);
        let back = js_divergence_counts(&hist(&b), &hist(&a)).unwrap();
        prop_assert!((js - back).abs() < 1e-15);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
    }
}

#[test]
fn js_over_surfaces_ignores_the_target_prefix() {
    use crate::bpe::{BilingualVocab, BpeModel};
    let lines = vec!["ab ab ba".to_string()];
    let m = BpeModel::train(&lines, 12).unwrap();
    let vocab = BilingualVocab::new(m.clone(), m).unwrap();
    let e = Corpus::new(vec![vocab.encode(Lang::Source, "ab ba")], Lang::Source, "x");
    let f = Corpus::new(vec![vocab.encode(Lang::Target, "ab ba")], Lang::Target, "x");
    assert_eq!(js_divergence(&e, &f, &vocab).unwrap(), 0.0);
}

fn dict(pairs: Vec<(TokenId, TokenId)>) -> GroundTruthDictionary {
    GroundTruthDictionary {
        pairs,
        construction: DictionaryConstruction::IdentityPrefix,
    }
}

#[test]
fn bli_counts_hits() {
    let m = Mapping {
        target_start: 10,
        phi: vec![5, 6, 7],
        scores: vec![1.0; 3],
    };
    assert_eq!(bli_p_at_1(&m, &dict(vec![(5, 10), (6, 11), (7, 12)])).unwrap(), 1.0);
    assert_eq!(bli_p_at_1(&m, &dict(vec![(5, 10), (7, 11)])).unwrap(), 0.5);
    assert!(bli_p_at_1(&m, &dict(vec![])).is_err());
    assert!(matches!(bli_p_at_1(&m, &dict(vec![(5, 13)])), Err(Error::IdOutOfRange { .. })));
}

/// Direct enumeration of the mutual and forward nearest-neighbour pairs.
fn alignment_oracle(e: &[Vec<f64>], f: &[Vec<f64>]) -> (f64, f64) {
    let cos = |a: &Vec<f64>, b: &Vec<f64>| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let best_f = |i: usize| {
        let s: Vec<f64> = f.iter().map(|y| cos(&e[i], y)).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.iter().position(|&v| v == m).unwrap()
    };
    let best_e = |j: usize| {
        let s: Vec<f64> = e.iter().map(|x| cos(x, &f[j])).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.iter().position(|&v| v == m).unwrap()
    };
    let score = |pred: Vec<(usize, usize)>| {
        let tp = pred.iter().filter(|(a, b)| a == b).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (pred.len() as f64 + e.len().min(f.len()) as f64)
        }
    };
    let mutual = (0..e.len()).filter(|&i| best_e(best_f(i)) == i).map(|i| (i, best_f(i))).collect();
    let forward = (0..e.len()).map(|i| (i, best_f(i))).collect();
    (score(mutual), score(forward))
}

fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), n)
}

proptest! {
    #[test]
    fn alignment_matches_enumeration((e, f) in (1usize..10).prop_flat_map(|n| (vecs(n), vecs(n)))) {
        let (m, fw) = word_alignment_f1(&e, &f);
        let (om, ofw) = alignment_oracle(&e, &f);
        prop_assert!((m - om).abs() < 1e-12);
        prop_assert!((fw - ofw).abs() < 1e-12);
    }

    #[test]
    fn retrieval_matches_enumeration((e, f) in (2usize..10).prop_flat_map(|n| (vecs(n), vecs(n)))) {
        let got = retrieval_f1(&e, &f).unwrap();
        let (_, oracle) = alignment_oracle(&e, &f);
        // forward nearest neighbour with one prediction per query is exactly retrieval accuracy
        prop_assert!((got - oracle).abs() < 1e-12);
    }
}

#[test]
fn identical_representations_score_one() {
    let v: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64, (i * i) as f64]).collect();
    assert_eq!(word_alignment_f1(&v, &v), (1.0, 1.0));
    assert_eq!(retrieval_f1(&v, &v).unwrap(), 1.0);
    assert!(retrieval_f1(&v[..1], &v[..1]).is_err());
}

fn zero_model(v: usize, boundary: usize) -> ModelParams<f32> {
    let mut p = ModelParams::zeros(ModelConfig::tiny(v), boundary).unwrap();
    p.data.iter_mut().for_each(|x| *x = 0.0);
    p
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let p = zero_model(40, 20);
    let text = vec![vec![5u32, 6, 7], vec![8, 9]];
    for obj in [Objective::Clm, Objective::Mlm] {
        let s = Scorer::new(&p, obj);
        assert!((s.perplexity(&text).unwrap() - 40.0).abs() < 1e-3);
        let half = s.clone().with_output_range(Some(0..20));
        assert!((half.perplexity(&text).unwrap() - 20.0).abs() < 1e-3);
    }
    assert!(matches!(Scorer::new(&p, Objective::Clm).perplexity(&[]), Err(Error::EmptyCorpus)));
}

#[test]
fn uniform_model_entropy_bound() {
    let p = zero_model(40, 20);
    let m = Mapping {
        target_start: 25,
        phi: (5..20).collect(),
        scores: vec![0.0; 15],
    };
    let f = vec![vec![25u32, 26, 39]];
    let b = entropy_bound(&Scorer::new(&p, Objective::Clm), &f, &m, 0.5).unwrap();
    assert!((b.h_e_given_f - 40f64.ln()).abs() < 1e-5);
    assert!((b.bound - b.h_e_given_f - 0.5).abs() < 1e-12);
    assert!(entropy_bound(&Scorer::new(&p, Objective::Clm), &f, &m, -1.0).is_err());
    assert_eq!(decipher_sentences(&[vec![25, 50]], &m), vec![vec![5, UNK]]);
}

fn trained_like(seed: u64) -> ModelParams<f32> {
    ModelParams::init(ModelConfig::tiny(40), 20, seed).unwrap()
}

#[test]
fn probe_at_zero_swaps_is_plain_perplexity() {
    let p = trained_like(1);
    let text = vec![vec![5u32, 6, 7, 8], vec![9, 10, 5]];
    for obj in [Objective::Clm, Objective::Mlm] {
        let s = Scorer::new(&p, obj);
        let rows = permutation_probe(&s, &text, 5..20, &[0, 1, 3], &[0, 1]).unwrap();
        let base = s.perplexity(&text).unwrap();
        for r in rows.iter().filter(|r| r.k == 0) {
            assert_eq!(r.ppl.to_bits(), base.to_bits());
        }
        assert_eq!(rows.len(), 6);
        let summary = probe_summary(&rows);
        assert_eq!(summary.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 3]);
        assert_eq!(summary[0].2, Some(0.0));
    }
}

#[test]
fn swapping_absent_ids_changes_nothing() {
    let p = trained_like(2);
    let text = vec![vec![5u32, 6, 5, 6]];
    let s = Scorer::new(&p, Objective::Clm);
    // only ids 10 and 11 are eligible, neither occurs in the text
    let rows = permutation_probe(&s, &text, 10..12, &[0, 1], &[4]).unwrap();
    assert_eq!(rows[0].ppl, rows[1].ppl);
    assert!(matches!(
        permutation_probe(&s, &text, 10..12, &[2], &[4]),
        Err(Error::TooManySwaps { requested: 2, available: 1 })
    ));
}

#[test]
fn probe_csv_has_header() {
    let csv = probe_csv(&[ProbeRow { k: 0, seed: 1, ppl: 2.5 }]).unwrap();
    assert_eq!(csv, "k,seed,ppl\n0,1,2.5\n");
}

#[test]
fn representations_follow_pairs() {
    let p = trained_like(3);
    let pair = ParallelPair {
        source: vec![5, 6, 7],
        target: vec![5, 6, 7],
        source_words: vec![vec![0, 1], vec![2]],
        target_words: vec![vec![0, 1], vec![2]],
    };
    let other = ParallelPair {
        source: vec![8, 9],
        target: vec![8, 9],
        source_words: vec![vec![0], vec![1]],
        target_words: vec![vec![0], vec![1]],
    };
    let pairs = vec![pair, other];
    let states = PairStates::compute(&p, &p, &pairs, &[0, 1, 2], AttentionMode::Bidirectional).unwrap();
    let a = contextual_alignment_f1(&states, &pairs).unwrap();
    assert_eq!(a.mutual, 1.0);
    assert_eq!(sentence_retrieval_f1(&states).unwrap(), 1.0);
    assert!(PairStates::compute(&p, &p, &pairs, &[3], AttentionMode::Bidirectional).is_err());
}
