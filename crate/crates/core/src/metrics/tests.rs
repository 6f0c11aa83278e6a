use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |sub: &[u8]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .map(|bits| (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| a[i]).collect::<Vec<_>>())
        .filter(|s| is_subseq(s))
        .map(|s| s.len())
        .max()
        .unwrap_or(0)
}

fn brute_rouge(a: &[u8], b: &[u8]) -> f64 {
    let l = brute_lcs(a, b) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / a.len() as f64, l / b.len() as f64);
    2.0 * p * r / (p + r)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_dcg(order: &[usize], rels: &[f64], p: usize) -> f64 {
    let mut total = 0.0;
    for (i, &d) in order.iter().enumerate() {
        if i < p {
            total += rels[d] / (i as f64 + 2.0).log2();
        }
    }
    total
}

fn brute_ndcg(order: &[usize], rels: &[f64], p: usize) -> f64 {
    let idcg = permutations(rels.len())
        .iter()
        .map(|o| brute_dcg(o, rels, p))
        .fold(0.0, f64::max);
    if idcg == 0.0 {
        1.0
    } else {
        brute_dcg(order, rels, p) / idcg
    }
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge_l(&words("a dog runs"), &words("a dog runs")).unwrap(), 1.0);
    assert_eq!(rouge_l(&words("a b"), &words("c d")).unwrap(), 0.0);
    assert_abs_diff_eq!(rouge_l(&words("a b c"), &words("a c b")).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    assert!(matches!(rouge_l::<&str>(&[], &words("a")), Err(Error::Usage(_))));
}

#[test]
fn caption_set_examples() {
    let set = vec![words("a b"), words("c d")];
    assert_eq!(caption_set_relevance(&set, &words("a b"), SetAggregation::Max).unwrap(), 1.0);
    let expected = [brute_rouge(b"ad", b"ab"), brute_rouge(b"ad", b"cd")]
        .into_iter()
        .fold(0.0, f64::max);
    assert_abs_diff_eq!(
        caption_set_relevance(&set, &words("a d"), SetAggregation::Max).unwrap(),
        expected,
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(expected, 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(
        caption_set_relevance(&set, &words("a d"), SetAggregation::Mean).unwrap(),
        0.5,
        epsilon = 1e-15
    );
    let single = vec![words("x y z")];
    assert_eq!(
        caption_set_relevance(&single, &words("x z"), SetAggregation::Max).unwrap(),
        rouge_l(&words("x z"), &words("x y z")).unwrap()
    );
    assert!(caption_set_relevance::<&str>(&[], &words("a"), SetAggregation::Max).is_err());
}

#[test]
fn ndcg_examples() {
    let rels = [3.0, 2.0, 0.0];
    let ideal = RankedList { order: vec![0, 1, 2] };
    assert_eq!(ndcg(&ideal, &rels, 3).unwrap(), 1.0);
    let worst = RankedList { order: vec![2, 1, 0] };
    let v = ndcg(&worst, &rels, 3).unwrap();
    let dcg = 2.0 / 3f64.log2() + 1.5;
    let idcg = 3.0 + 2.0 / 3f64.log2();
    assert_abs_diff_eq!(dcg, 2.7619, epsilon = 1e-4);
    assert_abs_diff_eq!(idcg, 4.2619, epsilon = 1e-4);
    assert_abs_diff_eq!(v, dcg / idcg, epsilon = 1e-12);
    assert_abs_diff_eq!(v, 0.648_040_955_5, epsilon = 1e-9);

    for order in permutations(4) {
        assert_eq!(ndcg(&RankedList { order }, &[0.4; 4], 25).unwrap(), 1.0);
    }
    assert_eq!(ndcg(&ideal, &[0.0; 3], 25).unwrap(), 1.0);
    assert!(ndcg(&ideal, &[1.0; 2], 3).is_err());
    assert!(ndcg(&ideal, &rels, 0).is_err());
}

#[test]
fn ndcg_penalizes_swaps_across_cutoff() {
    let rels = [0.9, 0.1, 0.5, 0.3];
    let inside = RankedList { order: vec![0, 2, 3, 1] };
    let swapped = RankedList { order: vec![0, 3, 2, 1] };
    assert!(ndcg(&swapped, &rels, 2).unwrap() < ndcg(&inside, &rels, 2).unwrap());
}

#[test]
fn ranking_breaks_ties_by_index() {
    let r = RankedList::from_scores(&[0.5, 0.9, 0.5, 0.1]);
    assert_eq!(r.order, vec![1, 0, 2, 3]);
    assert_eq!(r.positions(), vec![1, 0, 2, 3]);
}

#[test]
fn recall_examples() {
    let perfect: Vec<RankedList> = (0..3).map(|q| RankedList::from_scores(&std::array::from_fn::<f64, 3, _>(|d| f64::from(u8::from(d == q))))).collect();
    let truth = vec![vec![0], vec![1], vec![2]];
    for k in 1..=3 {
        assert_eq!(recall_at_k(&perfect, &truth, k).unwrap(), 1.0);
    }
    let second: Vec<RankedList> = (0..3)
        .map(|q| RankedList {
            order: {
                let mut o: Vec<usize> = (0..6).filter(|&d| d != q).collect();
                o.insert(1, q);
                o
            },
        })
        .collect();
    assert_eq!(recall_at_k(&second, &truth, 1).unwrap(), 0.0);
    assert_eq!(recall_at_k(&second, &truth, 5).unwrap(), 1.0);
    assert!(recall_at_k(&second, &truth, 0).is_err());
    assert!(recall_at_k(&second, &[vec![0], vec![], vec![1]], 1).is_err());
}

#[test]
fn ensemble_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.6, 0.0]]).unwrap();
    assert_eq!(ensemble_scores(&a, &a).unwrap(), a);
    let s = ensemble_scores(&a, &b).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5, 0.6, 0.0]);
    let argmax = |t: &Tensor<f64>| RankedList::from_scores(t.data()).order[0];
    assert_eq!((argmax(&a), argmax(&b), argmax(&s)), (0, 1, 2));
    assert!(ensemble_scores(&a, &Tensor::zeros(vec![2, 3])).is_err());
}

#[test]
fn tokenizer_normalizes() {
    assert_eq!(tokenize("  A Dog, runs!  fast. "), vec!["a", "dog", "runs", "fast"]);
    assert!(tokenize("... !").is_empty());
}

#[test]
fn relevance_matrix_with_cache() {
    let caps: Vec<Vec<String>> = ["a red car", "a dog", "red dog runs"].iter().map(|s| tokenize(s)).collect();
    let sets = vec![vec![caps[0].clone()], vec![caps[1].clone(), caps[2].clone()]];
    let table = relevance_matrix(&sets, &caps, SetAggregation::Max).unwrap();
    assert_eq!(table.shape(), (2, 3));
    assert_eq!(table.kind, QueryKind::CaptionRetrieval);
    assert_eq!(table.get(0, 0), 1.0);
    assert_eq!(table.get(1, 1), 1.0);
    assert_eq!(table.get(1, 0), rouge_l(&caps[0], &caps[2]).unwrap().max(rouge_l(&caps[0], &caps[1]).unwrap()) as f32);
    let t = table.transposed();
    assert_eq!(t.kind, QueryKind::ImageRetrieval);
    assert_eq!(t.row(0), table.column(0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rel.xrel");
    save_relevance(&path, &table, TAU_ROUGE_L).unwrap();
    assert_eq!(load_relevance(&path, 2, 3, TAU_ROUGE_L).unwrap(), Some(table));
    assert_eq!(load_relevance(&path, 2, 4, TAU_ROUGE_L).unwrap(), None);
    assert_eq!(load_relevance(&path, 2, 3, "spice").unwrap(), None);
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(load_relevance(&path, 2, 3, TAU_ROUGE_L), Err(Error::Format { .. })));
}

#[test]
fn evaluate_both_directions() {
    // Three images; captions 0,1 -> image 0, caption 2 -> image 1, caption 3 -> image 2.
    let s = Tensor::from_rows(&[
        vec![0.9, 0.2, 0.1, 0.0],
        vec![0.1, 0.8, 0.7, 0.2],
        vec![0.0, 0.1, 0.2, 0.9],
    ])
    .unwrap();
    let owner = [0, 0, 1, 2];
    let rel = RelevanceTable::new(QueryKind::CaptionRetrieval, 3, 4, vec![
        1.0, 1.0, 0.2, 0.0, //
        0.3, 0.4, 1.0, 0.1, //
        0.0, 0.1, 0.1, 1.0,
    ])
    .unwrap();
    let report = evaluate(&s, &owner, &rel, 25).unwrap();
    // Caption 1 ranks image 1 first.
    assert_eq!(report.image_retrieval.r1, 0.75);
    assert_eq!(report.image_retrieval.r5, 1.0);
    assert_eq!(report.sentence_retrieval.r1, 2.0 / 3.0);
    let expected_ndcg = (0..4)
        .map(|j| {
            let col: Vec<f64> = (0..3).map(|i| s.at(i, j)).collect();
            brute_ndcg(&RankedList::from_scores(&col).order, &rel.column(j), 25)
        })
        .sum::<f64>()
        / 4.0;
    assert_abs_diff_eq!(report.image_retrieval.ndcg_rouge_l, expected_ndcg, epsilon = 1e-12);
    let json = serde_json::to_value(report).unwrap();
    for key in ["r@1", "r@5", "r@10", "ndcg_rouge_l"] {
        assert!(json["image_retrieval"][key].is_number());
        assert!(json["sentence_retrieval"][key].is_number());
    }
}

proptest! {
    #[test]
    fn rouge_matches_brute_force(a in prop::collection::vec(0u8..4, 1..8), b in prop::collection::vec(0u8..4, 1..8)) {
        let fast = rouge_l(&a, &b).unwrap();
        prop_assert!((fast - brute_rouge(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(fast, rouge_l(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&fast));
        prop_assert_eq!(fast == 1.0, a == b);
    }

    #[test]
    fn ndcg_matches_brute_force(
        rels in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 1..7),
        seed in any::<u64>(),
        p in 1usize..8,
    ) {
        let n = rels.len();
        let perms = permutations(n);
        let order = perms[(seed % perms.len() as u64) as usize].clone();
        let fast = ndcg(&RankedList { order: order.clone() }, &rels, p).unwrap();
        prop_assert!((fast - brute_ndcg(&order, &rels, p)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
    }

    #[test]
    fn ranking_and_recall_match_brute_force(
        scores in prop::collection::vec(prop::collection::vec(0u8..5, 1..=20), 1..6),
        k in 1usize..25,
    ) {
        let docs = scores[0].len();
        let scores: Vec<Vec<f64>> = scores.iter().map(|s| (0..docs).map(|d| f64::from(*s.get(d).unwrap_or(&0))).collect()).collect();
        let lists: Vec<RankedList> = scores.iter().map(|s| RankedList::from_scores(s)).collect();
        let truth: Vec<Vec<usize>> = (0..scores.len()).map(|q| vec![q % docs, (q * 7) % docs]).collect();
        let mut hits = 0;
        for (q, s) in scores.iter().enumerate() {
            // Rank of d = documents strictly better, plus equal ones with smaller index.
            let rank = |d: usize| (0..docs).filter(|&e| s[e] > s[d] || (s[e] == s[d] && e < d)).count();
            for (r, &d) in lists[q].order.iter().enumerate() {
                prop_assert_eq!(rank(d), r);
            }
            if truth[q].iter().any(|&d| rank(d) < k) {
                hits += 1;
            }
        }
        let recall = recall_at_k(&lists, &truth, k).unwrap();
        prop_assert_eq!(recall, hits as f64 / scores.len() as f64);
        prop_assert!(recall_at_k(&lists, &truth, k + 1).unwrap() >= recall);
    }
}
