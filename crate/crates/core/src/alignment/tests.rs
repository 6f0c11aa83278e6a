use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::numerics::gradcheck::{check, CheckOptions};
use crate::numerics::rng::{stream, Stream};

fn set(rows: &[&[f64]]) -> ContextualizedSet<f64> {
    let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let n = t.rows();
    ContextualizedSet::new(t, PadMask::all(n)).unwrap()
}

fn matrix(rows: &[&[f64]]) -> AlignmentMatrix<f64> {
    let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let (n, m) = (t.rows(), t.cols());
    AlignmentMatrix::new(t, PadMask::all(n), PadMask::all(m)).unwrap()
}

/// Independent evaluation of every pooling kind straight from the
/// definitions, scanning the full matrix and skipping masked cells.
fn brute(a: &AlignmentMatrix<f64>, kind: PoolingKind) -> f64 {
    let (n, m) = (a.region_mask.len(), a.word_mask.len());
    let mut mrsw = 0.0;
    let mut words = 0usize;
    for j in 0..m {
        if !a.word_mask.is_real(j) {
            continue;
        }
        words += 1;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if a.region_mask.is_real(i) && a.at(i, j) > best {
                best = a.at(i, j);
            }
        }
        mrsw += best;
    }
    let mut mwsr = 0.0;
    for i in 0..n {
        if !a.region_mask.is_real(i) {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..m {
            if a.word_mask.is_real(j) && a.at(i, j) > best {
                best = a.at(i, j);
            }
        }
        mwsr += best;
    }
    match kind {
        PoolingKind::MrSw => mrsw,
        PoolingKind::MwSr => mwsr,
        PoolingKind::Symm => mrsw + mwsr,
        PoolingKind::MrAvgW => mrsw / words as f64,
    }
}

fn random_matrix(n: usize, m: usize, seed: u64) -> AlignmentMatrix<f64> {
    let mut rng = stream(seed, Stream::Check);
    let data = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rmask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let mut wmask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
    rmask[rng.gen_range(0..n)] = true;
    wmask[rng.gen_range(0..m)] = true;
    AlignmentMatrix::new(
        Tensor::new(vec![n, m], data).unwrap(),
        PadMask::new(rmask).unwrap(),
        PadMask::new(wmask).unwrap(),
    )
    .unwrap()
}

#[test]
fn alignment_matrix_examples() {
    let v = set(&[&[1.0, 2.0], &[1.0, 2.0]]);
    let a = alignment_matrix(&v, &v).unwrap();
    for x in a.values.data() {
        assert_abs_diff_eq!(*x, 1.0, epsilon = 1e-12);
    }
    let a = alignment_matrix(&set(&[&[1.0, 0.0]]), &set(&[&[0.0, 3.0], &[0.0, -1.0]])).unwrap();
    assert_eq!(a.values.data(), &[0.0, 0.0]);
    let a = alignment_matrix(&set(&[&[3.0, 4.0]]), &set(&[&[4.0, 3.0], &[3.0, 4.0]])).unwrap();
    assert_abs_diff_eq!(a.at(0, 0), 0.96, epsilon = 1e-12);
    assert_abs_diff_eq!(a.at(0, 1), 1.0, epsilon = 1e-12);
    assert!(alignment_matrix(&set(&[&[1.0]]), &set(&[&[1.0, 2.0]])).is_err());
}

#[test]
fn pooling_examples() {
    let eye = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert_eq!(pool(&eye, PoolingKind::MrSw).unwrap(), 2.0);
    assert_eq!(pool(&eye, PoolingKind::MwSr).unwrap(), 2.0);
    assert_eq!(pool(&eye, PoolingKind::Symm).unwrap(), 4.0);
    let single = matrix(&[&[0.5]]);
    assert_eq!(pool(&single, PoolingKind::MrSw).unwrap(), 0.5);
    assert_eq!(pool(&single, PoolingKind::MwSr).unwrap(), 0.5);
    assert_eq!(pool(&single, PoolingKind::Symm).unwrap(), 1.0);
    assert_eq!(pool(&single, PoolingKind::MrAvgW).unwrap(), 0.5);
    let a = matrix(&[&[0.2, 0.8], &[0.4, 0.6]]);
    assert_abs_diff_eq!(pool(&a, PoolingKind::MrSw).unwrap(), 1.2, epsilon = 1e-12);
    assert_abs_diff_eq!(pool(&a, PoolingKind::MrAvgW).unwrap(), 0.6, epsilon = 1e-12);
}

#[test]
fn pooling_rejects_fully_masked_axis() {
    let mut a = matrix(&[&[0.2, 0.8]]);
    a.word_mask = PadMask::padded_to(&PadMask::all(0), 2);
    assert!(matches!(pool(&a, PoolingKind::MrSw), Err(Error::Usage(_))));
}

#[test]
fn similarity_matrix_examples() {
    let img = set(&[&[1.0, 0.2], &[0.1, 1.0], &[-0.5, 0.3]]);
    let cap = set(&[&[0.9, 0.1], &[0.0, 1.0]]);
    let s = similarity_matrix(&[img.clone()], &[cap.clone()], PoolingKind::MrSw).unwrap();
    assert_eq!(s.item(), pool(&alignment_matrix(&img, &cap).unwrap(), PoolingKind::MrSw).unwrap());

    let permuted = set(&[&[-0.5, 0.3], &[1.0, 0.2], &[0.1, 1.0]]);
    let caps = [cap.clone(), set(&[&[0.3, -0.7]])];
    let a = similarity_matrix(&[img.clone()], &caps, PoolingKind::MrSw).unwrap();
    let b = similarity_matrix(&[permuted], &caps, PoolingKind::MrSw).unwrap();
    assert_eq!(a.data(), b.data());

    let s = similarity_matrix(&[img.clone(), img], &caps, PoolingKind::Symm).unwrap();
    assert_eq!(s.row(0), s.row(1));
    assert!(similarity_matrix::<f64>(&[], &caps, PoolingKind::MrSw).is_err());
}

#[test]
fn stopword_mask_examples() {
    let plain = TokenSeq::new(vec![3, 4], vec![false, false]).unwrap();
    assert_eq!(apply_stopword_mask(&plain).unwrap(), plain);

    let the_dog = TokenSeq::new(vec![1, 4], vec![true, false]).unwrap();
    let masked = apply_stopword_mask(&the_dog).unwrap();
    assert_eq!(masked.mask, the_dog.mask);
    assert_eq!(masked.pool_mask.as_slice(), &[false, true]);

    let a = matrix(&[&[0.9, 0.1], &[0.3, 0.7]]);
    let masked_a = AlignmentMatrix::new(a.values.clone(), a.region_mask.clone(), masked.pool_mask.clone()).unwrap();
    let surviving = matrix(&[&[0.1], &[0.7]]);
    assert_eq!(pool(&masked_a, PoolingKind::MrSw).unwrap(), brute(&surviving, PoolingKind::MrSw));

    let all_stop = TokenSeq::new(vec![1, 2], vec![true, true]).unwrap();
    assert!(matches!(apply_stopword_mask(&all_stop), Err(Error::Usage(_))));
}

#[test]
fn grounding_examples() {
    let a = matrix(&[&[0.9, 0.1, 0.2], &[0.0, 0.8, 0.3], &[0.1, 0.2, 0.7]]);
    let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let boxes = vec![[0.0, 0.0, 0.5, 0.5], [0.5, 0.0, 1.0, 0.5], [0.0, 0.5, 1.0, 1.0]];
    let g = export_groundings(&a, &tokens, &boxes).unwrap();
    for (j, r) in g.iter().enumerate() {
        assert_eq!(r.region_index, j);
        assert_eq!(r.bbox, boxes[j]);
        assert_eq!(r.score, a.at(j, j));
    }
    assert_eq!(
        g[0].to_json_line(),
        r#"{"token":"a","word_index":0,"region_index":0,"box":[0.000000,0.000000,0.500000,0.500000],"score":0.900000}"#
    );

    let one = matrix(&[&[0.3, -0.2]]);
    let g = export_groundings(&one, &tokens[..2], &boxes[..1]).unwrap();
    assert!(g.iter().all(|r| r.region_index == 0));

    let mut masked = a.clone();
    masked.word_mask = PadMask::new(vec![true, false, true]).unwrap();
    let g = export_groundings(&masked, &tokens, &boxes).unwrap();
    assert_eq!(g.iter().map(|r| r.word_index).collect::<Vec<_>>(), vec![0, 2]);
}

#[test]
fn grounding_ties_go_to_lowest_region() {
    let a = matrix(&[&[0.5], &[0.5]]);
    let g = export_groundings(&a, &["w".to_string()], &[[0.0; 4], [0.0; 4]]).unwrap();
    assert_eq!(g[0].region_index, 0);
}

#[test]
fn tape_batch_similarity_matches_plain_and_gradients() {
    let mut rng = stream(3, Stream::Check);
    let mut r = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
    };
    let inputs = vec![r(vec![3, 4]), r(vec![3, 4]), r(vec![2, 4]), r(vec![2, 4])];
    let rmasks = [PadMask::all(3), PadMask::prefix(2, 3)];
    let wmasks = [PadMask::all(2), PadMask::prefix(1, 2)];
    for kind in PoolingKind::ALL {
        let plain = similarity_matrix(
            &[
                ContextualizedSet::new(inputs[0].clone(), rmasks[0].clone()).unwrap(),
                ContextualizedSet::new(inputs[1].clone(), rmasks[1].clone()).unwrap(),
            ],
            &[
                ContextualizedSet::new(inputs[2].clone(), wmasks[0].clone()).unwrap(),
                ContextualizedSet::new(inputs[3].clone(), wmasks[1].clone()).unwrap(),
            ],
            kind,
        )
        .unwrap();
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            batch_similarity_on(
                t,
                &[(v[0], &rmasks[0]), (v[1], &rmasks[1])],
                &[(v[2], &wmasks[0]), (v[3], &wmasks[1])],
                kind,
            )
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
        let s = build(&mut tape, &vars).unwrap();
        for (x, y) in tape.value(s).data().iter().zip(plain.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let w = [0.3, -1.2, 0.7, 0.4];
        let report = check(
            kind.name(),
            &inputs,
            |t, v| {
                let s = build(t, v)?;
                t.weighted_sum(s, w.to_vec())
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{kind:?} {}", report.max_rel_error);
    }
}

#[test]
fn duplicated_word_columns_double_sum_but_not_mean() {
    let a = matrix(&[&[0.2, 0.8], &[0.4, 0.6]]);
    let dup = matrix(&[&[0.2, 0.2, 0.8, 0.8], &[0.4, 0.4, 0.6, 0.6]]);
    assert_eq!(pool(&dup, PoolingKind::MrSw).unwrap(), 2.0 * pool(&a, PoolingKind::MrSw).unwrap());
    assert_abs_diff_eq!(
        pool(&dup, PoolingKind::MrAvgW).unwrap(),
        pool(&a, PoolingKind::MrAvgW).unwrap(),
        epsilon = 1e-15
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pooling_matches_brute_force(n in 1usize..=10, m in 1usize..=10, seed in 0u64..100_000) {
        let a = random_matrix(n, m, seed);
        for kind in PoolingKind::ALL {
            prop_assert_eq!(pool(&a, kind).unwrap(), brute(&a, kind));
        }
        let symm = pool(&a, PoolingKind::Symm).unwrap();
        let sum = pool(&a, PoolingKind::MrSw).unwrap() + pool(&a, PoolingKind::MwSr).unwrap();
        prop_assert_eq!(symm.to_bits(), sum.to_bits());
    }

    #[test]
    fn mrsw_is_monotone(n in 1usize..=8, m in 1usize..=8, seed in 0u64..100_000, bump in 0.0f64..1.0) {
        let a = random_matrix(n, m, seed);
        let before = pool(&a, PoolingKind::MrSw).unwrap();
        let mut b = a.clone();
        let idx = (seed as usize) % (n * m);
        b.values.data_mut()[idx] += bump;
        prop_assert!(pool(&b, PoolingKind::MrSw).unwrap() >= before);
    }

    #[test]
    fn masked_padding_changes_nothing(n in 1usize..=8, m in 1usize..=8, seed in 0u64..100_000) {
        let a = random_matrix(n, m, seed);
        let mut data = Vec::new();
        for i in 0..=n {
            for j in 0..=m {
                data.push(if i < n && j < m { a.at(i, j) } else { 5.0 });
            }
        }
        let padded = AlignmentMatrix::new(
            Tensor::new(vec![n + 1, m + 1], data).unwrap(),
            a.region_mask.padded_to(n + 1),
            a.word_mask.padded_to(m + 1),
        ).unwrap();
        for kind in PoolingKind::ALL {
            prop_assert_eq!(pool(&padded, kind).unwrap(), pool(&a, kind).unwrap());
        }
    }
}
