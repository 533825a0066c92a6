use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lgpe_core::pe::ipe_prf;
use lgpe_core::pola::{self, AttentionMatrix};
use lgpe_core::tasks::{from_jsonl, generate, oracle, sample_dataset, to_jsonl, Symbol, TaskKind, Vocabulary};

fn digits(task: TaskKind, toks: &[u32]) -> Vec<u32> {
    let v = Vocabulary::for_task(task);
    toks.iter()
        .map(|&t| match v.symbol(t) {
            Some(Symbol::Digit(d)) => d as u32,
            other => panic!("expected digit, got {other:?}"),
        })
        .collect()
}

fn value_lsb(ds: &[u32], base: u128) -> u128 {
    ds.iter().rev().fold(0, |acc, &d| acc * base + d as u128)
}

/// Operands are written least significant digit first, except the
/// dividend, which is most significant first.
#[test]
fn arithmetic_answers_match_integer_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=12 {
        for aligned in [false, true] {
            let target = aligned.then_some(12);
            let add = generate(TaskKind::Addition, n, aligned, target, &mut rng).unwrap();
            let w = if aligned { 12 } else { n };
            let p = digits(TaskKind::Addition, &add.prompt()[..w]);
            let q = digits(TaskKind::Addition, &add.prompt()[w + 1..2 * w + 1]);
            let s = digits(TaskKind::Addition, add.answer());
            assert_eq!(value_lsb(&s, 3), value_lsb(&p, 3) + value_lsb(&q, 3));
            assert_eq!(s.len(), w + 1);

            let mul = generate(TaskKind::Multiplication1N, n, aligned, target, &mut rng).unwrap();
            let y = digits(TaskKind::Multiplication1N, &mul.prompt()[..1])[0] as u128;
            let x = digits(TaskKind::Multiplication1N, &mul.prompt()[2..2 + w]);
            let z = digits(TaskKind::Multiplication1N, mul.answer());
            assert_eq!(value_lsb(&z, 10), y * value_lsb(&x, 10));

            let div = generate(TaskKind::DivisionN1, n, aligned, target, &mut rng).unwrap();
            let y = digits(TaskKind::DivisionN1, &div.prompt()[..1])[0] as u128;
            let mut x = digits(TaskKind::DivisionN1, &div.prompt()[2..2 + w]);
            x.reverse();
            let dividend = value_lsb(&x, 10);
            assert_eq!(dividend % y, 0);
            let mut quot = digits(TaskKind::DivisionN1, div.answer());
            quot.reverse();
            assert_eq!(value_lsb(&quot, 10), dividend / y);
        }
    }
}

#[test]
fn datasets_round_trip_through_jsonl() {
    for task in TaskKind::ALL {
        let data = sample_dataset(task, 1..=6, 50, false, None, 9).unwrap();
        assert_eq!(from_jsonl(&to_jsonl(&data)).unwrap(), data);
        assert_eq!(sample_dataset(task, 1..=6, 50, false, None, 9).unwrap(), data, "{task} is not seed-determined");
        for inst in &data {
            assert_eq!(oracle(task, inst.prompt()).unwrap(), inst.answer());
        }
    }
}

/// The ideal relation routes each answer position to the keys it needs:
/// reading the tokens at the nonzero keys of the predicting row is enough to
/// produce the next answer digit.
#[test]
fn ideal_relation_points_at_the_sources() {
    let big_n = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for task in [TaskKind::Copy, TaskKind::Shift, TaskKind::Parity] {
        let prf = ipe_prf(task, big_n).unwrap();
        for n in 1..=big_n {
            let inst = generate(task, n, true, Some(big_n), &mut rng).unwrap();
            let v = Vocabulary::for_task(task);
            for p in inst.answer_start..inst.tokens.len() {
                let row = p - 1;
                let keys: Vec<(usize, usize)> =
                    (0..=row).filter_map(|j| Some((prf.value(row, j), j)).filter(|(s, _)| *s != 0)).collect();
                let tok = |j: usize| inst.tokens[j];
                let got = match task {
                    TaskKind::Copy | TaskKind::Shift => {
                        assert_eq!(keys.len(), 1, "{task} row {row}");
                        tok(keys[0].1)
                    }
                    _ => {
                        // Parity: the current input bit xor the previous output.
                        let bit = |j: usize| match v.symbol(tok(j)) {
                            Some(Symbol::Digit(d)) => d as u32,
                            _ => 0,
                        };
                        let x = keys.iter().find(|(s, _)| *s == 2).map(|k| bit(k.1)).unwrap();
                        let prev = keys.iter().find(|(s, _)| *s == 1).map(|k| bit(k.1)).unwrap();
                        v.id(Symbol::Digit((x ^ prev) as u8))
                    }
                };
                assert_eq!(got, inst.tokens[p], "{task} n={n} position {p}");
            }
        }
    }
}

#[test]
fn pola_pipeline_reports_witness_for_an_increasing_target() {
    // Two distinct values beyond the training prefix: the prefix relation
    // cannot separate them.
    let rows = vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 2.0],
        vec![0.0, 0.0, 0.0, 3.0],
    ];
    let a = AttentionMatrix::from_rows(&rows).unwrap();
    let prf = pola::prefix_prf(&a, 2);
    let ind = pola::prf_to_indicators(&prf, 4).unwrap();
    let q = pola::min_norm_solution(&a.prefix(2), &ind).unwrap();
    let rep = pola::verify_lg(&q, &ind, &a, 4, pola::DEFAULT_TOL).unwrap();
    assert!(!rep.exact);
    assert!(rep.witness.unwrap().1 > 2);
}

proptest! {
    #[test]
    fn nonincreasing_targets_generalize(seed in any::<u64>(), n0 in 1usize..6, extra in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n0 + extra;
        let a = pola::random_nonincreasing_target(n, n0, &mut rng);
        let prf = pola::nonincreasing_prf(&a, n0).unwrap();
        let ind = pola::prf_to_indicators(&prf, n).unwrap();
        let q = pola::min_norm_solution(&a.prefix(n0), &ind).unwrap();
        prop_assert!(pola::verify_lg(&q, &ind, &a, n, 1e-8).unwrap().exact);
    }
}
