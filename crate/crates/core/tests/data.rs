use std::collections::BTreeSet;
use std::fs;

use mgmo::data::{
    gen_mapping_task, gen_multimodal_task, load_tsv, save_tsv, Batcher, DataError, ParallelCorpus,
    SentencePair, TokenMap, Vocab, NUM_RESERVED, PAD, UNK,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn tsv_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::synthetic(20);
    let task = gen_mapping_task(300, 20, 1..=12, 0.3, &mut rng(3)).unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    save_tsv(&task.corpus, &vocab, &a).unwrap();
    let (back, unknown) = load_tsv(&a, &vocab).unwrap();
    assert_eq!(unknown, 0);
    assert_eq!(back, task.corpus);
    save_tsv(&back, &vocab, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn tsv_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::synthetic(4);
    let p = dir.path().join("bad.tsv");
    fs::write(&p, "w0 w1\tw2\nw0 w1 w2\n").unwrap();
    match load_tsv(&p, &vocab) {
        Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected malformed line error, got {other:?}"),
    }
    let err = load_tsv(&p, &vocab).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
    fs::write(&p, "w0\t\n").unwrap();
    assert!(matches!(load_tsv(&p, &vocab), Err(DataError::Malformed { line: 1, .. })));
}

#[test]
fn empty_file_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.tsv");
    fs::write(&p, "").unwrap();
    let (c, unknown) = load_tsv(&p, &Vocab::synthetic(4)).unwrap();
    assert!(c.is_empty());
    assert_eq!(unknown, 0);
}

#[test]
fn unknown_tokens_become_unk_and_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("u.tsv");
    fs::write(&p, "w0 zz\tw1\nyy\tw2 xx\n").unwrap();
    let (c, unknown) = load_tsv(&p, &Vocab::synthetic(4)).unwrap();
    assert_eq!(unknown, 3);
    assert_eq!(c.pairs[0].source, vec![3, UNK]);
    assert_eq!(c.pairs[1].target, vec![5, UNK]);
}

#[test]
fn vocab_file_round_trip_and_reserved_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    let mut v = Vocab::new();
    v.add("hello");
    v.add("world");
    v.save(&p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "<pad>\n<unk>\n<m>\nhello\nworld\n");
    assert_eq!(Vocab::load(&p).unwrap(), v);
    for id in 0..v.len() as u32 {
        assert_eq!(v.id(v.token(id).unwrap()), Some(id));
    }
    fs::write(&p, "<pad>\n<m>\n<unk>\n").unwrap();
    assert!(matches!(Vocab::load(&p), Err(DataError::Malformed { line: 2, .. })));
    fs::write(&p, "<pad>\n<unk>\n<m>\na\na\n").unwrap();
    assert!(matches!(Vocab::load(&p), Err(DataError::Malformed { line: 5, .. })));
}

#[test]
fn generator_parameters_are_checked() {
    assert!(gen_mapping_task(10, 7, 1..=4, 0.0, &mut rng(0)).is_err());
    assert!(gen_mapping_task(10, 8, 0..=4, 0.0, &mut rng(0)).is_err());
    assert!(gen_mapping_task(10, 8, 1..=4, 1.5, &mut rng(0)).is_err());
    assert!(gen_multimodal_task(10, 8, 5..=4, &mut rng(0)).is_err());
}

#[test]
fn multimodal_worked_orders() {
    let map = TokenMap::random(8, 0.0, &mut rng(1));
    let src = [3, 4, 5, 6];
    let [a, b] = map.multimodal_candidates(&src);
    let m = |s: &[u32]| map.map(s);
    assert_eq!(a, [m(&src[..2]), m(&src[2..])].concat());
    assert_eq!(b, [m(&src[2..]), m(&src[..2])].concat());
}

#[test]
fn multimodal_targets_are_one_of_two_orders_in_equal_shares() {
    let task = gen_multimodal_task(10_000, 64, 3..=12, &mut rng(11)).unwrap();
    let mut first = 0;
    for p in &task.corpus.pairs {
        let [a, b] = task.map.multimodal_candidates(&p.source);
        assert!(p.target == a || p.target == b);
        first += usize::from(p.target == a);
    }
    let share = first as f64 / task.corpus.len() as f64;
    // Odd lengths with a one-token first half still differ between orders,
    // so every pair is attributable to exactly one order.
    assert!((share - 0.5).abs() <= 0.02, "{share}");
}

#[test]
fn mapping_targets_follow_the_dictionary() {
    let task = gen_mapping_task(500, 16, 1..=12, 0.25, &mut rng(4)).unwrap();
    for p in &task.corpus.pairs {
        assert_eq!(p.target, task.map.map(&p.source));
        assert!(p.target.len() >= p.source.len() && p.target.len() <= 2 * p.source.len());
    }
}

fn toy_corpus(n: usize, seed: u64) -> ParallelCorpus {
    gen_mapping_task(n, 16, 1..=12, 0.3, &mut rng(seed)).unwrap().corpus
}

#[test]
fn batcher_epochs_cover_every_sentence_once() {
    let corpus = toy_corpus(537, 2);
    let budget = 64;
    let mut batcher = Batcher::new(&corpus, budget, rng(9));
    for epoch in 1..=3 {
        let mut seen = Vec::new();
        while seen.len() < corpus.len() {
            let b = batcher.next().unwrap();
            assert!(b.padded_tokens() <= budget);
            for (r, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.source.row(r), corpus.pairs[i].source.as_slice());
                assert_eq!(b.target.row(r), corpus.pairs[i].target.as_slice());
                let pad = &b.source.ids[r * b.source.width + b.source.lengths[r]..(r + 1) * b.source.width];
                assert!(pad.iter().all(|&t| t == PAD));
            }
            seen.extend(b.indices);
        }
        assert_eq!(batcher.epoch(), epoch);
        assert_eq!(seen.len(), corpus.len());
        let distinct: BTreeSet<usize> = seen.into_iter().collect();
        assert_eq!(distinct.len(), corpus.len());
    }
}

#[test]
fn batcher_is_seeded() {
    let corpus = toy_corpus(200, 5);
    let a: Vec<_> = Batcher::new(&corpus, 48, rng(1)).take(30).collect();
    let b: Vec<_> = Batcher::new(&corpus, 48, rng(1)).take(30).collect();
    let c: Vec<_> = Batcher::new(&corpus, 48, rng(2)).take(30).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batcher_on_empty_corpus_yields_nothing() {
    let corpus = ParallelCorpus::default();
    assert!(Batcher::new(&corpus, 8, rng(0)).next().is_none());
}

#[test]
fn split_takes_consecutive_chunks() {
    let corpus = toy_corpus(10, 1);
    let parts = corpus.split(&[6, 3, 5]);
    assert_eq!(parts.iter().map(ParallelCorpus::len).collect::<Vec<_>>(), vec![6, 3, 1]);
    let joined: Vec<SentencePair> = parts.into_iter().flat_map(|p| p.pairs).collect();
    assert_eq!(joined, corpus.pairs);
}

proptest! {
    #[test]
    fn generators_emit_only_content_ids(seed in any::<u64>(), v in 8usize..40, expand in 0.0f64..=1.0) {
        let a = gen_mapping_task(50, v, 1..=10, expand, &mut rng(seed)).unwrap();
        let b = gen_multimodal_task(50, v, 1..=10, &mut rng(seed)).unwrap();
        for p in a.corpus.pairs.iter().chain(&b.corpus.pairs) {
            prop_assert!(!p.source.is_empty() && !p.target.is_empty());
            for &t in p.source.iter().chain(&p.target) {
                prop_assert!((NUM_RESERVED..NUM_RESERVED + v).contains(&(t as usize)));
            }
        }
    }

    #[test]
    fn decode_then_encode_is_identity(ids in prop::collection::vec(3u32..23, 0..20)) {
        let vocab = Vocab::synthetic(20);
        prop_assert_eq!(vocab.encode(&vocab.decode(&ids)), (ids, 0));
    }
}
