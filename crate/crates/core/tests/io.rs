// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use depthlens::io::dump::{read_dump, write_dump};
use depthlens::io::freq::{count_tokens, read_frequency_table, write_frequency_table, FrequencyTable};
use depthlens::io::prefix::{make_prefix, prefix_candidates, DEFAULT_MIN_CHARS};
use depthlens::io::translators::{read_translators, write_translators, Translator, TranslatorSet};
use depthlens::numerics::{Matrix, NormKind};
use depthlens::synthetic::{toy_dump, ToySpec};
use depthlens::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn count_tokens_matches_a_hash_map_on_a_million_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vocab = 5000;
    // Zipf-ish skew so counts vary widely.
    let stream: Vec<u32> = (0..1_000_000)
        .map(|_| {
            let u: f64 = rng.random();
            ((vocab as f64).powf(u) - 1.0) as u32
        })
        .collect();
    let mut oracle: HashMap<u32, u64> = HashMap::new();
    for &t in &stream {
        *oracle.entry(t).or_default() += 1;
    }
    let table = count_tokens(stream.iter().copied(), vocab).unwrap();
    assert_eq!(table.total(), 1_000_000);
    assert_eq!(table.len(), oracle.len());
    for (t, c) in table.iter() {
        assert_eq!(oracle[&t], c);
    }
}

#[test]
fn count_tokens_reports_position_of_bad_id() {
    match count_tokens([1, 2, 9, 1], 5) {
        Err(Error::TokenStream { position, token, .. }) => assert_eq!((position, token), (2, 9)),
        other => panic!("{other:?}"),
    }
    let empty = count_tokens(std::iter::empty(), 5).unwrap();
    assert_eq!((empty.total(), empty.len()), (0, 0));
}

#[test]
fn dump_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, norm) in [NormKind::LayerNorm, NormKind::RmsNorm].into_iter().enumerate() {
        let dump = toy_dump(&ToySpec {
            norm,
            ..Default::default()
        });
        let path = dir.path().join(format!("d{i}"));
        write_dump(&dump, &path).unwrap();
        let back = read_dump(&path).unwrap();
        assert_eq!(back, dump);
        // Tensor files hold exactly the stored bits.
        let raw = std::fs::read(path.join("hidden_states.f32")).unwrap();
        let bits: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(bits, dump.hidden_states.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        // Writing again yields identical files.
        let again = dir.path().join(format!("e{i}"));
        write_dump(&back, &again).unwrap();
        for entry in std::fs::read_dir(&path).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(path.join(&name)).unwrap(),
                std::fs::read(again.join(&name)).unwrap()
            );
        }
    }
}

#[test]
fn minimal_dump_round_trips() {
    let dump = toy_dump(&ToySpec {
        examples: 1,
        layers: 2,
        hidden_dim: 2,
        vocab: 3,
        ..Default::default()
    });
    let dir = tempfile::tempdir().unwrap();
    write_dump(&dump, dir.path()).unwrap();
    assert_eq!(read_dump(dir.path()).unwrap(), dump);
}

#[test]
fn translator_set_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let id = TranslatorSet::identity(3, 4);
    let p = dir.path().join("id.bin");
    write_translators(&id, &p).unwrap();
    let back = read_translators(&p).unwrap();
    assert_eq!(back, id);
    assert_eq!(std::fs::read(&p).unwrap(), back.to_bytes());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ts: Vec<Translator> = (0..2)
        .map(|_| {
            let a = (0..9).map(|_| rng.random_range(-1e3..1e3)).collect();
            let b = (0..3).map(|_| rng.random::<f64>() * 1e-300).collect();
            Translator::new(Matrix::from_vec(3, 3, a).unwrap(), b).unwrap()
        })
        .collect();
    let set = TranslatorSet::new(ts, id.metadata.clone()).unwrap();
    assert_eq!(TranslatorSet::from_bytes(&set.to_bytes(), &p).unwrap(), set);
}

#[test]
fn frequency_table_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = FrequencyTable::from_counts([(0, 5), (7, 3)]);
    assert_eq!(t.total(), 8);
    let p = dir.path().join("f.bin");
    write_frequency_table(&t, &p).unwrap();
    let back = read_frequency_table(&p).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.total(), 8);
    // Truncated file is rejected.
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_frequency_table(&p).is_err());
}

#[test]
fn prefix_examples() {
    let line = "Volume production of the new engine began in spring";
    let cands = prefix_candidates(line);
    assert!(cands.contains(&"Volume production"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(make_prefix("ten chars!", &mut rng, DEFAULT_MIN_CHARS), None);
    for seed in 0..50 {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(make_prefix(line, &mut a, 15), make_prefix(line, &mut b, 15));
    }
    let boundaries = ["alpha", "alpha beta", "alpha beta gamma"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        if let Some(p) = make_prefix("alpha beta gamma delta", &mut rng, 1) {
            assert!(boundaries.contains(&p), "{p}");
        }
    }
}

proptest! {
    #[test]
    fn prefixes_are_word_boundary_prefixes(
        words in prop::collection::vec("[a-zé0-9]{1,8}", 1..12),
        seps in prop::collection::vec(prop::sample::select(vec![" ", "  ", "\t"]), 12),
        seed in any::<u64>(),
        min in 0usize..40,
    ) {
        let mut line = String::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                line.push_str(seps[i]);
            }
            line.push_str(w);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(p) = make_prefix(&line, &mut rng, min) {
            prop_assert!(line.starts_with(p));
            prop_assert!(p.chars().count() >= min);
            let rest = &line[p.len()..];
            prop_assert!(rest.starts_with(char::is_whitespace));
            prop_assert!(!p.ends_with(char::is_whitespace));
            // The prefix is a whole number of words.
            let k = p.split_whitespace().count();
            prop_assert!(k >= 1 && k < words.len());
            prop_assert_eq!(p.split_whitespace().collect::<Vec<_>>(), words[..k].iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn frequency_tables_round_trip(counts in prop::collection::btree_map(any::<u32>(), 1u64..u64::MAX / 1024, 0..50)) {
        let t = FrequencyTable::from_counts(counts.clone());
        let back = FrequencyTable::from_bytes(&t.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.total(), counts.values().sum::<u64>());
        prop_assert_eq!(back, t);
    }

    #[test]
    fn count_tokens_is_additive(a in prop::collection::vec(0u32..20, 0..200), b in prop::collection::vec(0u32..20, 0..200)) {
        let mut merged = count_tokens(a.iter().copied(), 20).unwrap();
        merged.merge(&count_tokens(b.iter().copied(), 20).unwrap());
        prop_assert_eq!(merged, count_tokens(a.iter().chain(&b).copied(), 20).unwrap());
    }
}
