// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random word-boundary prefixes of single-line paragraphs.
//!
//! A word is a maximal run of non-whitespace. Split points sit immediately
//! before every word except the first; the prefix is everything left of
//! the split with trailing whitespace removed, and the right side is
//! dropped.

use rand::Rng;

pub const DEFAULT_MIN_CHARS: usize = 15;

/// All prefixes a split could produce, shortest first.
pub fn prefix_candidates(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut prev_ws = true;
    let mut seen_word = false;
    for (i, c) in line.char_indices() {
        let ws = c.is_whitespace();
        if prev_ws && !ws {
            if seen_word {
                out.push(line[..i].trim_end());
            }
            seen_word = true;
        }
        prev_ws = ws;
    }
    out
}

/// Picks a split point uniformly and returns the left side if it has at
/// least `min_chars` characters. `None` is a rejection, not an error.
///
/// Lines must not contain newlines.
pub fn make_prefix<'a, R: Rng + ?Sized>(line: &'a str, rng: &mut R, min_chars: usize) -> Option<&'a str> {
    debug_assert!(!line.contains('\n'), "make_prefix expects a single line");
    let candidates = prefix_candidates(line);
    if candidates.is_empty() {
        return None;
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    (pick.chars().count() >= min_chars).then_some(pick)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn candidates_end_at_word_boundaries() {
        assert_eq!(
            prefix_candidates("alpha beta  gamma delta"),
            vec!["alpha", "alpha beta", "alpha beta  gamma"]
        );
        assert!(prefix_candidates("single").is_empty());
        assert!(prefix_candidates("   ").is_empty());
        assert_eq!(prefix_candidates("  lead word"), vec!["  lead"]);
    }

    #[test]
    fn shortest_paper_style_prefix_is_accepted() {
        let line = "Volume production began in the spring";
        assert!(prefix_candidates(line).contains(&"Volume production"));
        assert!("Volume production".chars().count() >= DEFAULT_MIN_CHARS);
    }

    #[test]
    fn short_lines_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(make_prefix("ab cd ef g", &mut rng, DEFAULT_MIN_CHARS), None);
        }
    }

    #[test]
    fn counts_characters_not_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 5 two-byte chars: 10 bytes but 5 characters.
        assert_eq!(make_prefix("ééééé x", &mut rng, 6), None);
        assert_eq!(make_prefix("ééééé x", &mut rng, 5), Some("ééééé"));
    }

    #[test]
    fn seeded_is_deterministic() {
        let line = "the quick brown fox jumps over the lazy dog again and again";
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| make_prefix(line, &mut rng, 15)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }
}
