//! Seeded generator of phrase-structured English-like text, for smoke runs
//! and tests where no real corpus is at hand.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETS: &[&str] = &["the", "a", "every", "one", "that", "this"];
const ADJS: &[&str] = &[
    "quiet", "neural", "bright", "ancient", "careful", "small", "distant", "green",
    "automated", "curious", "heavy", "gentle", "hidden", "sudden", "patient",
];
const NOUNS: &[&str] = &[
    "network", "river", "doctor", "signal", "garden", "machine", "scan", "village",
    "teacher", "model", "window", "engine", "forest", "letter", "system", "child",
];
const VERBS: &[&str] = &[
    "detected", "followed", "carried", "opened", "watched", "repaired", "crossed",
    "measured", "found", "painted", "warned", "reached", "trained", "lifted",
];
const PREPS: &[&str] = &["in", "near", "under", "beyond", "across", "behind", "inside"];
const PLACES: &[&str] = &[
    "the old harbor", "a narrow valley", "the city library", "the north field",
    "the brain scan", "a crowded market", "the upper floor", "the long road",
];
const CONSEQ: &[&str] = &[
    "triggering an automated safety alert",
    "leaving a faint trace behind",
    "raising a quiet question",
    "opening a new path forward",
    "keeping the evening calm",
    "sending a signal home",
];

fn noun_phrase(rng: &mut impl Rng, out: &mut String) {
    out.push_str(DETS.choose(rng).unwrap());
    out.push(' ');
    if rng.random_bool(0.7) {
        out.push_str(ADJS.choose(rng).unwrap());
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).unwrap());
}

fn sentence(rng: &mut impl Rng, out: &mut String) {
    let start = out.len();
    noun_phrase(rng, out);
    out.push(' ');
    out.push_str(VERBS.choose(rng).unwrap());
    out.push(' ');
    noun_phrase(rng, out);
    if rng.random_bool(0.6) {
        out.push(' ');
        out.push_str(PREPS.choose(rng).unwrap());
        out.push(' ');
        out.push_str(PLACES.choose(rng).unwrap());
    }
    if rng.random_bool(0.4) {
        out.push_str(", ");
        out.push_str(CONSEQ.choose(rng).unwrap());
    }
    out.push_str(". ");
    // capitalize the sentence start
    if let Some(first) = out[start..].chars().next() {
        let upper: String = first.to_uppercase().collect();
        out.replace_range(start..start + first.len_utf8(), &upper);
    }
}

/// Generates at least `min_bytes` bytes of text, deterministic in `seed`.
pub fn generate(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 128);
    let mut in_paragraph = 0;
    while out.len() < min_bytes {
        sentence(&mut rng, &mut out);
        in_paragraph += 1;
        if in_paragraph >= 6 && rng.random_bool(0.3) {
            out.pop();
            out.push('\n');
            in_paragraph = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate(10_000, 3);
        assert!(a.len() >= 10_000);
        assert_eq!(a, generate(10_000, 3));
        assert_ne!(a, generate(10_000, 4));
        assert!(a.is_ascii());
    }
}
