//! Writes a synthetic phrase-structured corpus to stdout.
//!
//! cargo run --release --example toy_corpus -- 102400 > toy.txt

fn main() {
    let mut args = std::env::args().skip(1);
    let bytes = args.next().and_then(|a| a.parse().ok()).unwrap_or(100 * 1024);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(2024);
    print!("{}", attnloc_core::toy::generate(bytes, seed));
}
