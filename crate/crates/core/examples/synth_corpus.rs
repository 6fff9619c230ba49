//! Writes a synthetic `smiles,target` corpus.
//!
//! cargo run --release --example synth_corpus -- out.csv 10000 [seed]

use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: synth_corpus <out.csv> <count> [seed]");
        std::process::exit(1);
    }
    let count: usize = args[1].parse().expect("count is an integer");
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().expect("seed is an integer"));
    let corpus = himp_core::synth::generate(count, seed);
    himp_core::synth::write_csv(&PathBuf::from(&args[0]), &corpus).expect("write corpus");
}
