//! Generates the desk-scale synthetic datasets used by the README workflow:
//! a 10-class classification set and a 2AFC judgment set.
//!
//! Usage: cargo run --release -p cpips-core --example gen_toy -- <out-dir> [seed]

use cpips_core::synth;

fn main() {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| {
        eprintln!("usage: gen_toy <out-dir> [seed]");
        std::process::exit(2);
    }));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);

    let train = synth::gen_classification_set(&out.join("train"), 2000, 10, 32, seed).unwrap();
    let eval = synth::gen_classification_set(&out.join("eval"), 400, 10, 32, seed + 1).unwrap();
    let judgments = synth::gen_judgment_set(&out.join("judgments"), 1000, 64, seed + 2).unwrap();
    println!("classification train manifest: {}", train.display());
    println!("classification eval manifest:  {}", eval.display());
    println!("judgment manifest:             {}", judgments.display());
}
