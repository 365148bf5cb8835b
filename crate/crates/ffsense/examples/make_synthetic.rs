//! Writes a small trainable synthetic dataset (PNGs + manifest).
//!
//! Usage: cargo run --release --example make_synthetic -- OUT_DIR
//!        [SUBJECTS] [POSES] [FILTERS] [EDGE]

use std::path::PathBuf;

use ffsense::synthetic::{write_synthetic_dataset, SynthSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args
        .next()
        .expect("usage: make_synthetic OUT_DIR [SUBJECTS] [POSES] [FILTERS] [EDGE]")
        .into();
    let mut spec = SynthSpec::default();
    if let Some(v) = args.next() {
        spec.subjects = v.parse().expect("SUBJECTS must be an integer");
    }
    if let Some(v) = args.next() {
        spec.poses = v.parse().expect("POSES must be an integer");
    }
    if let Some(v) = args.next() {
        spec.filters = v.parse().expect("FILTERS must be an integer");
    }
    if let Some(v) = args.next() {
        spec.edge = v.parse().expect("EDGE must be an integer");
    }
    let manifest = write_synthetic_dataset(&out, &spec).expect("write dataset");
    println!(
        "wrote {} to {}",
        manifest.summary(),
        out.join("manifest.jsonl").display()
    );
}
