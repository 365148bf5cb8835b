//! Regenerates the shipped reference fixtures: the 102-subject manifest
//! and the prediction dump whose analysis reproduces the published
//! per-filter tables. The committed copies under `tests/fixtures/` were
//! produced by exactly this program; the test suite asserts they still
//! match.
//!
//! Usage: cargo run --release --example make_reference_fixtures -- OUT_DIR

use std::path::PathBuf;

use ffsense::synthetic::write_reference_fixtures;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .expect("usage: make_reference_fixtures OUT_DIR")
        .into();
    write_reference_fixtures(&out).expect("write fixtures");
    println!(
        "wrote manifest.jsonl and predictions.jsonl to {}",
        out.display()
    );
}
