//! Scores a checkpoint on a corpus split, or ground-truth answers when no
//! checkpoint is given.
//!
//! ```text
//! cargo run -p textloc --example evaluate -- <corpus-dir> [checkpoint]
//! ```

use std::path::PathBuf;

use anyhow::Context;
use textloc::commands::{eval, EvalCommand};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let corpus = PathBuf::from(args.next().context("usage: evaluate <corpus-dir> [checkpoint]")?);
    let checkpoint = args.next().map(PathBuf::from);
    let out = std::env::temp_dir().join("textloc-eval.json");
    let report = eval(&EvalCommand { checkpoint, corpus, split: "test".into(), limit: Some(50), tasks: Vec::new(), out: out.clone(), dump: None })?;
    for (task, r) in &report.tasks {
        println!("{task:>12}: {} samples", r.samples);
        for (name, value) in r.metrics.values() {
            println!("{name:>16} {value:.4}");
        }
    }
    println!("written to {}", out.display());
    Ok(())
}
