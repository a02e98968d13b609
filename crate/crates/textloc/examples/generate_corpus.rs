//! Writes a small mixed wiki/receipt corpus and prints its task counts.
//!
//! ```text
//! cargo run -p textloc --example generate_corpus -- /tmp/demo-corpus
//! ```

use std::path::PathBuf;

use textloc::commands::{gen, GenOptions, Template};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("textloc-demo-corpus"));
    let summary = gen(&GenOptions { out, config: None, n: Some(64), seed: Some(7), template: Template::Mixed, width: 320, height: 112 })?;
    println!("{} pages in {}", summary.pages, summary.dir.display());
    for (task, n) in &summary.task_counts {
        println!("{task:>12}: {n}");
    }
    println!("hash {}", summary.hash);
    Ok(())
}
