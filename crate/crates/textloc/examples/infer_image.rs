//! Runs layout OCR on a PNG with a saved checkpoint.
//!
//! ```text
//! cargo run --release -p textloc --example infer_image -- model.ckpt page.png
//! ```

use anyhow::Context;
use textloc::{Engine, InferenceRequest, ServiceTask};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().context("usage: infer_image <checkpoint> <png>")?;
    let png = std::fs::read(args.next().context("usage: infer_image <checkpoint> <png>")?)?;
    let engine = Engine::load(ckpt.as_ref())?;
    let response = engine.infer(&InferenceRequest::new(&png, ServiceTask::OcrLayout), Some(1.0))?;
    for e in response.elements.unwrap_or_default() {
        println!("{:?} {:?}", e.bbox, e.text);
    }
    Ok(())
}
