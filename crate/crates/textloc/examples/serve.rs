//! Serves a checkpoint on localhost for the web UI.
//!
//! ```text
//! cargo run --release -p textloc --example serve -- model.ckpt
//! curl localhost:8080/healthz
//! ```

use anyhow::Context;
use textloc::server::serve;
use textloc::Engine;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let ckpt = std::env::args().nth(1).context("usage: serve <checkpoint>")?;
    let engine = Engine::load(ckpt.as_ref())?;
    serve(engine, "127.0.0.1:8080".parse()?, &["http://localhost:5173".to_string()]).await?;
    Ok(())
}
