//! Neighbor-distance continuity of location-token embeddings for a freshly
//! initialized model and, optionally, a trained checkpoint.

use textloc::core::{EncodingScheme, QuantGrid, Vocabulary};
use textloc::model::{checkpoint, location_embedding_continuity, ContinuityReport, Model, ModelConfig};

fn show(label: &str, r: &ContinuityReport) {
    for a in &r.axes {
        println!("{label:>10} {:>4}: adjacent {:.4}  non-adjacent {:.4}  ratio {:.3}", a.axis, a.adjacent_mean, a.nonadjacent_mean, a.ratio);
    }
}

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::new(QuantGrid::new(10, 320, 112)?);
    let init: Model<f32> = Model::new(ModelConfig::desk(&vocab, EncodingScheme::Original), vocab)?;
    show("init", &location_embedding_continuity(&init));
    if let Some(path) = std::env::args().nth(1) {
        let trained = checkpoint::load(path.as_ref())?;
        show("trained", &location_embedding_continuity(&trained));
    }
    Ok(())
}
