//! Encodes one synthetic page under each location scheme and decodes it back.

use textloc::core::synthgen::{generate_page, PageSpec};
use textloc::core::{decode_page, encode_page, EncodingScheme, QuantGrid, Vocabulary};

fn main() -> anyhow::Result<()> {
    let page = generate_page(&PageSpec::receipt(200, 240).with_seed(3))?;
    let vocab = Vocabulary::new(QuantGrid::new(10, 200, 240)?);
    for line in &page.manifest.lines {
        println!("{:?} at {:?}", line.text, line.bbox.to_array());
    }
    for scheme in EncodingScheme::ALL {
        let tokens = encode_page(&page.manifest.lines, &vocab, scheme)?;
        let decoded = decode_page(&tokens, &vocab, scheme);
        let shown: String = vocab.render(&tokens).chars().take(120).collect();
        println!("\n{scheme:?}: {} tokens, clean decode {}", tokens.len(), decoded.diagnostics.is_clean());
        println!("  {shown}...");
    }
    Ok(())
}
