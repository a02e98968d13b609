//! Localization AP grouped by query length, answered here by the
//! ground-truth oracle; pass any other predictor to study a model.

use textloc::core::synthgen::{generate_page, PageSpec};
use textloc::core::{EncodingScheme, QuantGrid, Vocabulary};
use textloc::train::studies::words_per_query;
use textloc::train::{OraclePredictor, Page};

fn main() -> anyhow::Result<()> {
    let pages: Vec<Page> = (0..100)
        .map(|i| {
            let g = generate_page(&PageSpec::wiki(320, 112).with_seed(i))?;
            Ok(Page { id: i.to_string(), width: 320, height: 112, luma: g.image.into_raw(), lines: g.manifest.lines })
        })
        .collect::<anyhow::Result<_>>()?;
    let oracle = OraclePredictor { vocab: Vocabulary::new(QuantGrid::new(10, 320, 112)?), scheme: EncodingScheme::Original };
    let report = words_per_query(&oracle, &pages, &[(2, 5), (8, 11)], 1)?;
    for b in &report.buckets {
        println!("{}-{} words: {} queries, AP@IoU50 {:.3}", b.words.0, b.words.1, b.queries, b.ap_iou_50);
    }
    if let Some(w) = report.warning {
        println!("warning: {w}");
    }
    Ok(())
}
