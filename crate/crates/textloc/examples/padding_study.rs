//! DetEval F1 of systematically tight predictions after padding by 0, 1 and
//! 2 pixels.

use textloc::core::synthgen::{generate_page, AugmentConfig, PageSpec};
use textloc::core::BBox;
use textloc::train::studies::{padding_table, PadCase};

fn main() -> anyhow::Result<()> {
    let spec = PageSpec { scale_y: (1, 2), augment: AugmentConfig::none(), ..PageSpec::wiki(320, 112) };
    let cases = (0..50)
        .map(|i| {
            let page = generate_page(&spec.with_seed(i))?;
            let gt: Vec<BBox> = page.manifest.lines.iter().map(|l| l.bbox).collect();
            let pred = gt.iter().map(|b| BBox { x1: b.x1 + 1.0, y1: b.y1 + 1.0, x2: b.x2 - 1.0, y2: b.y2 - 1.0 }).collect();
            Ok(PadCase { gt, pred, width: 320.0, height: 112.0 })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    for row in padding_table(&cases, &[0.0, 1.0, 2.0]) {
        println!("pad {}: P {:.3} R {:.3} F1 {:.3}", row.pad, row.prf.precision, row.prf.recall, row.prf.f1);
    }
    Ok(())
}
