//! Mean corner error of quantized ground truth at several grid steps.

use textloc::core::synthgen::{generate_page, PageSpec};
use textloc::train::studies::ablate_grid;
use textloc::train::Page;

fn main() -> anyhow::Result<()> {
    let pages: Vec<Page> = (0..100)
        .map(|i| {
            let g = generate_page(&PageSpec::wiki(320, 112).with_seed(i))?;
            Ok(Page { id: i.to_string(), width: 320, height: 112, luma: g.image.into_raw(), lines: g.manifest.lines })
        })
        .collect::<anyhow::Result<_>>()?;
    for r in ablate_grid(&[10, 5, 3], (320, 112), &pages, None)? {
        println!("step {:>2}: {:>3} x {:>2} tokens, corner error {:.2} px, oracle DetEval F1 {:.3}", r.step_px, r.tokens.0, r.tokens.1, r.mean_corner_error, r.oracle_det_f1);
    }
    Ok(())
}
