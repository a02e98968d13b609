//! Text and detection scores on hand-made examples.

use textloc::core::metrics::{ap_iou, cer, deteval_default, wer};
use textloc::core::BBox;

fn main() -> anyhow::Result<()> {
    println!("CER {:.3}", cer("TOTAL 12.50", "TOTAL 12.80"));
    println!("WER {:.3}", wer("the quick brown fox", "the quick brown box"));

    let gt = vec![BBox::new(10.0, 10.0, 90.0, 24.0)?, BBox::new(10.0, 30.0, 60.0, 44.0)?];
    let pred = vec![BBox::new(11.0, 11.0, 89.0, 23.0)?, BBox::new(0.0, 60.0, 20.0, 70.0)?];
    let r = deteval_default(&gt, &pred);
    let prf = r.counts.prf();
    println!("DetEval P {:.2} R {:.2} F1 {:.2}, pairs {:?}", prf.precision, prf.recall, prf.f1, r.pairs);

    let results: Vec<(BBox, Option<BBox>)> = gt.iter().copied().zip(pred.iter().copied().map(Some)).collect();
    for t in [0.5, 0.8] {
        println!("AP@IoU{:.0} {:.2}", t * 100.0, ap_iou(&results, t));
    }
    Ok(())
}
