//! How a pixel box maps to location tokens at two grid steps.

use textloc::core::{dequantize, quantize, BBox, QuantGrid};

fn main() -> anyhow::Result<()> {
    let b = BBox::new(23.0, 8.0, 128.0, 22.0)?;
    for step in [10, 3] {
        let grid = QuantGrid::new(step, 320, 112)?;
        let q = quantize(&b, &grid);
        let d = dequantize(&q, &grid);
        println!("step {step:>2}: {} x {} tokens, cells {:?} -> {:?}", grid.n_x, grid.n_y, q, d.to_array());
    }
    Ok(())
}
