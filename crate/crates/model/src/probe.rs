//! Spatial continuity of the learned location-token embeddings.

use serde::{Deserialize, Serialize};
use textloc_core::EncodingScheme;

use crate::model::Model;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisContinuity {
    /// `x`, `y` or `loc`.
    pub axis: String,
    pub tokens: usize,
    /// Mean distance between tokens `i` and `i + 1`.
    pub adjacent_mean: f64,
    /// Mean distance over all pairs with `|i - j| >= 2`.
    pub nonadjacent_mean: f64,
    /// `adjacent_mean / nonadjacent_mean`; below 1 means neighbors are closer.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub axes: Vec<AxisContinuity>,
}

fn dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).to_f64().powi(2)).sum::<f64>().sqrt()
}

/// Neighbor-distance statistic over one ordered run of embedding rows.
pub fn axis_continuity<T: Real>(axis: &str, rows: &[&[T]]) -> AxisContinuity {
    let n = rows.len();
    let adjacent: Vec<f64> = rows.windows(2).map(|w| dist(w[0], w[1])).collect();
    let mut far = (0.0, 0usize);
    for i in 0..n {
        for j in i + 2..n {
            far.0 += dist(rows[i], rows[j]);
            far.1 += 1;
        }
    }
    let adjacent_mean = adjacent.iter().sum::<f64>() / adjacent.len().max(1) as f64;
    let nonadjacent_mean = far.0 / far.1.max(1) as f64;
    AxisContinuity {
        axis: axis.to_string(),
        tokens: n,
        adjacent_mean,
        nonadjacent_mean,
        ratio: if nonadjacent_mean > 0.0 { adjacent_mean / nonadjacent_mean } else { f64::NAN },
    }
}

/// Reports every location axis the model's encoding scheme uses.
pub fn location_embedding_continuity<T: Real>(model: &Model<T>) -> ContinuityReport {
    let vocab = model.vocab();
    let (table, d) = model.token_embedding();
    let row = |id: u32| &table[id as usize * d..(id as usize + 1) * d];
    let ranges = match model.config().scheme {
        EncodingScheme::Unified => vec![("loc", vocab.loc_range())],
        EncodingScheme::Original | EncodingScheme::Segmented => vec![("x", vocab.x_range()), ("y", vocab.y_range())],
    };
    ContinuityReport {
        axes: ranges
            .into_iter()
            .map(|(name, r)| axis_continuity(name, &r.map(row).collect::<Vec<_>>()))
            .collect(),
    }
}
