//! Cross-modal retrieval of point clouds.

use log::warn;

use crate::error::{Result, TammError};
use crate::numkit::dot;
use crate::train::DualFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    /// Text embedding, ranked against semantic point features.
    Text,
    /// Adapted image embedding, ranked against vision point features.
    Image,
}

/// Top-`k` gallery ids with scores, best first; equal scores go to the
/// lower id. `k` beyond the gallery size is clamped.
pub fn retrieve(query: &[f64], kind: QueryKind, gallery: &DualFeatures, k: usize) -> Result<Vec<(usize, f64)>> {
    let g = match kind {
        QueryKind::Text => &gallery.semantic,
        QueryKind::Image => &gallery.vision,
    };
    if g.rows() == 0 {
        return Err(TammError::config("retrieval gallery is empty"));
    }
    if query.len() != g.cols() {
        return Err(TammError::shape(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            g.cols()
        )));
    }
    let k = if k > g.rows() {
        warn!("k={k} exceeds gallery size {}; clamping", g.rows());
        g.rows()
    } else {
        k
    };
    let mut scored: Vec<(usize, f64)> = g.iter_rows().map(|r| dot(query, r)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
