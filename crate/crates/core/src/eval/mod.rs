//! Segmentation metrics, embedding export and report rendering.

mod dice;
mod embed;
mod plot;
mod report;

pub use dice::{average_scores, dice_score, DiceAccumulator, DiceScores};
pub use embed::{embedding_separation, export_embeddings, pca_2d, EmbeddingRow, EmbeddingTable, Separation};
pub use plot::{bar_chart_svg, emit_plots, line_chart_svg, overlay_panel, scatter_svg, PlotSummary, SamplePrediction};
pub use report::{fraction_label, mean_std, summarize_results, Aggregate, CellKey, CellResult, CellStatus, Lineage, MetricsReport};

use crate::data::Slice2D;
use crate::error::{Error, Result};
use crate::model::{predict_segmentation, NetworkState};

/// Volume-level Dice of a network's predictions over all slices of one
/// labeled volume.
pub fn evaluate_volume(net: &NetworkState, slices: &[Slice2D]) -> Result<DiceScores> {
    let mut acc = DiceAccumulator::new(net.config().num_classes);
    let preds = predict_segmentation(net, slices)?;
    for (s, p) in slices.iter().zip(&preds) {
        let truth = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("volume {} slice {} has no labels", s.source_volume, s.slice_index)))?;
        acc.add(p.view(), truth.view())?;
    }
    Ok(acc.scores())
}
