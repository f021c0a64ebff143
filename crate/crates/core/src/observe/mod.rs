//! Span analytics: ingestion, heat maps, cross-rank traces, hang
//! pinpointing and iteration-time trend analysis.

mod decay;
mod hang;
mod heatmap;
mod ingest;
mod trace;

pub use decay::{analyze_mfu_decay, Attribution, DecayReport, PhaseTrend};
pub use hang::{pinpoint_hang, HangReport};
pub use heatmap::{build_heatmap, detect_stragglers, HeatDim, HeatMap};
pub use ingest::{ingest_file, AnalyticalStore, FileTailer, LivePipeline, SpanQueue, SpanTable};
pub use trace::{planned_trace, unified_trace};

/// Least-squares fit `y = slope * x + intercept`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, ys.first().copied().unwrap_or(0.0));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}
