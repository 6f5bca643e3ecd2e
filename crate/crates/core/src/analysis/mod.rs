//! Token-level analysis of where zero experts are chosen.

mod plots;
mod records;
mod stats;

pub use plots::{bars_svg, emit_plots, heatmap_svg, render_plots, scatter_svg, RECORDS_FILE};
pub use records::{read_records_csv, record_rollouts, tag_of, write_records_csv, TokenRecord};
pub use stats::{
    aggregate_by, bin_sizes, by_rollout, chunk_average, correlate, layer_chunk_matrix, sorted_by_x, spearman,
    write_chunks_csv, write_correlation_csv, write_groups_csv, Bin, Chunk, ChunkedSeries, Correlation, Group, GroupKey,
    XField, DEFAULT_CHUNK, MIN_CORRELATION_RECORDS,
};

#[cfg(test)]
mod tests;
