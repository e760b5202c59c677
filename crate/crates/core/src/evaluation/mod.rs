//! Reconstruction metrics, SNR sweeps, attention comparisons and report
//! files.

mod compare;
mod metrics;
mod report;

pub use compare::{
    compare_attention, comparison_csv, parse_comparison, ComparisonRow, Variant, COMPARISON_HEADER,
    REFERENCE_ACCURACY,
};
pub use metrics::{accuracy, evaluate, nmse, nmse_sample, to_db, Metrics, NMSE_DB_FLOOR};
pub use report::{fmt_sig6, render_svg, sweep_snr, EvalReport, ReportRow, REPORT_HEADER};
