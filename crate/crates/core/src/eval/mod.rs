//! Word error rate, per-language aggregation and relative-reduction reports.

mod report;
mod wer;

pub use report::{
    aggregate, emit_report, read_transcripts, report_csv, score_transcripts, werr, LangEntry, LangReport, ReportFormat,
    ScoredUtterance, Transcript,
};
pub use wer::{wer, wer_text, WerBreakdown};
