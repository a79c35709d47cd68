//! Pairs files, the batch pipeline and the on-disk results store.
//!
//! A store is a directory tree `<root>/<dataset>/<model>/` holding one
//! directory of PNG artifacts per pair and an `index.jsonl` with one
//! [`ResultRecord`] per line. Operator decisions are appended to
//! `<root>/<dataset>/decisions.jsonl`.

pub mod batch;
pub mod pairs;
pub mod record;
pub mod store;
pub mod synthetic;

pub use batch::{run_batch, BatchConfig, BatchError, BatchSummary};
pub use pairs::{load_pairs, write_pairs, PairLabel, PairRecord, PairsError};
pub use record::{Artifact, ArtifactKind, DecisionRecord, PairStatus, ResultRecord, Verdict};
pub use store::{Page, ResultFilter, ResultPage, ResultsStore, SortKey, SortOrder, StoreError};

/// Current time as UTC RFC 3339 with millisecond precision.
pub fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Whether `name` can be used as a single path component in the store.
pub fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.len() <= 128
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}
