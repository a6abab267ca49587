//! Patch ingestion: diff parsing, dataset files and tokenization.

pub mod dataset;
pub mod diff;
pub mod tokenize;

pub use dataset::{
    class_counts, load_dataset, save_dataset, split_dataset, ClassCounts, DatasetSchema,
    DatasetSplit,
};
pub use diff::{parse_unified_diff, DiffLine, Hunk, LineTag, ParsedDiff};
pub use tokenize::{tokenize, HashedTokenizer, Tokenizer};
