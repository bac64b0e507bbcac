//! Helpers for integration tests: a local chat-completions stub server,
//! a materializer for the per-patient label table, and script builders.

pub mod scripts;
pub mod stub;
pub mod labels;

use std::path::PathBuf;

/// Root of the cargo workspace.
pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root exists")
}
