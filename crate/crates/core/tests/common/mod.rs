#![allow(dead_code)]

pub mod gen;
pub mod guests;
pub mod props;
pub mod readelf;

use std::path::PathBuf;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}
