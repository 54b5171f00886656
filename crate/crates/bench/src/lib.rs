//! Fixtures shared by the stage benchmarks.

use bevnext_core::harness::{BenchFixture, SceneConfig};

/// Desk-scale fixture: default config with a fixed seed.
pub fn desk_fixture() -> BenchFixture {
    BenchFixture::new(&SceneConfig::default()).expect("default config builds")
}
