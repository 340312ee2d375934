//! Fixtures shared by the benchmarks.

use denkf_core::checkpoint::fresh;
use denkf_core::dataset::TrajectoryDataset;
use denkf_core::filter::FilterConfig;
use denkf_core::models::{Denkf, Variant};
use denkf_core::sim::{generate_trajectory, SyntheticArmConfig};
use denkf_core::{canonical_placements, SamplingFrequency};

/// Untrained pipeline and a short recording to filter.
pub fn fixture(variant: Variant, ensemble_size: usize) -> (Denkf, TrajectoryDataset, FilterConfig) {
    let ds = generate_trajectory(
        &SyntheticArmConfig::default(),
        &canonical_placements()[0],
        SamplingFrequency::Hz50,
        4.0,
        1,
    )
    .expect("default simulator settings are valid");
    let pipeline = fresh(variant, 3).expect("static architecture").pipeline;
    let cfg = FilterConfig {
        ensemble_size,
        ..Default::default()
    };
    (pipeline, ds, cfg)
}
