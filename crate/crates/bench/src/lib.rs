//! Fixtures shared by the criterion benches.

use biascl::nn::{HeadMode, MlpModel};
use biascl::seed::{Purpose, SeedStreams};
use biascl::stream::{make_scenario, Preset, ScenarioConfig, TaskStream};
use ndarray::Array2;

pub fn stream(preset: Preset, n_train: usize) -> TaskStream {
    let config = ScenarioConfig {
        n_train,
        ..ScenarioConfig::preset(preset)
    };
    make_scenario(&config, 0).expect("preset stream")
}

pub fn model(input_dim: usize, hidden: &[usize]) -> MlpModel {
    let mut rng = SeedStreams::new(0).rng(Purpose::Init);
    MlpModel::new(input_dim, hidden, 2, HeadMode::Multi, &mut rng)
}

pub fn inputs(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5)
}
