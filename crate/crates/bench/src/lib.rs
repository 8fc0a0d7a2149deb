//! Shared fixtures for the benchmarks under `benches/`.

use agm_core::datasets::{DatasetKind, ToyDataset};
use agm_core::model::{FeatureMap, ForceNet};
use agm_core::{DiffusionSchedule, KernelTable, Mode, Sigma0};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn toy() -> (ToyDataset, KernelTable) {
    let ds = ToyDataset::new(DatasetKind::mog8(), 0).expect("default dataset");
    let table = KernelTable::build(DiffusionSchedule::default(), Sigma0::default(), ds.sigma_data()).expect("default kernel");
    (ds, table)
}

/// An untrained network with the default feature map.
pub fn net(sigma_data: f64, hidden: &[usize]) -> ForceNet<f32> {
    let features = FeatureMap { d: 2, n_freq: 8, precondition: true, sigma_data };
    ForceNet::new(features, hidden, Mode::Ode, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid widths")
}
