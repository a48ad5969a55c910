//! Fixtures shared by the benchmarks in `benches/`.

use planting::data::{make_synthetic, SyntheticSpec};
use planting::{ArchitectureSpec, ChannelConfig, LabeledDataset, PlantableNetwork, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = dims.iter().product();
    Tensor4::from_vec(dims, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("non-empty dims")
}

/// CIFAR-shaped network with every conv layer `width` channels wide.
pub fn cifar_net(width: usize) -> PlantableNetwork {
    PlantableNetwork::build(
        ArchitectureSpec::cifar(),
        ChannelConfig::uniform(width, 10),
        1,
    )
    .expect("valid widths")
}

/// Two-class blobs at CIFAR resolution.
pub fn cifar_sized_data(per_class: usize) -> LabeledDataset {
    make_synthetic(&SyntheticSpec {
        classes: 2,
        per_class,
        dims: [3, 32, 32],
        separation: 0.5,
        seed: 3,
    })
    .expect("non-empty spec")
}
