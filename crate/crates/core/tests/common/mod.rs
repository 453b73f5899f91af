#![allow(dead_code)]

use std::sync::OnceLock;

use sage::factorization::{train, FactorizationModel, TrainConfig};
use sage::latent::CategoryLibrary;
use sage::world::{make_world, sample_library, World, WorldSpec};

pub const SEEN_SAMPLES: usize = 50;
pub const UNSEEN_SAMPLES: usize = 60;
pub const LIBRARY_SEED: u64 = 2;
pub const TRAIN_SEED: u64 = 3;

pub struct Fixture {
    pub world: World,
    pub library: CategoryLibrary,
    pub model: FactorizationModel,
    pub train_seconds: f64,
}

pub fn world_for(seed: u64) -> World {
    make_world(&WorldSpec {
        seed,
        ..WorldSpec::default()
    })
    .expect("default world")
}

pub fn train_world(world: World, train_seed: u64) -> Fixture {
    let library = sample_library(&world, SEEN_SAMPLES, UNSEEN_SAMPLES, LIBRARY_SEED).expect("library");
    let cfg = TrainConfig {
        seed: train_seed,
        ..TrainConfig::default()
    };
    let t = std::time::Instant::now();
    let model = train(&library, &world, &cfg).expect("training");
    Fixture {
        world,
        library,
        model,
        train_seconds: t.elapsed().as_secs_f64(),
    }
}

/// Default world, library and trained model, built once per test binary.
pub fn default_fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| train_world(world_for(WorldSpec::default().seed), TRAIN_SEED))
}
