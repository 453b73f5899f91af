mod common;

use common::{default_fixture, world_for, LIBRARY_SEED, SEEN_SAMPLES, TRAIN_SEED, UNSEEN_SAMPLES};
use sage::factorization::{encode, sparsity_loss, train, FactorizationModel, TrainConfig};
use sage::io::model_file::{decode_model, encode_model};
use sage::latent::{irrelevant_delta, CategoryLibrary, Role};
use sage::pipeline::{Generator, Method};
use sage::stable::EditConfig;
use sage::world::{sample_library, World};

fn train_with(world: &World, library: &CategoryLibrary, f: impl FnOnce(&mut TrainConfig)) -> FactorizationModel {
    let mut cfg = TrainConfig {
        seed: TRAIN_SEED,
        iterations: 1500,
        ..TrainConfig::default()
    };
    f(&mut cfg);
    train(library, world, &cfg).unwrap()
}

/// Mean soft active count and mean absolute code over the seen samples of `library`.
fn code_statistics(model: &FactorizationModel, library: &CategoryLibrary) -> (f64, f64) {
    let (t0, t1) = (model.config.theta0, model.config.theta1);
    let (mut soft, mut abs, mut n, mut k) = (0.0, 0.0, 0usize, 0usize);
    for (id, cat) in library.iter().filter(|(_, c)| c.role == Role::Seen) {
        let e = model.relevant.embedding_of(id).unwrap();
        for w in &cat.codes {
            let code = encode(&irrelevant_delta(w, &e).unwrap(), &model.encoder).unwrap();
            soft += sparsity_loss(&code, t0, t1);
            abs += code.values().iter().map(|v| v.abs()).sum::<f64>();
            n += 1;
            k += code.values().len();
        }
    }
    (soft / n as f64, abs / k as f64)
}

/// Largest per-layer `‖B[ℓ]ᵀA[ℓ]‖_F / (‖B[ℓ]‖_F ‖A[ℓ]‖_F)`.
fn max_normalized_overlap(model: &FactorizationModel) -> f64 {
    (0..model.dictionary.num_layers())
        .map(|l| {
            let b = model.relevant.layer(l);
            let a = model.dictionary.layer(l);
            b.tr_matmul(a).unwrap().frobenius_norm() / (b.frobenius_norm() * a.frobenius_norm())
        })
        .fold(0.0, f64::max)
}

#[test]
fn sparsity_weight_lowers_the_soft_active_count() {
    let world = world_for(1);
    let library = sample_library(&world, SEEN_SAMPLES, UNSEEN_SAMPLES, LIBRARY_SEED).unwrap();
    let free = train_with(&world, &library, |c| c.lambda2 = 0.0);
    let sparse = train_with(&world, &library, |c| c.lambda2 = 0.005);
    let held_out = sample_library(&world, 20, 1, LIBRARY_SEED + 100).unwrap();
    let (soft_free, abs_free) = code_statistics(&free, &held_out);
    let (soft_sparse, abs_sparse) = code_statistics(&sparse, &held_out);
    eprintln!("soft count {soft_free:.4} -> {soft_sparse:.4}, mean |n| {abs_free:.4} -> {abs_sparse:.4}");
    assert!(soft_sparse < soft_free, "soft count {soft_sparse} not below {soft_free}");
}

#[test]
fn orthogonality_weight_keeps_dictionaries_apart() {
    let f = default_fixture();
    let trained = max_normalized_overlap(&f.model);
    assert!(trained < 0.05, "normalized overlap {trained}");
    let free = train_with(&f.world, &f.library, |c| {
        c.lambda1 = 0.0;
        c.iterations = 3000;
    });
    let unconstrained = max_normalized_overlap(&free);
    eprintln!("normalized overlap {trained:.4} with the penalty, {unconstrained:.4} without");
    assert!(trained < unconstrained);
}

#[test]
fn training_is_deterministic_and_loss_decreases() {
    let f = default_fixture();
    let again = train_with(&f.world, &f.library, |c| c.iterations = 3000);
    assert_eq!(again, f.model);
    let log = &f.model.log;
    assert_eq!(log.len(), 3000);
    let head: f64 = log[..100].iter().map(|r| r.total).sum::<f64>() / 100.0;
    let tail: f64 = log[log.len() - 100..].iter().map(|r| r.total).sum::<f64>() / 100.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert!(log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn reloaded_model_generates_identical_codes() {
    let f = default_fixture();
    let bytes = encode_model(&f.model).unwrap();
    let back = decode_model(&bytes).unwrap();
    assert_eq!(back, f.model);
    assert_eq!(encode_model(&back).unwrap(), bytes);
    let targets = f.library.filter_role(Role::Unseen);
    let cfg = EditConfig {
        shots: 3,
        t_b: vec![6, 10],
        ..EditConfig::default()
    };
    for method in [Method::Age, Method::Sage, Method::SageMulti] {
        let a = Generator::new(&f.model, &f.library).unwrap().generate_library(&targets, method, &cfg, 7, 21).unwrap();
        let b = Generator::new(&back, &f.library).unwrap().generate_library(&targets, method, &cfg, 7, 21).unwrap();
        assert_eq!(a, b, "{method}");
    }
}

#[test]
fn diverging_training_is_reported() {
    let world = world_for(1);
    let library = sample_library(&world, 4, 2, LIBRARY_SEED).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        iterations: 50,
        init_std: 1e150,
        ..TrainConfig::default()
    };
    match train(&library, &world, &cfg) {
        Err(sage::Error::TrainingDiverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|m| m.log.len())),
    }
}
