use std::sync::OnceLock;

use classpoison::attacks::{as_attack_grad, craft_as_poison, craft_ov_poisonset, dgm_poison, flipped_label};
use classpoison::datasets::{generate_blobs, split};
use classpoison::harness::{export_curves, lr_sensitivity_sweep, pretrain, read_curves, run_as_experiment, PretrainConfig};
use classpoison::metrics::{accuracy, predict_all};
use classpoison::{
    ASConfig, ASExperiment, BlobSpec, Dataset, LrSchedule, MlpModel, OVConfig, Phase, SessionInputs, TensorImage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    train: Dataset,
    test: Dataset,
    model: MlpModel,
    steps: u64,
    schedule: LrSchedule,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = BlobSpec {
            k_classes: 4,
            dim: 4,
            n_per_class: 100,
            center_separation: 0.5,
            noise_sigma: 0.05,
            rng_seed: 11,
        };
        let (train, test) = split(&generate_blobs(&spec).unwrap(), 0.8, 11).unwrap();
        let schedule = LrSchedule::new(0.1, 0.9, 500).unwrap();
        let cfg = PretrainConfig {
            epochs: 20,
            batch_size: 16,
            schedule,
            seed: 11,
        };
        let pre = pretrain(MlpModel::new(&[4, 16, 4], 11).unwrap(), &train, &cfg, None).unwrap();
        Fixture {
            train,
            test,
            model: pre.model,
            steps: pre.steps,
            schedule,
        }
    })
}

fn inputs(f: &Fixture) -> SessionInputs<'_> {
    SessionInputs {
        base_model: &f.model,
        train: &f.train,
        test: &f.test,
        schedule: f.schedule,
        start_step: f.steps,
        seed: 4,
    }
}

#[test]
fn twenty_epoch_pretrain_separates_blobs() {
    let f = fixture();
    let acc = accuracy(&predict_all(&f.model, &f.test, Phase::Before).unwrap());
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn snapshot_accuracy_matches_per_example_count() {
    let f = fixture();
    let snap = predict_all(&f.model, &f.test, Phase::Before).unwrap();
    let hits = f
        .test
        .examples()
        .iter()
        .filter(|e| f.model.predict(&e.image).unwrap() == e.label)
        .count();
    assert_eq!(accuracy(&snap), hits as f64 / f.test.len() as f64);
}

#[test]
fn as_poison_keeps_original_and_lowers_supplanter_logit() {
    let f = fixture();
    let cfg = ASConfig::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let candidates: Vec<_> = f.test.examples().iter().filter(|e| e.label != 0).collect();
    let mut good = 0;
    for _ in 0..50 {
        let seed = candidates[rng.random_range(0..candidates.len())];
        let p = craft_as_poison(&f.model, seed, &cfg).unwrap();
        let before = f.model.forward(&seed.image).unwrap();
        let after = f.model.forward(&p.image).unwrap();
        if after.get(seed.label) >= before.get(seed.label) && after.get(0) <= before.get(0) {
            good += 1;
        }
    }
    assert!(good >= 40, "{good} of 50");
}

#[test]
fn ov_non_victim_poison_raises_own_logit() {
    let f = fixture();
    let cfg = OVConfig::new(1, 2);
    let seeds: Vec<Vec<_>> = (0..4)
        .map(|k| {
            f.train
                .indices_of_class(k)
                .into_iter()
                .take(15)
                .map(|i| f.train.get(i).clone())
                .collect()
        })
        .collect();
    let poisons = craft_ov_poisonset(&f.model, &seeds, &cfg).unwrap();
    let mut total = 0;
    let mut good = 0;
    for (p, seed) in poisons.iter().zip(seeds.iter().flatten()) {
        if seed.label == cfg.victim {
            continue;
        }
        total += 1;
        let before = f.model.forward(&seed.image).unwrap().get(seed.label);
        let after = f.model.forward(&p.image).unwrap().get(seed.label);
        if after >= before {
            good += 1;
        }
    }
    assert!(good * 10 >= total * 8, "{good} of {total}");
}

#[test]
fn dgm_raises_training_loss() {
    let f = fixture();
    let mut good = 0;
    let n = 50;
    for seed in f.test.examples().iter().take(n) {
        let target = (seed.label + 1) % 4;
        let p = dgm_poison(&f.model, seed, 10, 0.05, target).unwrap();
        let before = f.model.train_loss(&seed.image, seed.label).unwrap();
        let after = f.model.train_loss(&p.image, seed.label).unwrap();
        if after >= before {
            good += 1;
        }
    }
    assert!(good * 10 >= n * 9, "{good} of {n}");
}

#[test]
fn dgm_with_zero_epsilon_keeps_pixels() {
    let f = fixture();
    let seed = f.test.get(0);
    let p = dgm_poison(&f.model, seed, 3, 0.0, (seed.label + 1) % 4).unwrap();
    assert_eq!(p.image.linf_distance(&seed.image), 0.0);
}

#[test]
fn flipping_twice_equals_flipping_once() {
    let seed = fixture().test.get(3);
    let a = (seed.label + 1) % 4;
    let b = (seed.label + 2) % 4;
    let once = flipped_label(seed, b).unwrap();
    let twice = flipped_label(&flipped_label(seed, a).unwrap().to_example(), b).unwrap();
    assert_eq!(once.image, twice.image);
    assert_eq!(once.assigned_label, twice.assigned_label);
}

#[test]
fn as_grad_matches_finite_differences_on_trained_model() {
    let f = fixture();
    let h = 1e-6;
    for seed in f.test.examples().iter().filter(|e| e.label != 2).take(10) {
        let g = as_attack_grad(&f.model, &seed.image, seed.label, 2, 0.5).unwrap();
        let obj = |x: &[f64]| {
            let z = f.model.forward(&TensorImage::clipped(x.to_vec())).unwrap();
            -z.get(seed.label) + 0.5 * z.get(2)
        };
        let x = seed.image.pixels();
        for i in 0..x.len() {
            if x[i] < h || x[i] > 1.0 - h {
                continue;
            }
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (obj(&up) - obj(&dn)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "pixel {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn as_grad_with_zero_lambda_is_negated_class_gradient() {
    let f = fixture();
    let seed = f.test.examples().iter().find(|e| e.label != 3).unwrap();
    let g = as_attack_grad(&f.model, &seed.image, seed.label, 3, 0.0).unwrap();
    let mut coeffs = vec![0.0; 4];
    coeffs[seed.label] = 1.0;
    let own = f.model.backward_logit_combo(&seed.image, &coeffs).unwrap();
    for (a, b) in g.iter().zip(&own) {
        assert_eq!(*a, -b);
    }
}

#[test]
fn sweep_with_zero_rate_is_flat_and_duplicates_match() {
    let f = fixture();
    let mut exp = ASExperiment::new(ASConfig::new(0));
    exp.attack_iterations = 6;
    let runs = lr_sensitivity_sweep(&inputs(f), &exp, &[0.0, 0.05, 0.05]).unwrap();
    assert_eq!(runs.len(), 3);
    let base_error = runs[0].1.curve[0].error;
    for p in &runs[0].1.curve {
        assert_eq!(p.ctt(), Some(0.0));
        assert_eq!(p.error, base_error);
    }
    assert_eq!(runs[1].1.curve, runs[2].1.curve);
}

#[test]
fn one_iteration_export_has_one_row() {
    let f = fixture();
    let mut exp = ASExperiment::new(ASConfig::new(1));
    exp.attack_iterations = 1;
    let (session, _) = run_as_experiment(&inputs(f), &exp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    export_curves(&session, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let parsed = read_curves(&path).unwrap();
    assert_eq!(parsed.len(), 1);
}
