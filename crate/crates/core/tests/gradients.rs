use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2svc::autodiff::Eager;
use s2svc::loss::LossWeights;
use s2svc::model::{standard_normal, ModelConfig, StudentModel, TeacherModel};
use s2svc::tensor::Tensor;
use s2svc::train::{student_grad_check, teacher_grad_check, TrainPair};

fn tiny() -> ModelConfig {
    ModelConfig {
        bands: 8,
        reduction: 1,
        context: 8,
        embedding: 2,
        kernel_size: 3,
        dilations: vec![1, 2],
        noise_dim: 2,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn total_student_loss_matches_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (seed, n, m) in [(1u64, 5usize, 6usize), (2, 6, 4), (3, 4, 4)] {
        let teacher = TeacherModel::<f64>::new(cfg.clone(), seed).unwrap();
        let student = StudentModel::<f64>::new(cfg.clone(), seed + 100).unwrap();
        let pair = TrainPair::new("p", random(&mut rng, 8, n), 1, &random(&mut rng, 8, m), 2).unwrap();
        let (_, a) = teacher.teacher_forward_forced(&mut Eager, &pair.source, 1, &pair.target, 2).unwrap();
        let noise = standard_normal(&mut rng, cfg.noise_dim, n);
        let report = student_grad_check(&student, &pair, &a, &noise, &LossWeights::default(), 1e-4).unwrap();
        assert!(report.entries_checked > 500);
        assert!(report.max_relative_error <= 1e-3, "seed {seed}: {report:?}");
    }
}

#[test]
fn teacher_objective_matches_finite_differences() {
    let cfg = ModelConfig { weight_norm: true, ..tiny() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (seed, n, m) in [(4u64, 5usize, 6usize), (5, 6, 3)] {
        let teacher = TeacherModel::<f64>::new(cfg.clone(), seed).unwrap();
        let pair = TrainPair::new("p", random(&mut rng, 8, n), 2, &random(&mut rng, 8, m), 1).unwrap();
        let report = teacher_grad_check(&teacher, &pair, &LossWeights::default(), 1e-4).unwrap();
        assert!(report.max_relative_error <= 1e-3, "seed {seed}: {report:?}");
    }
}
