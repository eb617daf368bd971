//! Mini-batch training loops for the teacher and the student.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, GradCheckReport, Ops, Tape, Var};
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::loss::{self, LossParts, LossWeights};
use crate::model::{standard_normal, OutputLength, StudentModel, TeacherModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub shuffle_seed: u64,
    pub noise_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 16,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            shuffle_seed: 0,
            noise_seed: 1,
        }
    }
}

/// One parallel training example; `target` carries the SOS frame in column 1.
#[derive(Clone, Debug)]
pub struct TrainPair<T> {
    pub id: String,
    pub source: Tensor<T>,
    pub source_class: usize,
    pub target: Tensor<T>,
    pub target_class: usize,
}

impl<T: Scalar> TrainPair<T> {
    pub fn new(id: impl Into<String>, source: Tensor<T>, source_class: usize, target: &Tensor<T>, target_class: usize) -> Result<Self> {
        let target = with_sos(target)?;
        Ok(Self { id: id.into(), source, source_class, target, target_class })
    }

    /// Target length `M` without the SOS frame.
    pub fn target_len(&self) -> usize {
        self.target.cols() - 1
    }
}

/// Prepends the all-zero start frame.
pub fn with_sos<T: Scalar>(target: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, m) = target.expect_matrix("with_sos")?;
    if m == 0 {
        return Err(Error::Empty("target sequence"));
    }
    Ok(Tensor::from_fn(d, m + 1, |r, c| if c == 0 { T::zero() } else { target.at(r, c - 1) }))
}

/// Per-iteration mean losses.
#[derive(Clone, Debug, Default)]
pub struct LossCurve {
    pub records: Vec<(usize, LossParts)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,L0,L1,L2,L3\n");
        for (i, p) in &self.records {
            s.push_str(&format!("{i},{},{},{},{},{}\n", p.total, p.l0, p.l1, p.l2, p.l3));
        }
        s
    }

    pub fn first(&self) -> Option<LossParts> {
        self.records.first().map(|r| r.1)
    }

    pub fn last(&self) -> Option<LossParts> {
        self.records.last().map(|r| r.1)
    }
}

/// Epoch-wise shuffled batch order.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn accumulate<T: Scalar>(acc: &mut [Option<Tensor<T>>], grads: Vec<Option<Tensor<T>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn check_config(pairs: usize, cfg: &TrainConfig) -> Result<()> {
    if pairs == 0 {
        return Err(Error::Empty("training corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    cfg.weights.validate()
}

/// Teacher objective and its gradient for one pair, scaled by `scale`.
pub fn teacher_pair_step<T: Scalar>(
    teacher: &TeacherModel<T>,
    pair: &TrainPair<T>,
    weights: &LossWeights,
    scale: f64,
) -> Result<(LossParts, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let xs = tape.leaf(pair.source.clone(), false)?;
    let xt = tape.leaf(pair.target.clone(), false)?;
    let (y, a) = teacher.teacher_forward_forced(&mut tape, &xs, pair.source_class, &xt, pair.target_class)?;
    let (total, parts) = loss::teacher_pair_loss(&mut tape, weights, &y, &xt, &a)?;
    let scaled = tape.scale(&total, T::of(scale))?;
    tape.backward(scaled)?;
    Ok((parts, tape.param_grads(&teacher.store)))
}

pub fn train_teacher<T: Scalar>(
    teacher: &mut TeacherModel<T>,
    pairs: &[TrainPair<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &LossParts),
) -> Result<LossCurve> {
    check_config(pairs.len(), cfg)?;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut batcher = Batcher::new(pairs.len(), cfg.shuffle_seed);
    let mut curve = LossCurve::default();
    for it in 1..=cfg.iterations {
        let batch = batcher.next(cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = vec![None; teacher.store.len()];
        let mut mean = LossParts::default();
        for &i in &batch {
            let (parts, g) = teacher_pair_step(teacher, &pairs[i], &cfg.weights, scale)?;
            accumulate(&mut grads, g);
            mean.accumulate(parts.scaled(scale));
        }
        adam.step(&mut teacher.store, &grads)?;
        progress(it, &mean);
        curve.records.push((it, mean));
    }
    Ok(curve)
}

/// Frozen-encoder output and teacher attention for one pair.
#[derive(Clone, Debug)]
pub struct StudentTarget<T> {
    pub context: Tensor<T>,
    pub teacher_attention: Tensor<T>,
}

pub fn prepare_student_targets<T: Scalar>(
    teacher: &TeacherModel<T>,
    student: &StudentModel<T>,
    pairs: &[TrainPair<T>],
) -> Result<Vec<StudentTarget<T>>> {
    pairs
        .iter()
        .map(|p| {
            let context = student.encode_source(&mut Eager, &p.source, p.source_class)?;
            let (_, a) = teacher.teacher_forward_forced(&mut Eager, &p.source, p.source_class, &p.target, p.target_class)?;
            Ok(StudentTarget { context, teacher_attention: a })
        })
        .collect()
}

/// Student objective for one pair, evaluated with `ops`.
pub fn student_pair_loss<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    student: &StudentModel<T>,
    pair: &TrainPair<T>,
    target: &StudentTarget<T>,
    noise: Tensor<T>,
    weights: &LossWeights,
) -> Result<(O::Val, LossParts)> {
    let z = ops.constant(target.context.clone())?;
    student_loss_from_context(ops, student, pair, &z, &target.teacher_attention, noise, weights)
}

fn student_loss_from_context<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    student: &StudentModel<T>,
    pair: &TrainPair<T>,
    z: &O::Val,
    teacher_attention: &Tensor<T>,
    noise: Tensor<T>,
    weights: &LossWeights,
) -> Result<(O::Val, LossParts)> {
    let z = z.clone();
    let xt = ops.constant(pair.target.clone())?;
    let noise = ops.constant(noise)?;
    let constrained = student.attention_predictor_forward(ops, &z, pair.source_class, pair.target_class, &noise)?;
    let out = student.convert_from_context(ops, &z, constrained, pair.target_class, OutputLength::Fixed(pair.target_len()))?;
    loss::student_pair_loss(
        ops,
        weights,
        &out.y,
        &xt,
        &out.alpha,
        &out.constrained.centers,
        &out.constrained.sigmas,
        teacher_attention,
    )
}

/// Mean student objective over `pairs` with zero noise.
pub fn evaluate_student_loss<T: Scalar>(
    student: &StudentModel<T>,
    pairs: &[TrainPair<T>],
    targets: &[StudentTarget<T>],
    weights: &LossWeights,
) -> Result<LossParts> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut mean = LossParts::default();
    for (p, t) in pairs.iter().zip(targets) {
        let noise = Tensor::zeros(&[student.config.noise_dim, p.source.cols()]);
        let (_, parts) = student_pair_loss(&mut Eager, student, p, t, noise, weights)?;
        mean.accumulate(parts.scaled(1.0 / pairs.len() as f64));
    }
    Ok(mean)
}

/// Mean teacher objective over `pairs`.
pub fn evaluate_teacher_loss<T: Scalar>(teacher: &TeacherModel<T>, pairs: &[TrainPair<T>], weights: &LossWeights) -> Result<LossParts> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut mean = LossParts::default();
    for p in pairs {
        let mut ops = Eager;
        let (y, a) = teacher.teacher_forward_forced(&mut ops, &p.source, p.source_class, &p.target, p.target_class)?;
        let (_, parts) = loss::teacher_pair_loss(&mut ops, weights, &y, &p.target, &a)?;
        mean.accumulate(parts.scaled(1.0 / pairs.len() as f64));
    }
    Ok(mean)
}

pub fn train_student<T: Scalar>(
    student: &mut StudentModel<T>,
    pairs: &[TrainPair<T>],
    targets: &[StudentTarget<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &LossParts),
) -> Result<LossCurve> {
    check_config(pairs.len(), cfg)?;
    if targets.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!("{} teacher targets for {} pairs", targets.len(), pairs.len())));
    }
    let mut adam = Adam::new(cfg.adam.clone());
    let mut batcher = Batcher::new(pairs.len(), cfg.shuffle_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let mut curve = LossCurve::default();
    for it in 1..=cfg.iterations {
        let batch = batcher.next(cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = vec![None; student.store.len()];
        let mut mean = LossParts::default();
        for &i in &batch {
            let noise = standard_normal(&mut noise_rng, student.config.noise_dim, pairs[i].source.cols());
            let mut tape = Tape::new();
            let (total, parts) = student_pair_loss(&mut tape, student, &pairs[i], &targets[i], noise, &cfg.weights)?;
            let scaled = tape.scale(&total, T::of(scale))?;
            tape.backward(scaled)?;
            accumulate(&mut grads, tape.param_grads(&student.store));
            mean.accumulate(parts.scaled(scale));
        }
        adam.step(&mut student.store, &grads)?;
        progress(it, &mean);
        curve.records.push((it, mean));
    }
    Ok(curve)
}

/// Gradient magnitude below which differences are measured against this floor
/// rather than the gradient itself; central differences of an objective of
/// size ~100 cannot resolve much finer.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Checks the gradient of the full student objective, encoder included, against
/// central differences on every parameter of a copy with nothing frozen.
pub fn student_grad_check<T: Scalar>(
    student: &StudentModel<T>,
    pair: &TrainPair<T>,
    teacher_attention: &Tensor<T>,
    noise: &Tensor<T>,
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheckReport> {
    store_grad_check(
        student,
        |m| &mut m.store,
        |ops, m| {
            let xs = ops.constant(pair.source.clone())?;
            let z = m.encode_source(ops, &xs, pair.source_class)?;
            Ok(student_loss_from_context(ops, m, pair, &z, teacher_attention, noise.clone(), weights)?.0)
        },
        step,
    )
}

/// Gradient check of the teacher objective on one pair.
pub fn teacher_grad_check<T: Scalar>(
    teacher: &TeacherModel<T>,
    pair: &TrainPair<T>,
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheckReport> {
    store_grad_check(
        teacher,
        |m| &mut m.store,
        |ops, m| {
            let xs = ops.constant(pair.source.clone())?;
            let xt = ops.constant(pair.target.clone())?;
            let (y, a) = m.teacher_forward_forced(ops, &xs, pair.source_class, &xt, pair.target_class)?;
            Ok(loss::teacher_pair_loss(ops, weights, &y, &xt, &a)?.0)
        },
        step,
    )
}

fn store_grad_check<T: Scalar, M: Clone>(
    model: &M,
    store: impl Fn(&mut M) -> &mut ParamStore<T>,
    objective: impl Fn(&mut Tape<T>, &M) -> Result<Var>,
    step: f64,
) -> Result<GradCheckReport> {
    let mut model = model.clone();
    let ids: Vec<_> = store(&mut model).ids().collect();
    for &id in &ids {
        store(&mut model).set_trainable(id, true);
    }
    let mut tape = Tape::new();
    let loss = objective(&mut tape, &model)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads(store(&mut model));
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_entry: None, entries_checked: 0 };
    for (p, &id) in ids.iter().enumerate() {
        for e in 0..store(&mut model).get(id).numel() {
            let orig = store(&mut model).get(id).data()[e];
            let mut eval = |v: T| -> Result<f64> {
                store(&mut model).get_mut(id).data_mut()[e] = v;
                let mut t = Tape::no_grad();
                let l = objective(&mut t, &model)?;
                Ok(t.value(&l).item().to_f64_lossy())
            };
            let plus = eval(orig + T::of(step))?;
            let minus = eval(orig - T::of(step))?;
            store(&mut model).get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[e].to_f64_lossy());
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.entries_checked += 1;
            if report.worst_entry.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_entry = Some((p, e));
            }
        }
    }
    Ok(report)
}

/// Converts a corpus into training pairs of scalar type `T`.
pub fn corpus_pairs<T: Scalar>(corpus: &ParallelCorpus) -> Result<Vec<TrainPair<T>>> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| TrainPair::new(s.id.clone(), s.features.cast(), s.class, &t.features.cast(), t.class))
        .collect()
}

/// Names of parameters whose values differ between two stores.
pub fn changed_parameters<T: Scalar>(before: &ParamStore<T>, after: &ParamStore<T>) -> Vec<String> {
    before
        .entries()
        .iter()
        .zip(after.entries())
        .filter(|(a, b)| a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits_lossy() != y.to_bits_lossy()))
        .map(|(a, _)| a.name.clone())
        .collect()
}

trait Bits {
    fn to_bits_lossy(self) -> u64;
}

impl<T: Scalar> Bits for T {
    fn to_bits_lossy(self) -> u64 {
        self.to_f64_lossy().to_bits()
    }
}
