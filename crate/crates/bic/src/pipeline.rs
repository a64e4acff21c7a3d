//! Two-stage incremental training across class increments, plus the
//! ablation variants (classification-only and distilled baselines, the
//! FC-retrain and joint-training upper bounds).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{apply_bias, fit_bias_on_logits, BiasFitConfig, BiasParams};
use crate::data::{ClassSchedule, Dataset, IncrementTask, LabeledSample};
use crate::error::{BicError, Result};
use crate::exemplar::{select_herding, select_random, split_train_val, ExemplarStore, SelectionStrategy, SplitSets};
use crate::losses::{cls_loss, combined_loss, distill_loss, lambda_for, LossValue};
use crate::matrix::DenseMatrix;
use crate::nn::{sgd_step, FrozenModel, LrSchedule, NetworkModel, OptimizerState};
use crate::report::{evaluate, RunReport, StepReport};

/// The experiment variants of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline1,
    Baseline2,
    Bic,
    FcRetrainUb,
    JointUb,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline1,
        Variant::Baseline2,
        Variant::Bic,
        Variant::FcRetrainUb,
        Variant::JointUb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline1 => "baseline1",
            Variant::Baseline2 => "baseline2",
            Variant::Bic => "bic",
            Variant::FcRetrainUb => "fc_retrain_ub",
            Variant::JointUb => "joint_ub",
        }
    }
}

impl FromStr for Variant {
    type Err = BicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline1" => Ok(Variant::Baseline1),
            "baseline2" => Ok(Variant::Baseline2),
            "bic" => Ok(Variant::Bic),
            "fc_retrain_ub" => Ok(Variant::FcRetrainUb),
            "joint_ub" => Ok(Variant::JointUb),
            other => Err(BicError::Config(format!(
                "unknown variant '{other}' (expected baseline1, baseline2, bic, fc_retrain_ub or joint_ub)"
            ))),
        }
    }
}

/// Hyperparameters of one incremental run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub hidden_dim: usize,
    pub split_ratio: (usize, usize),
    pub exemplar_budget: usize,
    pub selection: SelectionStrategy,
    pub bias_fit: BiasFitConfig,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.1,
            lr_decay_epochs: vec![18, 24],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            temperature: 2.0,
            hidden_dim: 128,
            split_ratio: (9, 1),
            exemplar_budget: 200,
            selection: SelectionStrategy::Herding,
            bias_fit: BiasFitConfig::default(),
            seed: 0,
            variant: Variant::Bic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(BicError::Config("train.epochs must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(BicError::Config("train.temperature must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(BicError::Config("train.batch_size must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(BicError::Config("train.hidden_dim must be >= 1".into()));
        }
        self.schedule().validate().map_err(|_| {
            BicError::Config("train.base_lr and decay factor must be positive".into())
        })
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            steps: self
                .lr_decay_epochs
                .iter()
                .map(|&e| (e, self.lr_decay_factor))
                .collect(),
        }
    }
}

/// The distillation teacher: a frozen snapshot plus the bias correction
/// fitted at its own increment, absorbed into its new-class logits.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: FrozenModel,
    pub bias: Option<BiasParams>,
}

impl Teacher {
    /// Corrected teacher logits over the first `n` classes.
    pub fn logits(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        let raw = self.model.forward(inputs)?;
        match &self.bias {
            None => Ok(raw),
            Some(b) => {
                let mut out = DenseMatrix::zeros(raw.rows(), raw.cols());
                for r in 0..raw.rows() {
                    let q = apply_bias(raw.row(r), b.new_class_range.0, b)?;
                    out.row_mut(r).copy_from_slice(&q);
                }
                Ok(out)
            }
        }
    }
}

/// Mutable state carried across increments.
#[derive(Debug, Clone)]
pub struct IncrementalState {
    pub step: usize,
    /// Classes learned before the current increment.
    pub n: usize,
    /// New classes of the latest completed increment.
    pub m: usize,
    pub model: Option<NetworkModel>,
    pub teacher: Option<Teacher>,
    pub store: ExemplarStore,
    pub bias_history: Vec<Option<BiasParams>>,
    /// Dataset class id per output slot, in arrival order.
    pub known_classes: Vec<usize>,
    input_dim: usize,
}

impl IncrementalState {
    pub fn new(input_dim: usize, cfg: &TrainConfig) -> Self {
        IncrementalState {
            step: 0,
            n: 0,
            m: 0,
            model: None,
            teacher: None,
            store: ExemplarStore::new(cfg.exemplar_budget),
            bias_history: Vec::new(),
            known_classes: Vec::new(),
            input_dim,
        }
    }

    pub fn class_slot(&self, class: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == class)
    }

    /// Current step's bias parameters, if any.
    pub fn current_bias(&self) -> Option<&BiasParams> {
        self.bias_history.last().and_then(Option::as_ref)
    }
}

fn mix_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn to_slot_samples(state: &IncrementalState, samples: &[LabeledSample]) -> Result<Vec<(Vec<f64>, usize)>> {
    samples
        .iter()
        .map(|s| {
            state
                .class_slot(s.label)
                .map(|slot| (s.features.clone(), slot))
                .ok_or_else(|| BicError::Data(format!("sample {} has unknown class {}", s.id, s.label)))
        })
        .collect()
}

/// Stage-1 training: mini-batch SGD on the lambda-weighted mix of the
/// distillation and classification losses. The distillation targets are
/// the teacher's (bias-absorbed) logits on every sample of the batch.
pub fn train_stage1(
    model: &mut NetworkModel,
    teacher: Option<&Teacher>,
    data: &[(Vec<f64>, usize)],
    old_classes: usize,
    new_classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<()> {
    let lambda = lambda_for(old_classes, new_classes)?;
    let mut opt = OptimizerState::new(cfg.momentum, cfg.weight_decay, cfg.schedule())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for batch in order.chunks(cfg.batch_size) {
            train_batch(model, teacher, data, batch, lambda, old_classes, cfg, &mut opt, epoch)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut NetworkModel,
    teacher: Option<&Teacher>,
    data: &[(Vec<f64>, usize)],
    batch: &[usize],
    lambda: f64,
    old_classes: usize,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|&i| data[i].0.clone()).collect();
    let inputs = DenseMatrix::from_rows(&rows)?;
    let (logits, cache) = model.forward_cached(&inputs)?;
    let teacher_logits = match (teacher, lambda > 0.0) {
        (Some(t), true) => Some(t.logits(&inputs)?),
        _ => None,
    };
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let scale = 1.0 / batch.len() as f64;
    for (bi, &di) in batch.iter().enumerate() {
        let label = data[di].1;
        let row = logits.row(bi);
        let cls = cls_loss(row, label)?;
        let sample_loss: LossValue = match &teacher_logits {
            Some(tl) => {
                let d = distill_loss(tl.row(bi), &row[..old_classes], cfg.temperature)?;
                combined_loss(&d, &cls, lambda)?
            }
            None => {
                // lambda is 0 at the first increment and for the
                // classification-only baseline.
                let empty = LossValue { value: 0.0, grad_logits: Vec::new() };
                combined_loss(&empty, &cls, 0.0)?
            }
        };
        for (k, g) in sample_loss.grad_logits.iter().enumerate() {
            let v = grad.get(bi, k) + g * scale;
            grad.set(bi, k, v);
        }
    }
    let grads = model.backward(&cache, &grad)?;
    sgd_step(model, &grads, opt, epoch)
}

/// Mean stage-1 loss over a sample set, used by descent sanity checks.
pub fn stage1_loss(
    model: &NetworkModel,
    teacher: Option<&Teacher>,
    data: &[(Vec<f64>, usize)],
    old_classes: usize,
    new_classes: usize,
    temperature: f64,
) -> Result<f64> {
    let lambda = lambda_for(old_classes, new_classes)?;
    let rows: Vec<Vec<f64>> = data.iter().map(|(f, _)| f.clone()).collect();
    let inputs = DenseMatrix::from_rows(&rows)?;
    let logits = model.forward(&inputs)?;
    let teacher_logits = match (teacher, lambda > 0.0) {
        (Some(t), true) => Some(t.logits(&inputs)?),
        _ => None,
    };
    let mut total = 0.0;
    for (i, (_, label)) in data.iter().enumerate() {
        let row = logits.row(i);
        let cls = cls_loss(row, *label)?;
        total += match &teacher_logits {
            Some(tl) => {
                let d = distill_loss(tl.row(i), &row[..old_classes], temperature)?;
                lambda * d.value + (1.0 - lambda) * cls.value
            }
            None => cls.value,
        };
    }
    Ok(total / data.len() as f64)
}

/// Stage-2: fits the bias parameters on the balanced validation set and
/// records them in the state's history. The network is left untouched.
pub fn train_stage2(
    state: &IncrementalState,
    sets: &SplitSets,
    cfg: &TrainConfig,
) -> Result<BiasParams> {
    let model = state.model.as_ref().ok_or_else(|| {
        BicError::Argument("stage 2 requires a trained model".into())
    })?;
    let val: Vec<&LabeledSample> = sets.val_old.iter().chain(&sets.val_new).collect();
    let slots: Vec<usize> = val
        .iter()
        .map(|s| {
            state
                .class_slot(s.label)
                .ok_or_else(|| BicError::Data(format!("val sample {} has unknown class", s.id)))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = val.iter().map(|s| s.features.clone()).collect();
    let logits = model.forward(&DenseMatrix::from_rows(&rows)?)?;
    fit_bias_on_logits(&logits, &slots, state.n, state.m, &cfg.bias_fit)
}

/// Runs one increment: split, expand, stage-1 training, optional stage-2
/// bias fit, teacher snapshot, exemplar update.
pub fn run_increment(
    state: &mut IncrementalState,
    task: &IncrementTask,
    cfg: &TrainConfig,
) -> Result<()> {
    let m = task.new_classes.len();
    if m == 0 {
        return Err(BicError::Data("increment carries no new classes".into()));
    }
    for c in &task.new_classes {
        if state.known_classes.contains(c) {
            return Err(BicError::Data(format!("class {c} was already seen")));
        }
    }
    let step = state.step;
    let n = state.known_classes.len();

    let mut new_map: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
    for s in &task.train_new {
        new_map.entry(s.label).or_default().push(s.clone());
    }
    if new_map.len() != m {
        return Err(BicError::Data(
            "new-class training data does not cover every new class".into(),
        ));
    }
    let sets = split_train_val(
        &state.store,
        &new_map,
        cfg.split_ratio,
        mix_seed(cfg.seed, 0x500 + step as u64),
    )?;

    // Grow (or create) the classifier head.
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x11 + step as u64));
    match &mut state.model {
        None => {
            state.model = Some(NetworkModel::new(
                state.input_dim,
                &[cfg.hidden_dim],
                m,
                &mut init_rng,
            )?);
        }
        Some(model) => model.expand_output(m, &mut init_rng)?,
    }
    state.known_classes.extend(&task.new_classes);
    state.n = n;
    state.m = m;

    // Stage 1 on the joint shuffled training union.
    let mut train: Vec<LabeledSample> = sets.train_old.clone();
    train.extend(sets.train_new.iter().cloned());
    let slot_data = to_slot_samples(state, &train)?;
    let teacher = state.teacher.clone();
    let use_distill = cfg.variant != Variant::Baseline1;
    {
        let model = state.model.as_mut().unwrap();
        let effective_teacher = if use_distill { teacher.as_ref() } else { None };
        let effective_n = if use_distill && effective_teacher.is_some() { n } else { 0 };
        // With no teacher (step 0) or distillation disabled, lambda
        // collapses to 0 and training is plain cross-entropy.
        train_stage1(
            model,
            effective_teacher,
            &slot_data,
            effective_n,
            if effective_n == 0 { n + m } else { m },
            cfg,
            mix_seed(cfg.seed, 0x53 + step as u64),
        )?;
    }

    // Stage 2.
    let fitted = if cfg.variant == Variant::Bic && step > 0 {
        Some(train_stage2(state, &sets, cfg)?)
    } else {
        None
    };
    state.bias_history.push(fitted);

    // Snapshot the deployed classifier as the next teacher.
    state.teacher = Some(Teacher {
        model: FrozenModel::snapshot(state.model.as_ref().unwrap()),
        bias: fitted,
    });

    // Select exemplars for the new classes with the just-trained model's
    // features, then rebalance the whole store to the budget.
    for (class, samples) in &new_map {
        let ordered = match cfg.selection {
            SelectionStrategy::Random => {
                let (sel, _) = select_random(
                    samples,
                    samples.len(),
                    mix_seed(cfg.seed, 0x77 + *class as u64),
                );
                sel
            }
            SelectionStrategy::Herding => {
                let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
                let feats = state
                    .model
                    .as_ref()
                    .unwrap()
                    .features(&DenseMatrix::from_rows(&rows)?)?;
                let feat_rows: Vec<Vec<f64>> = feats.iter_rows().map(|r| r.to_vec()).collect();
                let order = select_herding(&feat_rows, samples.len())?;
                order.into_iter().map(|i| samples[i].clone()).collect()
            }
        };
        state.store.insert_class(*class, ordered)?;
    }
    state.store.rebalance(state.known_classes.len())?;

    state.step += 1;
    Ok(())
}

/// Oracle variant: clones the model, freezes everything but the final
/// affine layer and retrains it with the classification loss on the full
/// training data of every seen class.
pub fn run_fc_retrain_upper_bound(
    model: &NetworkModel,
    all_data: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NetworkModel> {
    let mut retrained = model.clone();
    // The feature layers are frozen, so features can be computed once and
    // the head trained as a standalone linear model.
    let rows: Vec<Vec<f64>> = all_data.iter().map(|(f, _)| f.clone()).collect();
    let features = model.features(&DenseMatrix::from_rows(&rows)?)?;
    let feature_data: Vec<(Vec<f64>, usize)> = features
        .iter_rows()
        .zip(all_data)
        .map(|(f, (_, label))| (f.to_vec(), *label))
        .collect();

    let head_layer = model.layers().last().unwrap().clone();
    let mut head = NetworkModel::from_single_layer(head_layer);
    let head_cfg = TrainConfig {
        variant: Variant::Baseline1,
        ..cfg.clone()
    };
    train_stage1(&mut head, None, &feature_data, 0, model.output_dim(), &head_cfg, seed)?;

    *retrained.layers_mut().last_mut().unwrap() = head.layers()[0].clone();
    Ok(retrained)
}

/// Oracle variant: a fresh model trained non-incrementally on all data of
/// the seen classes.
pub fn run_joint_upper_bound(
    input_dim: usize,
    num_classes: usize,
    all_data: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NetworkModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xab));
    let mut model = NetworkModel::new(input_dim, &[cfg.hidden_dim], num_classes, &mut rng)?;
    let joint_cfg = TrainConfig {
        variant: Variant::Baseline1,
        ..cfg.clone()
    };
    train_stage1(&mut model, None, all_data, 0, num_classes, &joint_cfg, mix_seed(seed, 0xcd))?;
    Ok(model)
}

/// Remaps test samples onto output slots.
fn slot_test_set(state: &IncrementalState, test: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
    test.iter()
        .map(|s| {
            state
                .class_slot(s.label)
                .map(|slot| LabeledSample {
                    features: s.features.clone(),
                    label: slot,
                    id: s.id,
                })
                .ok_or_else(|| {
                    BicError::Data(format!("test sample {} has unseen class {}", s.id, s.label))
                })
        })
        .collect()
}

/// Runs a full incremental experiment for one variant, evaluating after
/// every increment. Writes per-step checkpoints when `checkpoint_dir` is
/// given.
pub fn run_variant(
    dataset: &Dataset,
    sched: &ClassSchedule,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let tasks = crate::data::schedule(dataset, sched)?;
    let mut state = IncrementalState::new(dataset.feature_dim, cfg);
    let mut report = RunReport {
        variant: cfg.variant.name().to_string(),
        seed: cfg.seed,
        config: BTreeMap::new(),
        steps: Vec::new(),
        degradation: None,
    };
    // Full per-class training data accumulated for the oracle variants.
    let mut all_train: Vec<LabeledSample> = Vec::new();

    for task in &tasks {
        run_increment(&mut state, task, cfg)?;
        all_train.extend(task.train_new.iter().cloned());
        let test = slot_test_set(&state, &task.test_seen)?;
        let classes_seen = state.known_classes.len();
        let n = state.n;
        let m = state.m;

        let (accuracy, confusion, bias) = match cfg.variant {
            Variant::Baseline1 | Variant::Baseline2 => {
                let (acc, cm) =
                    evaluate(state.model.as_ref().unwrap(), None, &test, n, m)?;
                (acc, cm, None)
            }
            Variant::Bic => {
                let bias = state.current_bias().copied();
                let (acc, cm) =
                    evaluate(state.model.as_ref().unwrap(), bias.as_ref(), &test, n, m)?;
                (acc, cm, bias)
            }
            Variant::FcRetrainUb => {
                let slot_all = to_slot_samples(&state, &all_train)?;
                let retrained = run_fc_retrain_upper_bound(
                    state.model.as_ref().unwrap(),
                    &slot_all,
                    cfg,
                    mix_seed(cfg.seed, 0xfc + task.step as u64),
                )?;
                let (acc, cm) = evaluate(&retrained, None, &test, n, m)?;
                (acc, cm, None)
            }
            Variant::JointUb => {
                let slot_all = to_slot_samples(&state, &all_train)?;
                let joint = run_joint_upper_bound(
                    dataset.feature_dim,
                    classes_seen,
                    &slot_all,
                    cfg,
                    mix_seed(cfg.seed, 0x10 + task.step as u64),
                )?;
                let (acc, cm) = evaluate(&joint, None, &test, n, m)?;
                (acc, cm, None)
            }
        };

        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| BicError::io(dir.display().to_string(), e))?;
            let model_path = dir.join(format!("model_step{}.json", task.step));
            let json = serde_json::to_vec(state.model.as_ref().unwrap())
                .map_err(|e| BicError::Data(format!("model serialization failed: {e}")))?;
            std::fs::write(&model_path, json)
                .map_err(|e| BicError::io(model_path.display().to_string(), e))?;
            state
                .store
                .write_manifest(&dir.join(format!("store_step{}.bin", task.step)))?;
        }

        report.steps.push(StepReport {
            step: task.step,
            classes_seen,
            accuracy,
            bias,
            confusion,
        });
    }
    if cfg.variant == Variant::JointUb {
        report.degradation = Some(0.0);
    }
    Ok(report)
}
