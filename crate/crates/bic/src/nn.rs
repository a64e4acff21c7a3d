//! Dense feed-forward network with exact backpropagation and momentum SGD.
//!
//! The network is a stack of affine layers with a rectifier between them
//! (none after the last). The final layer width is the number of classes
//! known so far and can be grown in place without disturbing existing
//! outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BicError, Result};
use crate::matrix::DenseMatrix;

/// One affine layer: `z = x W^T + b`, weights shaped `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
}

impl Layer {
    fn new_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (in_dim as f64).sqrt();
        let mut weights = DenseMatrix::zeros(out_dim, in_dim);
        for w in weights.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        Layer {
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    /// `out[r] = inputs[r] W^T + b` for every batch row.
    fn affine(&self, inputs: &DenseMatrix) -> DenseMatrix {
        let batch = inputs.rows();
        let mut out = DenseMatrix::zeros(batch, self.out_dim());
        for r in 0..batch {
            let x = inputs.row(r);
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let w = self.weights.row(j);
                let mut acc = self.biases[j];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *oj = acc;
            }
        }
        out
    }
}

/// Layered dense network producing one logit per known class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Cached activations from [`NetworkModel::forward_cached`], consumed by
/// [`NetworkModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: DenseMatrix,
    /// Post-rectifier activations of every hidden layer, in order.
    hidden: Vec<DenseMatrix>,
}

/// Per-layer parameter gradients, shapes mirroring [`NetworkModel`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl NetworkModel {
    /// Fresh network with the given hidden widths. Weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(BicError::Argument("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
        let mut in_dim = input_dim;
        for &h in hidden_dims {
            layers.push(Layer::new_uniform(in_dim, h, rng));
            in_dim = h;
        }
        layers.push(Layer::new_uniform(in_dim, output_dim, rng));
        Ok(NetworkModel { input_dim, layers })
    }

    /// Wraps an existing affine layer as a standalone linear model. Used
    /// to retrain a classifier head over frozen features.
    pub fn from_single_layer(layer: Layer) -> Self {
        NetworkModel {
            input_dim: layer.in_dim(),
            layers: vec![layer],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, inputs: &DenseMatrix) -> Result<()> {
        if inputs.cols() != self.input_dim {
            return Err(BicError::Shape(format!(
                "input dim {} does not match model input dim {}",
                inputs.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Batch forward pass; one logit row per input row.
    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(inputs)?;
        let mut act = self.layers[0].affine(inputs);
        for layer in &self.layers[1..] {
            relu_inplace(&mut act);
            act = layer.affine(&act);
        }
        Ok(act)
    }

    /// Forward pass retaining hidden activations for a later backward pass.
    pub fn forward_cached(&self, inputs: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        self.check_input(inputs)?;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut act = self.layers[0].affine(inputs);
        for layer in &self.layers[1..] {
            relu_inplace(&mut act);
            hidden.push(act.clone());
            act = layer.affine(&act);
        }
        Ok((
            act,
            ForwardCache {
                inputs: inputs.clone(),
                hidden,
            },
        ))
    }

    /// Penultimate-layer activations, used as the feature space for
    /// exemplar herding. For a single affine layer this is the raw input.
    pub fn features(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(inputs)?;
        if self.layers.len() == 1 {
            return Ok(inputs.clone());
        }
        let mut act = self.layers[0].affine(inputs);
        for layer in &self.layers[1..self.layers.len() - 1] {
            relu_inplace(&mut act);
            act = layer.affine(&act);
        }
        relu_inplace(&mut act);
        Ok(act)
    }

    /// Exact gradients of a scalar loss with respect to every parameter,
    /// given the loss gradient at the logits and the matching forward cache.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &DenseMatrix,
    ) -> Result<Gradients> {
        let batch = cache.inputs.rows();
        if grad_logits.rows() != batch || grad_logits.cols() != self.output_dim() {
            return Err(BicError::Shape(format!(
                "logit gradient is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                batch,
                self.output_dim()
            )));
        }
        if cache.hidden.len() != self.layers.len() - 1 {
            return Err(BicError::Argument(
                "forward cache does not match model depth".into(),
            ));
        }

        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                weights: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                biases: vec![0.0; l.out_dim()],
            })
            .collect();

        let mut upstream = grad_logits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer_in: &DenseMatrix = if li == 0 {
                &cache.inputs
            } else {
                &cache.hidden[li - 1]
            };
            accumulate_affine_grads(&upstream, layer_in, &mut grads[li]);
            if li == 0 {
                break;
            }
            // Propagate through the layer and its preceding rectifier.
            let mut down = DenseMatrix::zeros(upstream.rows(), self.layers[li].in_dim());
            for r in 0..upstream.rows() {
                let up = upstream.row(r);
                let act = layer_in.row(r);
                let d = down.row_mut(r);
                for (j, &uj) in up.iter().enumerate() {
                    if uj == 0.0 {
                        continue;
                    }
                    let w = self.layers[li].weights.row(j);
                    for (di, wi) in d.iter_mut().zip(w) {
                        *di += uj * wi;
                    }
                }
                for (di, &ai) in d.iter_mut().zip(act) {
                    if ai <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            upstream = down;
        }
        Ok(Gradients { layers: grads })
    }

    /// Widens the output layer by `extra_classes`, preserving existing
    /// rows bit-exactly. New rows use the same `±1/sqrt(fan_in)` uniform
    /// scheme as fresh layers, with zero biases.
    pub fn expand_output<R: Rng + ?Sized>(&mut self, extra_classes: usize, rng: &mut R) -> Result<()> {
        if extra_classes == 0 {
            return Err(BicError::Argument("extra_classes must be >= 1".into()));
        }
        let last = self.layers.last_mut().expect("model has layers");
        let old_rows = last.weights.rows();
        let fan_in = last.weights.cols();
        let limit = 1.0 / (fan_in as f64).sqrt();
        last.weights.grow_rows(extra_classes);
        for r in old_rows..old_rows + extra_classes {
            for w in last.weights.row_mut(r) {
                *w = rng.gen_range(-limit..limit);
            }
        }
        last.biases.resize(old_rows + extra_classes, 0.0);
        Ok(())
    }

    /// Bitwise checksum over all parameters; used to assert a training
    /// stage left the network untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for l in &self.layers {
            l.weights.data().iter().copied().for_each(&mut mix);
            l.biases.iter().copied().for_each(&mut mix);
        }
        h
    }
}

fn relu_inplace(m: &mut DenseMatrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn accumulate_affine_grads(upstream: &DenseMatrix, layer_in: &DenseMatrix, grad: &mut Layer) {
    let batch = upstream.rows();
    for r in 0..batch {
        let up = upstream.row(r);
        let x = layer_in.row(r);
        for (j, &uj) in up.iter().enumerate() {
            grad.biases[j] += uj;
            if uj == 0.0 {
                continue;
            }
            let w = grad.weights.row_mut(j);
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi += uj * xi;
            }
        }
    }
}

/// Immutable snapshot of a trained model, the distillation teacher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenModel {
    model: NetworkModel,
}

impl FrozenModel {
    pub fn snapshot(model: &NetworkModel) -> Self {
        FrozenModel {
            model: model.clone(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.model.forward(inputs)
    }

    pub fn as_model(&self) -> &NetworkModel {
        &self.model
    }
}

/// Base learning rate with step decay: every threshold at or below the
/// current epoch applies its multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    /// `(epoch_threshold, multiplier)` pairs, multipliers strictly positive.
    pub steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            steps: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base <= 0.0 || self.steps.iter().any(|&(_, m)| m <= 0.0) {
            return Err(BicError::Argument(
                "learning rate and multipliers must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.base;
        for &(threshold, mult) in &self.steps {
            if epoch >= threshold {
                lr *= mult;
            }
        }
        lr
    }
}

/// SGD with momentum and weight decay; velocity buffers mirror the model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    velocities: Option<Vec<Layer>>,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(OptimizerState {
            momentum,
            weight_decay,
            schedule,
            velocities: None,
        })
    }

    fn velocities_for(&mut self, model: &NetworkModel) -> &mut Vec<Layer> {
        let stale = match &self.velocities {
            Some(v) => {
                v.len() != model.layers().len()
                    || v.iter()
                        .zip(model.layers())
                        .any(|(a, b)| a.weights.rows() != b.weights.rows())
            }
            None => true,
        };
        if stale {
            // Output expansion grows the velocity buffer with zero rows.
            let mut fresh: Vec<Layer> = model
                .layers()
                .iter()
                .map(|l| Layer {
                    weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                    biases: vec![0.0; l.biases.len()],
                })
                .collect();
            if let Some(old) = self.velocities.take() {
                for (f, o) in fresh.iter_mut().zip(old) {
                    if f.weights.cols() == o.weights.cols() {
                        let n = o.weights.data().len();
                        f.weights.data_mut()[..n].copy_from_slice(o.weights.data());
                        f.biases[..o.biases.len()].copy_from_slice(&o.biases);
                    }
                }
            }
            self.velocities = Some(fresh);
        }
        self.velocities.as_mut().unwrap()
    }
}

/// One SGD update: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr(epoch)*v`.
pub fn sgd_step(
    model: &mut NetworkModel,
    grads: &Gradients,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    if grads.layers.len() != model.layers().len() {
        return Err(BicError::Shape("gradient depth mismatch".into()));
    }
    for (li, g) in grads.layers.iter().enumerate() {
        if !g.weights.is_finite() || g.biases.iter().any(|b| !b.is_finite()) {
            return Err(BicError::Numeric(format!("gradient of layer {li}")));
        }
    }
    let lr = opt.schedule.lr_at(epoch);
    let momentum = opt.momentum;
    let decay = opt.weight_decay;
    let vel = opt.velocities_for(model);
    for ((layer, g), v) in model.layers_mut().iter_mut().zip(&grads.layers).zip(vel) {
        for ((p, gv), vv) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(g.weights.data())
            .zip(v.weights.data_mut())
        {
            *vv = momentum * *vv + gv + decay * *p;
            *p -= lr * *vv;
        }
        for ((p, gv), vv) in layer.biases.iter_mut().zip(&g.biases).zip(v.biases.iter_mut()) {
            *vv = momentum * *vv + gv + decay * *p;
            *p -= lr * *vv;
        }
    }
    Ok(())
}
