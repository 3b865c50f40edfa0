use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, ImageRgb};
use crate::interaction::{rng_from, TrainingPair, VoronoiMap};
use crate::scalar::Scalar;

use super::network::{is_head_parameter, Network};
use super::ops::{bce_loss, sigmoid};
use super::tensor::Tensor;

/// Plain SGD settings. The learning-rate policy is fixed (no schedule).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-2,
            head_lr_multiplier: 10.0,
            weight_decay: 5e-3,
            iterations: 2000,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Global rates for fine-tuning a pretrained 32s/16s/8s cascade at full scale.
    pub const FULL_SCALE_BASE_LRS: [f64; 3] = [1e-8, 1e-10, 1e-12];

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_non_negative(self.base_lr)
            || !finite_non_negative(self.head_lr_multiplier)
            || !finite_non_negative(self.weight_decay)
        {
            return Err(Error::InvalidArgument(format!("invalid training rates: {self:?}")));
        }
        Ok(())
    }
}

/// Stacks RGB (scaled by 1/255) and both click maps (truncated, scaled) into `(5, H, W)`.
pub fn encode_input<T: Scalar>(image: &ImageRgb, pos: &VoronoiMap<T>, neg: &VoronoiMap<T>) -> Result<Tensor<T>> {
    let (w, h) = image.dims();
    for m in [pos, neg] {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: (m.width(), m.height()),
            });
        }
    }
    let n = w * h;
    let mut data = vec![T::zero(); 5 * n];
    let scale = T::from_f64_lossy(255.0);
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = T::from_f64_lossy(px[c] as f64) / scale;
        }
    }
    for (i, v) in pos.normalized().enumerate() {
        data[3 * n + i] = v;
    }
    for (i, v) in neg.normalized().enumerate() {
        data[4 * n + i] = v;
    }
    Tensor::from_vec(&[5, h, w], data)
}

pub fn pair_input<T: Scalar>(pair: &TrainingPair<T>) -> Result<Tensor<T>> {
    encode_input(&pair.image, &pair.pos_map, &pair.neg_map)
}

/// Bit set iff probability exceeds `threshold`.
pub fn predict_mask<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let (c, h, w) = prob.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("probability map must have one channel, got {c}")));
    }
    let t = T::from_f64_lossy(threshold);
    BinaryMask::new(w, h, prob.data().iter().map(|&p| p > t).collect())
}

/// BCE loss of a cached forward pass plus its gradient with respect to the logits.
///
/// Uses the fused logistic/cross-entropy derivative `(p - y) / N`, which stays
/// informative where the probability saturates.
pub fn loss_and_logit_grad<T: Scalar>(
    logits: &Tensor<T>,
    prob: &Tensor<T>,
    label: &BinaryMask,
) -> Result<(T, Tensor<T>)> {
    let (loss, _) = bce_loss(prob, label)?;
    let n = T::from_usize_lossy(logits.len());
    let grad = logits
        .data()
        .iter()
        .zip(label.bits())
        .map(|(&z, &y)| (sigmoid(z) - if y { T::one() } else { T::zero() }) / n)
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// One SGD step: head layers use the boosted rate, kernels get L2 decay.
pub fn sgd_step<T: Scalar>(net: &mut Network<T>, grads: &[Tensor<T>], tc: &TrainConfig) {
    let base = T::from_f64_lossy(tc.base_lr);
    let boosted = T::from_f64_lossy(tc.base_lr * tc.head_lr_multiplier);
    let decay = T::from_f64_lossy(tc.weight_decay);
    for (p, g) in net.params_mut().iter_mut().zip(grads) {
        let lr = if is_head_parameter(&p.name) { boosted } else { base };
        let is_kernel = p.name.ends_with(".weight");
        for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
            let step = if is_kernel { d + decay * *w } else { d };
            *w -= lr * step;
        }
    }
}

/// Per-sample SGD over `dataset` in rng-shuffled epochs for `tc.iterations`
/// updates. Returns the loss observed at each update (before the step).
pub fn train<T: Scalar>(
    dataset: &[TrainingPair<T>],
    mut net: Network<T>,
    tc: &TrainConfig,
) -> Result<(Network<T>, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    tc.validate()?;
    let inputs: Vec<Tensor<T>> = dataset.iter().map(pair_input).collect::<Result<_>>()?;
    let mut rng = rng_from(tc.rng_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(tc.iterations);
    for _ in 0..tc.iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let i = order.pop().expect("refilled above");
        let cache = net.forward_cached(&inputs[i])?;
        let (loss, g) = loss_and_logit_grad(&cache.logits, &cache.prob, &dataset[i].label)?;
        let grads = net.backward(&cache, &g)?;
        sgd_step(&mut net, &grads, tc);
        history.push(loss.to_f64_lossy());
    }
    Ok((net, history))
}
