use rand::seq::SliceRandom;

use crate::cfn::{CfnConfig, CfnModel};
use crate::error::{invalid, Error, Result};
use crate::imagepipe::{LabeledSet, Normalization};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::tensornet::{softmax_cross_entropy, Init, Sgd, Tensor};

/// Initializer for layers filled in before detection fine-tuning.
pub const DETECTION_FILL: Init = Init::Gaussian { mean: 0.1, std: 0.001 };

/// Lock conv1..conv`lock_upto` (0 locks nothing). Later branch layers are
/// reinitialized when `reinit_rest`, otherwise copied and fine-tuned. The
/// head is always new.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockSpec {
    pub lock_upto: usize,
    pub reinit_rest: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// `None` uses the source network's initializer.
    pub init: Option<Init>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { iterations: 1000, batch_size: 16, learning_rate: 0.01, momentum: 0.9, seed: 0, init: None }
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub accuracy: f64,
    pub model: CfnModel<f32>,
}

/// Branch layers up to, not including, fc6: the pool5 analogue.
pub fn default_feature_layer(cfg: &CfnConfig) -> usize {
    cfg.branch.len() - 1
}

/// Flattened branch activations after the first `layers` layers.
pub fn branch_features(model: &CfnModel<f32>, tile: &Tensor<f32>, layers: usize) -> Result<Vec<f32>> {
    Ok(model.branch().forward_to(tile, layers)?.into_data())
}

fn tensors(set: &LabeledSet, norm: &Normalization) -> Result<Vec<Tensor<f32>>> {
    set.images.iter().map(|img| norm.apply(img)).collect()
}

fn accuracy(model: &CfnModel<f32>, xs: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &l) in xs.iter().zip(labels) {
        correct += usize::from(model.forward(std::slice::from_ref(x))?.argmax() == Some(l));
    }
    Ok(correct as f64 / xs.len() as f64)
}

/// Build a single-branch classifier from `source`, lock its first convs,
/// train the rest on `train`, and report accuracy on `test`.
pub fn transfer_lock_and_retrain(
    source: &CfnModel<f32>,
    lock: LockSpec,
    train: &LabeledSet,
    test: &LabeledSet,
    norm: &Normalization,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    let src = source.config();
    if lock.lock_upto > src.num_conv_layers() {
        return Err(invalid!("cannot lock {} of {} conv layers", lock.lock_upto, src.num_conv_layers()));
    }
    if train.num_classes < 2 || test.num_classes != train.num_classes {
        return Err(invalid!("need at least 2 classes, shared by train and test sets"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(invalid!("empty transfer split"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch_size must be positive"));
    }
    let side = train.images[0].height();
    if train.images.iter().chain(&test.images).any(|i| i.height() != side || i.width() != side) {
        return Err(invalid!("transfer images must all be {side}x{side}"));
    }

    let mut target_cfg = src.clone();
    target_cfg.tile_side = side;
    target_cfg.num_branches = 1;
    target_cfg.num_classes = train.num_classes;
    target_cfg.init = cfg.init.unwrap_or(src.init);
    let mut model = CfnModel::<f32>::build(target_cfg, derive_seed(cfg.seed, &[stream::TRANSFER]))?;

    let locked = match lock.lock_upto {
        0 => 0,
        k => src.conv_layer_index(k).expect("k checked against the conv count") + 1,
    };
    {
        let from = &source.branch().params().0;
        let to = &mut model.branch_mut().params_mut().0;
        for (i, (dst, srcp)) in to.iter_mut().zip(from).enumerate() {
            if i >= locked && lock.reinit_rest {
                continue;
            }
            if let (Some(d), Some(s)) = (dst.as_mut(), srcp.as_ref()) {
                if d.weight.shape() != s.weight.shape() {
                    return Err(invalid!("layer {i} shape changes with {side}px inputs; it cannot be copied"));
                }
                *d = s.clone();
            }
        }
    }
    let frozen: Vec<_> = model.branch().params().0[..locked].to_vec();

    let xs = tensors(train, norm)?;
    let mut branch_opt = Sgd::new(model.branch().params(), cfg.momentum);
    let mut head_opt = Sgd::new(model.head().params(), cfg.momentum);
    let n = xs.len() as u64;
    let mut order = Vec::new();
    for it in 0..cfg.iterations {
        let mut grads = model.zero_grads();
        for j in 0..cfg.batch_size as u64 {
            let cursor = it * cfg.batch_size as u64 + j;
            let (epoch, pos) = (cursor / n, (cursor % n) as usize);
            if pos == 0 || order.is_empty() {
                order = (0..xs.len()).collect();
                order.shuffle(&mut derived_rng(cfg.seed, &[stream::TRANSFER, epoch]));
            }
            let idx = order[pos];
            let (logits, trace) = model.forward_traced(std::slice::from_ref(&xs[idx]))?;
            let (loss, d) = softmax_cross_entropy(&logits, train.labels[idx])?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it + 1, loss });
            }
            grads.add_assign(&model.backward_shared(&trace, &d)?)?;
        }
        grads.scale(1.0 / cfg.batch_size as f32);
        branch_opt.step(model.branch_mut().params_mut(), &grads.branch, cfg.learning_rate, |i| i >= locked)?;
        head_opt.step(model.head_mut().params_mut(), &grads.head, cfg.learning_rate, |_| true)?;
    }
    if model.branch().params().0[..locked] != frozen[..] {
        return Err(Error::State("locked parameters changed during retraining".into()));
    }

    let accuracy = accuracy(&model, &tensors(test, norm)?, &test.labels)?;
    Ok(TransferOutcome { accuracy, model })
}
