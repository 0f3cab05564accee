//! The context-free network: `num_branches` copies of one convolutional
//! branch sharing a single parameter store, their fc6 outputs concatenated
//! in puzzle-position order, then `relu → fc7 → relu → fc8`.
//!
//! Because the branches share weights, the gradient of the branch
//! parameters is the sum of the gradients each branch contributes.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::rng::{derived_rng, stream};
use crate::tensornet::{
    concat, count_params, relative_error, sample_coordinates, softmax_cross_entropy, split, Init, LayerSpec, ParamSet,
    Scalar, SeqTrace, Sequential, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CfnConfig {
    /// Conv/pool/relu stack ending in the fc6 linear layer.
    pub branch: Vec<LayerSpec>,
    pub channels: usize,
    pub tile_side: usize,
    pub num_branches: usize,
    pub fc6_width: usize,
    pub fc7_width: usize,
    pub num_classes: usize,
    pub first_conv_stride: usize,
    pub init: Init,
}

impl CfnConfig {
    /// Two-conv branch on 32 px tiles: 14x14x16 after conv1, 3x3x32 before fc6.
    /// Fan-in initialized; at std 0.01 this shallow-but-narrow net does not
    /// leave chance level.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            branch: vec![
                LayerSpec::conv(16, 5, 2, 0, 1),
                LayerSpec::Relu,
                LayerSpec::pool(2, 2),
                LayerSpec::conv(32, 3, 1, 1, 1),
                LayerSpec::Relu,
                LayerSpec::pool(2, 2),
                LayerSpec::Flatten,
                LayerSpec::linear(64),
            ],
            channels: 3,
            tile_side: 32,
            num_branches: 9,
            fc6_width: 64,
            fc7_width: 128,
            num_classes,
            first_conv_stride: 2,
            init: Init::FanIn,
        }
    }

    /// Full-size branch on 64 px tiles: AlexNet conv1–conv5 with channel
    /// grouping, conv1 stride 2, and a final 3x3 stride-1 pool that leaves
    /// a 4x4x256 map for the 512-unit fc6; fc7 has 4096 units.
    pub fn reference(num_classes: usize) -> Self {
        Self {
            branch: vec![
                LayerSpec::conv(96, 11, 2, 0, 1),
                LayerSpec::Relu,
                LayerSpec::pool(3, 2),
                LayerSpec::conv(256, 5, 1, 2, 2),
                LayerSpec::Relu,
                LayerSpec::pool(3, 2),
                LayerSpec::conv(384, 3, 1, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(384, 3, 1, 1, 2),
                LayerSpec::Relu,
                LayerSpec::conv(256, 3, 1, 1, 2),
                LayerSpec::Relu,
                LayerSpec::pool(3, 1),
                LayerSpec::Flatten,
                LayerSpec::linear(512),
            ],
            channels: 3,
            tile_side: 64,
            num_branches: 9,
            fc6_width: 512,
            fc7_width: 4096,
            num_classes,
            first_conv_stride: 2,
            init: Init::TRAINING_DEFAULT,
        }
    }

    /// Single-column AlexNet (227 px input, conv1 stride 4, 6x6x256 into a
    /// 4096-unit fc6), for size comparisons.
    pub fn alexnet() -> Self {
        let mut cfg = Self::reference(1000);
        cfg.branch[0] = LayerSpec::conv(96, 11, 4, 0, 1);
        cfg.branch[12] = LayerSpec::pool(3, 2);
        cfg.branch[14] = LayerSpec::linear(4096);
        cfg.tile_side = 227;
        cfg.num_branches = 1;
        cfg.fc6_width = 4096;
        cfg.first_conv_stride = 4;
        cfg
    }

    pub fn tile_shape(&self) -> [usize; 3] {
        [self.channels, self.tile_side, self.tile_side]
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::Relu, LayerSpec::linear(self.fc7_width), LayerSpec::Relu, LayerSpec::linear(self.num_classes)]
    }

    pub fn num_conv_layers(&self) -> usize {
        self.branch.iter().filter(|s| s.is_conv()).count()
    }

    /// Index in `branch` of the `k`-th convolution (1-based).
    pub fn conv_layer_index(&self, k: usize) -> Option<usize> {
        if k == 0 {
            return None;
        }
        self.branch.iter().enumerate().filter(|(_, s)| s.is_conv()).nth(k - 1).map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_branches == 0 {
            return Err(Error::Config("at least one branch is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        match self.branch.last() {
            Some(&LayerSpec::Linear { out_features }) if out_features == self.fc6_width => {}
            _ => {
                return Err(Error::Config(format!("branch must end in a linear fc6 layer of width {}", self.fc6_width)))
            }
        }
        match self.branch.iter().find(|s| s.is_conv()) {
            Some(&LayerSpec::Conv { stride, .. }) if stride == self.first_conv_stride => {}
            Some(_) => return Err(Error::Config(format!("first conv stride differs from {}", self.first_conv_stride))),
            None => {}
        }
        crate::tensornet::infer_shapes(&self.tile_shape(), &self.branch)?;
        crate::tensornet::infer_shapes(&[self.num_branches * self.fc6_width], &self.head_specs())?;
        Ok(())
    }

    /// Parameter counts from shapes alone, without allocating weights.
    pub fn param_counts(&self) -> Result<ParamCounts> {
        self.validate()?;
        let branch = count_params(&self.tile_shape(), &self.branch)?;
        let head = count_params(&[self.num_branches * self.fc6_width], &self.head_specs())?;
        Ok(ParamCounts::from_parts(&self.branch, &branch, &head))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// Per-layer parameter counts; the shared branch is counted once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub layers: Vec<LayerCount>,
}

impl ParamCounts {
    fn from_parts(
        branch_specs: &[LayerSpec],
        branch: &[(usize, usize, usize)],
        head: &[(usize, usize, usize)],
    ) -> Self {
        let mut layers = Vec::new();
        let mut conv = 0;
        let linears = branch.iter().filter(|(i, _, _)| !branch_specs[*i].is_conv()).count();
        let mut linear = 0;
        for &(i, w, b) in branch {
            let name = if branch_specs[i].is_conv() {
                conv += 1;
                format!("conv{conv}")
            } else {
                linear += 1;
                // the last branch linear is fc6, earlier ones count down from it
                format!("fc{}", 6 + linear - linears)
            };
            layers.push(LayerCount { name, weights: w, biases: b });
        }
        for (n, &(_, w, b)) in head.iter().enumerate() {
            layers.push(LayerCount { name: format!("fc{}", 7 + n), weights: w, biases: b });
        }
        Self { layers }
    }

    pub fn get(&self, name: &str) -> Option<&LayerCount> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerCount::total).sum()
    }
}

impl fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "{:<6} {:>12} weights {:>8} biases", l.name, l.weights, l.biases)?;
        }
        write!(f, "total  {:>12}", self.total())
    }
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct CfnTrace<T> {
    branches: Vec<SeqTrace<T>>,
    head: SeqTrace<T>,
}

impl<T> CfnTrace<T> {
    /// Per-branch traces, in tile order.
    pub fn branches(&self) -> &[SeqTrace<T>] {
        &self.branches
    }

    pub fn head(&self) -> &SeqTrace<T> {
        &self.head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfnGrads<T> {
    pub branch: ParamSet<T>,
    pub head: ParamSet<T>,
}

impl<T: Scalar> CfnGrads<T> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.branch.add_assign(&other.branch)?;
        self.head.add_assign(&other.head)
    }

    pub fn scale(&mut self, factor: T) {
        self.branch.scale(factor);
        self.head.scale(factor);
    }

    pub fn is_finite(&self) -> bool {
        self.branch.is_finite() && self.head.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfnModel<T = f32> {
    cfg: CfnConfig,
    branch: Sequential<T>,
    head: Sequential<T>,
}

impl<T: Scalar> CfnModel<T> {
    /// Allocate and initialize with `cfg.init`, branch first, then head.
    /// The fc8 classifier always draws from [`Init::TRAINING_DEFAULT`], so
    /// a fresh network predicts close to uniformly whatever the hidden
    /// layers use.
    pub fn build(cfg: CfnConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(cfg)?;
        let mut rng = derived_rng(seed, &[stream::INIT]);
        model.branch.init(model.cfg.init, &mut rng);
        let fc8 = model.head.specs().len() - 1;
        for (i, p) in model.head.params_mut().0.iter_mut().enumerate() {
            if let Some(p) = p {
                p.init(if i == fc8 { Init::TRAINING_DEFAULT } else { model.cfg.init }, &mut rng);
            }
        }
        Ok(model)
    }

    /// Allocate with all parameters zero.
    pub fn zeroed(cfg: CfnConfig) -> Result<Self> {
        cfg.validate()?;
        let branch = Sequential::new(&cfg.tile_shape(), cfg.branch.clone())?;
        let head = Sequential::new(&[cfg.num_branches * cfg.fc6_width], cfg.head_specs())?;
        Ok(Self { cfg, branch, head })
    }

    pub fn config(&self) -> &CfnConfig {
        &self.cfg
    }

    /// The one branch parameter store used by every branch.
    pub fn branch(&self) -> &Sequential<T> {
        &self.branch
    }

    pub fn branch_mut(&mut self) -> &mut Sequential<T> {
        &mut self.branch
    }

    pub fn head(&self) -> &Sequential<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Sequential<T> {
        &mut self.head
    }

    pub fn cast<U: Scalar>(&self) -> CfnModel<U> {
        CfnModel { cfg: self.cfg.clone(), branch: self.branch.cast(), head: self.head.cast() }
    }

    pub fn zero_grads(&self) -> CfnGrads<T> {
        CfnGrads { branch: self.branch.zero_grads(), head: self.head.zero_grads() }
    }

    fn check_tiles(&self, tiles: &[Tensor<T>]) -> Result<()> {
        if tiles.len() != self.cfg.num_branches {
            return Err(invalid!("{} tiles for {} branches", tiles.len(), self.cfg.num_branches));
        }
        let want = self.cfg.tile_shape();
        if let Some(t) = tiles.iter().find(|t| t.shape() != want) {
            return Err(invalid!("tile shape {:?}, expected {:?}", t.shape(), want));
        }
        Ok(())
    }

    /// Per-branch fc6 outputs, in tile order.
    pub fn features(&self, tiles: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.check_tiles(tiles)?;
        tiles.iter().map(|t| self.branch.forward(t)).collect()
    }

    pub fn forward(&self, tiles: &[Tensor<T>]) -> Result<Tensor<T>> {
        let joined = concat(&self.features(tiles)?)?;
        self.head.forward(&joined)
    }

    pub fn forward_traced(&self, tiles: &[Tensor<T>]) -> Result<(Tensor<T>, CfnTrace<T>)> {
        self.check_tiles(tiles)?;
        let mut feats = Vec::with_capacity(tiles.len());
        let mut branches = Vec::with_capacity(tiles.len());
        for t in tiles {
            let (f, tr) = self.branch.forward_traced(t)?;
            feats.push(f);
            branches.push(tr);
        }
        let (logits, head) = self.head.forward_traced(&concat(&feats)?)?;
        Ok((logits, CfnTrace { branches, head }))
    }

    /// Gradients for every parameter given `dloss/dlogits`. Branch
    /// contributions are summed in branch order into the shared store's
    /// gradient.
    pub fn backward_shared(&self, trace: &CfnTrace<T>, dlogits: &Tensor<T>) -> Result<CfnGrads<T>> {
        if trace.head.is_empty() || trace.branches.len() != self.cfg.num_branches {
            return Err(Error::State("backward called before a forward pass on this model".into()));
        }
        let mut grads = self.zero_grads();
        let dfeat = self.head.backward(&trace.head, dlogits, &mut grads.head, true)?.expect("input gradient requested");
        let segments = split(&dfeat, &vec![self.cfg.fc6_width; self.cfg.num_branches])?;
        for (tr, d) in trace.branches.iter().zip(&segments) {
            self.branch.backward(tr, d, &mut grads.branch, false)?;
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> ParamCounts {
        let collect = |seq: &Sequential<T>| -> Vec<(usize, usize, usize)> {
            seq.params()
                .0
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.as_ref().map(|p| (i, p.weight.len(), p.bias.len())))
                .collect()
        };
        ParamCounts::from_parts(&self.cfg.branch, &collect(&self.branch), &collect(&self.head))
    }
}

/// Largest relative error between `backward_shared` and central
/// differences of the cross-entropy, over `per_tensor` seeded coordinates
/// of every branch and head tensor.
pub fn gradient_check(
    model: &CfnModel<f64>,
    tiles: &[Tensor<f64>],
    label: usize,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let (logits, trace) = model.forward_traced(tiles)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, label)?;
    let grads = model.backward_shared(&trace, &dlogits)?;
    let loss = |m: &CfnModel<f64>| -> Result<f64> { Ok(softmax_cross_entropy(&m.forward(tiles)?, label)?.0) };

    let mut worst = 0.0f64;
    for (part, set) in [(0, model.branch.params()), (1, model.head.params())] {
        for (layer, is_bias, i) in sample_coordinates(set, per_tensor, seed ^ part) {
            fn slot(m: &mut CfnModel<f64>, head: bool, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
                let seq = if head { &mut m.head } else { &mut m.branch };
                let p = seq.params_mut().layer_mut(layer).expect("sampled from a parameterized layer");
                let t = if is_bias { &mut p.bias } else { &mut p.weight };
                &mut t.data_mut()[i]
            }
            let mut probe = model.clone();
            let at = (part == 1, layer, is_bias, i);
            let orig = *slot(&mut probe, at.0, at.1, at.2, at.3);
            *slot(&mut probe, at.0, at.1, at.2, at.3) = orig + epsilon;
            let plus = loss(&probe)?;
            *slot(&mut probe, at.0, at.1, at.2, at.3) = orig - epsilon;
            let minus = loss(&probe)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let g = if part == 0 { &grads.branch } else { &grads.head };
            let p = g.layer(layer).expect("same layout as the model");
            let analytic = if is_bias { p.bias.data()[i] } else { p.weight.data()[i] };
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::softmax;
    use rand::Rng;

    fn tiles(cfg: &CfnConfig, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = crate::rng::rng_from_seed(seed);
        (0..cfg.num_branches)
            .map(|_| {
                let n = cfg.channels * cfg.tile_side * cfg.tile_side;
                Tensor::from_vec(&cfg.tile_shape(), (0..n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn toy_builds_and_runs() {
        let cfg = CfnConfig::toy(8);
        let model = CfnModel::<f32>::build(cfg.clone(), 1).unwrap();
        assert_eq!(model.head().input_shape(), &[9 * 64]);
        let logits = model.forward(&tiles(&cfg, 2)).unwrap();
        assert_eq!(logits.len(), 8);
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn toy_param_count_matches_hand_sum() {
        let model = CfnModel::<f32>::build(CfnConfig::toy(8), 1).unwrap();
        let c = model.param_count();
        let expect = [
            ("conv1", 16 * 3 * 5 * 5, 16),
            ("conv2", 32 * 16 * 3 * 3, 32),
            ("fc6", 64 * 3 * 3 * 32, 64),
            ("fc7", 128 * 9 * 64, 128),
            ("fc8", 8 * 128, 8),
        ];
        for (name, w, b) in expect {
            let l = c.get(name).unwrap();
            assert_eq!((l.weights, l.biases), (w, b), "{name}");
        }
        assert_eq!(c.total(), expect.iter().map(|(_, w, b)| w + b).sum::<usize>());
        assert_eq!(c, CfnConfig::toy(8).param_counts().unwrap());
    }

    #[test]
    fn reference_param_counts() {
        let c = CfnConfig::reference(1000).param_counts().unwrap();
        assert_eq!(c.get("fc6").unwrap().weights, 4 * 4 * 256 * 512);
        assert_eq!(c.get("fc7").unwrap().weights, 9 * 512 * 4096);
        assert_eq!(c.get("fc8").unwrap().weights, 4096 * 1000);
        assert!((26_500_000..=29_500_000).contains(&c.total()), "{}", c.total());
    }

    #[test]
    fn wrong_tile_count_or_shape() {
        let cfg = CfnConfig::toy(8);
        let model = CfnModel::<f32>::build(cfg.clone(), 1).unwrap();
        let t = tiles(&cfg, 3);
        assert!(model.forward(&t[..8]).is_err());
        let mut bad = t.clone();
        bad[4] = Tensor::zeros(&[3, 30, 30]);
        assert!(model.forward(&bad).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = CfnConfig::toy(8);
        cfg.num_classes = 1;
        assert!(matches!(CfnModel::<f32>::build(cfg, 0), Err(Error::Config(_))));
        let mut cfg = CfnConfig::toy(8);
        cfg.tile_side = 4;
        assert!(CfnModel::<f32>::build(cfg, 0).is_err());
        let mut cfg = CfnConfig::toy(8);
        cfg.fc6_width = 10;
        assert!(CfnModel::<f32>::build(cfg, 0).is_err());
        let mut cfg = CfnConfig::toy(8);
        cfg.first_conv_stride = 4;
        assert!(CfnModel::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let model = CfnModel::<f32>::build(CfnConfig::toy(8), 1).unwrap();
        let r = model.backward_shared(&CfnTrace::default(), &Tensor::zeros(&[8]));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let cfg = CfnConfig::toy(8);
        let model = CfnModel::<f32>::build(cfg.clone(), 1).unwrap();
        let (_, trace) = model.forward_traced(&tiles(&cfg, 5)).unwrap();
        let g = model.backward_shared(&trace, &Tensor::zeros(&[8])).unwrap();
        assert!(g.branch.tensors().chain(g.head.tensors()).all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv_layer_indices() {
        let cfg = CfnConfig::reference(100);
        assert_eq!(cfg.num_conv_layers(), 5);
        assert_eq!(cfg.conv_layer_index(1), Some(0));
        assert_eq!(cfg.conv_layer_index(2), Some(3));
        assert_eq!(cfg.conv_layer_index(6), None);
    }
}
