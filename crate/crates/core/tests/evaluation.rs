use jigsaw::cfn::{CfnConfig, CfnModel};
use jigsaw::evalsuite::{
    precision_recall, puzzle_accuracy, retrieve, top_activations, transfer_lock_and_retrain, FeatureIndex, LockSpec,
    OracleSolver, Patch, TransferConfig, DETECTION_FILL,
};
use jigsaw::imagepipe::{Normalization, PuzzleConfig};
use jigsaw::permset::{Objective, PermutationSet};
use jigsaw::synth::{puzzle_dataset, transfer_dataset, SynthConfig};
use jigsaw::tensornet::{Init, LayerSpec, Sequential, Tensor};
use proptest::prelude::*;

fn puzzle_setup() -> (jigsaw::imagepipe::Dataset, PermutationSet, PuzzleConfig) {
    let ds = puzzle_dataset(&SynthConfig::default(), 20, 4).unwrap();
    let puzzle = PuzzleConfig { norm: Normalization::from_images(ds.images()).unwrap(), ..PuzzleConfig::toy() };
    (ds, PermutationSet::generate(8, 3, Objective::Max, 2).unwrap(), puzzle)
}

#[test]
fn oracle_solves_everything() {
    let (ds, ps, puzzle) = puzzle_setup();
    let acc = puzzle_accuracy(&OracleSolver { num_classes: 8 }, &ds, &ps, &puzzle, 200, 1).unwrap();
    assert_eq!(acc, 1.0);
    let empty = jigsaw::imagepipe::Dataset::default();
    assert!(puzzle_accuracy(&OracleSolver { num_classes: 8 }, &empty, &ps, &puzzle, 10, 1).is_err());
}

#[test]
fn untrained_model_is_at_chance() {
    let (ds, ps, puzzle) = puzzle_setup();
    let model = CfnModel::<f32>::build(CfnConfig::toy(8), 77).unwrap();
    let n = 10_000;
    let acc = puzzle_accuracy(&model, &ds, &ps, &puzzle, n, 3).unwrap();
    assert!((acc - 0.125).abs() < 0.02, "{acc}");
}

/// A fixed random network is a deterministic function of the tiles, so its
/// guesses correlate with the permutation; chance holds in expectation over
/// initialisations, since the output rows are exchangeable.
#[test]
fn untrained_accuracy_averages_to_chance() {
    let (ds, ps, puzzle) = puzzle_setup();
    let accs: Vec<f64> = (0..20)
        .map(|seed| {
            let model = CfnModel::<f32>::build(CfnConfig::toy(8), 1000 + seed).unwrap();
            puzzle_accuracy(&model, &ds, &ps, &puzzle, 400, seed).unwrap()
        })
        .collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = (mean - 0.125) / (var / n).sqrt();
    // two-sided t test at 1%, 19 degrees of freedom
    assert!(t.abs() < 2.861, "mean {mean}, t = {t}");
}

fn bits(m: &CfnModel, layers: usize) -> Vec<u32> {
    m.branch().params().0[..layers]
        .iter()
        .flatten()
        .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).map(|v| v.to_bits()))
        .collect()
}

fn small_transfer() -> (jigsaw::imagepipe::LabeledSet, jigsaw::imagepipe::LabeledSet, Normalization) {
    let sc = SynthConfig::default();
    let train = transfer_dataset(&sc, 36, 32, 1).unwrap();
    let test = transfer_dataset(&sc, 18, 32, 2).unwrap();
    let norm = Normalization::from_images(&train.images).unwrap();
    (train, test, norm)
}

#[test]
fn locked_layers_are_bit_identical() {
    let (train, test, norm) = small_transfer();
    let source = CfnModel::<f32>::build(CfnConfig::toy(8), 5).unwrap();
    let cfg = TransferConfig { iterations: 15, batch_size: 4, ..TransferConfig::default() };
    for k in 1..=2 {
        for reinit_rest in [true, false] {
            let out =
                transfer_lock_and_retrain(&source, LockSpec { lock_upto: k, reinit_rest }, &train, &test, &norm, &cfg)
                    .unwrap();
            let locked = CfnConfig::toy(8).conv_layer_index(k).unwrap() + 1;
            assert_eq!(bits(&out.model, locked), bits(&source, locked), "k = {k}");
            let full = source.config().branch.len();
            assert_ne!(bits(&out.model, full), bits(&source, full), "unlocked layers train");
        }
    }
}

#[test]
fn lock_zero_ignores_the_source() {
    let (train, test, norm) = small_transfer();
    let cfg = TransferConfig { iterations: 10, batch_size: 4, seed: 3, ..TransferConfig::default() };
    let lock = LockSpec { lock_upto: 0, reinit_rest: true };
    let a =
        transfer_lock_and_retrain(&CfnModel::build(CfnConfig::toy(8), 1).unwrap(), lock, &train, &test, &norm, &cfg)
            .unwrap();
    let b =
        transfer_lock_and_retrain(&CfnModel::build(CfnConfig::toy(8), 2).unwrap(), lock, &train, &test, &norm, &cfg)
            .unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.model, b.model);
    let bad = LockSpec { lock_upto: 3, reinit_rest: true };
    assert!(transfer_lock_and_retrain(
        &CfnModel::build(CfnConfig::toy(8), 1).unwrap(),
        bad,
        &train,
        &test,
        &norm,
        &cfg
    )
    .is_err());
}

#[test]
fn detection_fill_statistics() {
    let mut cfg = CfnConfig::toy(8);
    cfg.init = DETECTION_FILL;
    let m = CfnModel::<f32>::build(cfg, 0).unwrap();
    let w = &m.branch().params().layer(0).unwrap().weight;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((mean - 0.1).abs() < 2e-4, "{mean}");
    assert!((var.sqrt() - 0.001).abs() < 2e-4, "{}", var.sqrt());
    assert_eq!(DETECTION_FILL, Init::Gaussian { mean: 0.1, std: 0.001 });
}

/// One 1x1 conv channel averaging the three colour channels.
fn brightness_net() -> Sequential<f32> {
    let mut net = Sequential::<f32>::new(&[3, 4, 4], vec![LayerSpec::conv(1, 1, 1, 0, 1)]).unwrap();
    let p = net.params_mut().layer_mut(0).unwrap();
    p.weight.data_mut().fill(1.0 / 3.0);
    net
}

fn patch(id: &str, source: &str, value: f32) -> Patch {
    Patch { id: id.into(), source: source.into(), tensor: Tensor::full(&[3, 4, 4], value) }
}

#[test]
fn activation_ranking_follows_brightness() {
    let patches = vec![patch("a", "i1", 0.2), patch("b", "i2", 0.9), patch("c", "i3", 0.5), patch("d", "i4", 0.7)];
    let top = top_activations(&brightness_net(), 1, 0, &patches, 4).unwrap();
    let ids: Vec<_> = top.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["b", "d", "c", "a"]);
    assert!((top[0].1 - 0.9).abs() < 1e-6);
}

#[test]
fn activation_ties_and_distinct_images() {
    let zeros = vec![patch("p3", "x", 0.0), patch("p1", "y", 0.0), patch("p2", "z", 0.0)];
    let top = top_activations(&brightness_net(), 1, 0, &zeros, 3).unwrap();
    assert_eq!(
        top.iter().map(|(id, s)| (id.as_str(), *s)).collect::<Vec<_>>(),
        [("p1", 0.0), ("p2", 0.0), ("p3", 0.0)]
    );

    let same_image = vec![patch("a", "img", 0.9), patch("b", "img", 0.8), patch("c", "other", 0.1)];
    let top = top_activations(&brightness_net(), 1, 0, &same_image, 2).unwrap();
    assert_eq!(top.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
    assert!(top_activations(&brightness_net(), 1, 0, &same_image, 3).is_err());
    assert!(top_activations(&brightness_net(), 1, 1, &same_image, 1).is_err());
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(0.05f32..1.0, 4), 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_ignores_positive_rescaling(raw in vectors(), scales in prop::collection::vec(0.1f32..10.0, 12), q in 0usize..12) {
        let ids: Vec<String> = (0..raw.len()).map(|i| format!("{i:02}")).collect();
        let scaled: Vec<Vec<f32>> = raw.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let a = FeatureIndex::new(ids.clone(), raw.clone(), None).unwrap();
        let b = FeatureIndex::new(ids, scaled, None).unwrap();
        let query = &raw[q % raw.len()];
        let ra: Vec<String> = retrieve(query, &a, raw.len()).unwrap().into_iter().map(|r| r.id).collect();
        let rb = retrieve(&query.iter().map(|x| x * 3.0).collect::<Vec<_>>(), &b, raw.len()).unwrap();
        prop_assert!(rb.iter().all(|r| (-1.0..=1.0).contains(&r.similarity)));
        let rb: Vec<String> = rb.into_iter().map(|r| r.id).collect();
        // Rescaling can move similarities by rounding; compare only where gaps are clear.
        let sims: Vec<f64> = retrieve(query, &a, raw.len()).unwrap().iter().map(|r| r.similarity).collect();
        let clear = sims.windows(2).all(|w| w[0] - w[1] > 1e-5);
        if clear {
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn pr_curve_is_monotone_in_recall(labels in prop::collection::vec(0usize..3, 1..40)) {
        let q = labels[0];
        let pts = precision_recall(&labels, q).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[0].recall < w[1].recall));
        prop_assert!(pts.iter().all(|p| p.precision > 0.0 && p.precision <= 1.0));
        prop_assert_eq!(pts.last().unwrap().recall, 1.0);
    }
}

#[test]
fn self_query_ranks_first() {
    let (train, _, norm) = small_transfer();
    let model = CfnModel::<f32>::build(CfnConfig::toy(8), 0).unwrap();
    let layers = jigsaw::evalsuite::default_feature_layer(model.config());
    let feats: Vec<Vec<f32>> = train
        .images
        .iter()
        .map(|img| jigsaw::evalsuite::branch_features(&model, &norm.apply(img).unwrap(), layers).unwrap())
        .collect();
    let index = FeatureIndex::new(train.ids.clone(), feats.clone(), Some(train.labels.clone())).unwrap();
    for (i, f) in feats.iter().enumerate().take(5) {
        let r = retrieve(f, &index, 1).unwrap();
        assert_eq!(r[0].id, train.ids[i]);
        assert!((r[0].similarity - 1.0).abs() < 1e-6);
    }
}
