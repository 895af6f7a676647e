//! End-to-end acceptance suite. Runs every criterion and prints one line per
//! criterion; pass criterion numbers as arguments to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use mvdamage::data::{generate_in_memory, split_loaded, GeneratorConfig};
use mvdamage::mask::BinaryMask;
use mvdamage::metrics::{
    confusion_and_accuracy, evaluate_model_l, extract_instances, iou, match_instances,
    pr_curve_and_ap, precision_recall_f1, remap_coarse, ApInterpolation, Detection, Instance,
    MatchResult,
};
use mvdamage::models::localization::init_pyramid_params;
use mvdamage::models::{
    pyramid_pooling_forward, BackboneConfig, BlockSpec, DamageState, FusionMode, ModelC,
    ModelCConfig, ModelL, ModelLConfig,
};
use mvdamage::seed::{derive_seed, rng_for};
use mvdamage::tensor::{grad_check_params, GradCheckReport, Graph, ParamStore, Tensor, Var};
use mvdamage::training::{
    classification_accuracy, classification_score, cross_entropy_loss, focal_loss,
    segmentation_examples, set_trainable, train_classifier_phase, train_model_c, train_model_l,
    TrainConfig,
};
use mvdamage_cli::{ablate, RunConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

type Criterion = (u32, &'static str, fn() -> Result<String>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient correctness", gradient_correctness),
    (2, "loss identities", loss_identities),
    (3, "metric oracle equivalence", metric_oracles),
    (4, "coarse remap never lowers accuracy", coarse_remap),
    (5, "Model-L held-out mean IoU >= 0.70", model_l_iou),
    (
        6,
        "Model-C overfits 20 buildings to >= 95%",
        model_c_overfit,
    ),
    (7, "multi-view advantage >= 10 points", multi_view_advantage),
    (8, "freeze contract", freeze_contract),
    (9, "CLI determinism", cli_determinism),
    (10, "boundary conventions", boundary_conventions),
];

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({detail}; {secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {e:#} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks sit outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t).unwrap();
    }
    s
}

/// Reduces `y` to a scalar through fixed random weights.
fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> mvdamage::Result<Var> {
    let m = g.mul_const(y, weights.clone())?;
    Ok(g.sum(m))
}

/// Replaces every parameter with fresh random values (biases included, so
/// no pre-activation starts at an exact ReLU kink).
fn randomize(store: &ParamStore<f32>, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = store.cast::<f64>();
    for p in s.iter_mut() {
        let bound = if p.name.ends_with("bias") { 0.2 } else { 0.6 };
        p.value = uniform(rng, p.value.shape(), -bound, bound);
    }
    s
}

type LayerCase = fn(u64) -> mvdamage::Result<GradCheckReport>;

fn conv_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "conv");
    let (stride, pad) = (1 + seed as usize % 2, seed as usize % 2);
    let store = store_of(vec![
        ("x", uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0)),
        ("k", uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[3], -1.0, 1.0)),
    ]);
    let o = (6 + 2 * pad - 3) / stride + 1;
    let w = uniform(&mut rng, &[1, 3, o, o], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let (x, k, b) = (g.param(s, "x")?, g.param(s, "k")?, g.param(s, "b")?);
            let y = g.conv2d(x, k, Some(b), stride, pad)?;
            project(g, y, &w)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn depthwise_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "depthwise");
    let (stride, pad) = (1 + seed as usize % 2, 1 - seed as usize % 2);
    let store = store_of(vec![
        ("x", uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0)),
        ("k", uniform(&mut rng, &[3, 1, 3, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[3], -1.0, 1.0)),
    ]);
    let o = (6 + 2 * pad - 3) / stride + 1;
    let w = uniform(&mut rng, &[1, 3, o, o], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let (x, k, b) = (g.param(s, "x")?, g.param(s, "k")?, g.param(s, "b")?);
            let y = g.depthwise_conv2d(x, k, Some(b), stride, pad)?;
            project(g, y, &w)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn separable_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "separable");
    let store = store_of(vec![
        ("x", uniform(&mut rng, &[1, 3, 5, 5], -1.0, 1.0)),
        ("dk", uniform(&mut rng, &[3, 1, 3, 3], -1.0, 1.0)),
        ("db", uniform(&mut rng, &[3], -1.0, 1.0)),
        ("pk", uniform(&mut rng, &[4, 3, 1, 1], -1.0, 1.0)),
        ("pb", uniform(&mut rng, &[4], -1.0, 1.0)),
    ]);
    let w = uniform(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let x = g.param(s, "x")?;
            let (dk, db) = (g.param(s, "dk")?, g.param(s, "db")?);
            let (pk, pb) = (g.param(s, "pk")?, g.param(s, "pb")?);
            let y = g.depthwise_separable_conv(x, dk, Some(db), pk, Some(pb), 2, 1)?;
            project(g, y, &w)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn dense_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "dense");
    let store = store_of(vec![
        ("x", uniform(&mut rng, &[2, 5], -1.0, 1.0)),
        ("w", uniform(&mut rng, &[5, 4], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[4], -1.0, 1.0)),
    ]);
    let r = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.dense(x, w, Some(b))?;
            project(g, y, &r)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn activation_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "activation");
    let store = store_of(vec![
        ("a", away_from_zero(&mut rng, &[1, 2, 4, 4])),
        ("b", uniform(&mut rng, &[1, 2, 4, 4], -3.0, 3.0)),
        ("c", uniform(&mut rng, &[3, 5], -3.0, 3.0)),
    ]);
    let w1 = uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let w2 = uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let w3 = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let a = g.param(s, "a")?;
            let r = g.relu(a);
            let r = project(g, r, &w1)?;
            let b = g.param(s, "b")?;
            let sg = g.sigmoid(b);
            let sg = project(g, sg, &w2)?;
            let c = g.param(s, "c")?;
            let sm = g.softmax(c)?;
            let sm = project(g, sm, &w3)?;
            let t = g.add(r, sg)?;
            g.add(t, sm)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn pooling_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "pooling");
    let store = store_of(vec![
        ("m", uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0)),
        ("a", uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0)),
        ("r", uniform(&mut rng, &[1, 2, 3, 4], -1.0, 1.0)),
    ]);
    let (window, stride) = if seed % 2 == 0 { (2, 2) } else { (3, 1) };
    let o = (6 - window) / stride + 1;
    let wm = uniform(&mut rng, &[1, 2, o, o], -1.0, 1.0);
    let wa = uniform(&mut rng, &[1, 2, 2, 3], -1.0, 1.0);
    let wr = uniform(&mut rng, &[1, 2, 7, 5], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let m = g.param(s, "m")?;
            let m = g.maxpool2d(m, window, stride)?;
            let m = project(g, m, &wm)?;
            let a = g.param(s, "a")?;
            let a = g.adaptive_avg_pool2d(a, 2, 3)?;
            let a = project(g, a, &wa)?;
            let r = g.param(s, "r")?;
            let r = g.bilinear_resize(r, 7, 5)?;
            let r = project(g, r, &wr)?;
            let t = g.add(m, a)?;
            g.add(t, r)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn fusion_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "fusion");
    let store = store_of(vec![
        ("a", uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0)),
        ("c", uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)),
    ]);
    let wc = uniform(&mut rng, &[1, 7, 3, 3], -1.0, 1.0);
    let wm = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "c")?);
            let cat = g.concat_channels(&[a, b, c])?;
            let cat = project(g, cat, &wc)?;
            let mx = g.elementwise_max(&[a, c])?;
            let mx = project(g, mx, &wm)?;
            g.add(cat, mx)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn elementwise_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "elementwise");
    let store = store_of(vec![
        ("a", uniform(&mut rng, &[2, 3], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[2, 3], -1.0, 1.0)),
    ]);
    let c = uniform(&mut rng, &[6], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let p = g.mul(a, b)?;
            let q = g.scale(p, 1.7);
            let q = g.reshape(q, &[6])?;
            let r = g.mul_const(q, c.clone())?;
            let m = g.mean(r);
            let s2 = g.sum(a);
            g.add(m, s2)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn pyramid_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "pyramid");
    let bins = [1, 2, 4];
    let mut init = ParamStore::new();
    init_pyramid_params(&mut init, "ppm.", 6, &bins, seed)?;
    let mut store = randomize(&init, &mut rng);
    store.insert("x", uniform(&mut rng, &[1, 6, 4, 4], -1.0, 1.0))?;
    let w = uniform(&mut rng, &[1, 12, 4, 4], -1.0, 1.0);
    grad_check_params(
        |g, s| {
            let x = g.param(s, "x")?;
            let y = pyramid_pooling_forward(g, s, "ppm.", x, &bins)?;
            project(g, y, &w)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn focal_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "focal");
    let store = store_of(vec![
        ("z", uniform(&mut rng, &[3, 5], -2.0, 2.0)),
        ("y", uniform(&mut rng, &[2, 4, 4], -2.0, 2.0)),
    ]);
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    let gamma = rng.random_range(0.0..3.0);
    let alpha: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..2.0)).collect();
    let mask = Tensor::from_fn(&[2, 4, 4], |_| f64::from(u8::from(rng.random_bool(0.4))));
    let balpha = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
    grad_check_params(
        |g, s| {
            let z = g.param(s, "z")?;
            let p = g.softmax(z)?;
            let a = g.focal_loss(p, &targets, gamma, &alpha)?;
            let y = g.param(s, "y")?;
            let q = g.sigmoid(y);
            let b = g.binary_focal_loss(q, mask.clone(), gamma, balpha)?;
            g.add(a, b)
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn small_model_l_config() -> ModelLConfig {
    ModelLConfig {
        input_size: 16,
        backbone: BackboneConfig {
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 2,
            stem_pool: false,
            blocks: vec![
                BlockSpec {
                    out_channels: 8,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 6,
                    stride: 1,
                },
            ],
        },
        bins: vec![1, 2, 4],
    }
}

fn small_model_c_config(fusion: FusionMode) -> ModelCConfig {
    ModelCConfig {
        input_size: 16,
        backbone: BackboneConfig {
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 2,
            stem_pool: true,
            blocks: vec![BlockSpec {
                out_channels: 6,
                stride: 2,
            }],
        },
        fusion,
        head_hidden: vec![8],
        ..ModelCConfig::default()
    }
}

fn model_l_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "model_l");
    let cfg = small_model_l_config();
    let model = ModelL::new(cfg.clone(), seed)?;
    let store = randomize(&model.params, &mut rng);
    let image = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let mask = Tensor::from_fn(&[1, 16, 16], |_| f64::from(u8::from(rng.random_bool(0.3))));
    grad_check_params(
        |g, s| {
            let x = g.constant(image.clone());
            let p = ModelL::forward(&cfg, g, s, x)?;
            g.binary_focal_loss(p, mask.clone(), 2.0, [0.6, 1.4])
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn model_c_case(seed: u64) -> mvdamage::Result<GradCheckReport> {
    let mut rng = rng_for(seed, "model_c");
    let fusion = if seed % 2 == 0 {
        FusionMode::EarlyConcat
    } else {
        FusionMode::ViewMax
    };
    let cfg = small_model_c_config(fusion);
    let model = ModelC::new(cfg.clone(), seed)?;
    let store = randomize(&model.params, &mut rng);
    let views: Vec<Tensor<f64>> = (0..5)
        .map(|_| uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0))
        .collect();
    let label = rng.random_range(0..5);
    let gamma = if seed % 3 == 0 { 0.0 } else { 2.0 };
    grad_check_params(
        |g, s| {
            let vs: Vec<Var> = views.iter().map(|v| g.constant(v.clone())).collect();
            let p = ModelC::forward(&cfg, g, s, &vs)?;
            g.focal_loss(p, &[label], gamma, &[1.0; 5])
        },
        &store,
        GRAD_STEP,
        GRAD_TOL,
    )
}

fn gradient_correctness() -> Result<String> {
    let layers: [(&str, LayerCase); 10] = [
        ("conv2d", conv_case),
        ("depthwise", depthwise_case),
        ("separable", separable_case),
        ("dense", dense_case),
        ("activations", activation_case),
        ("pooling+resize", pooling_case),
        ("concat+max", fusion_case),
        ("elementwise", elementwise_case),
        ("pyramid pooling", pyramid_case),
        ("focal losses", focal_case),
    ];
    let mut worst_layer = 0.0f64;
    for (name, case) in layers {
        for seed in 0..GRAD_SEEDS {
            let r = case(seed).with_context(|| format!("{name} seed {seed}"))?;
            ensure!(
                r.passed,
                "{name} seed {seed}: relative error {:.3e} at coordinate {} (analytic {:.6e}, numeric {:.6e})",
                r.max_rel_error,
                r.worst_index,
                r.analytic_at_worst,
                r.numeric_at_worst
            );
            worst_layer = worst_layer.max(r.max_rel_error);
        }
    }
    // Whole models are judged per parameter tensor: single coordinates with
    // gradients near 1e-8 sit at the roundoff floor of the difference quotient.
    let models: [(&str, LayerCase); 2] = [("Model-L", model_l_case), ("Model-C", model_c_case)];
    let mut worst_model = 0.0f64;
    let mut worst_element = 0.0f64;
    for (name, case) in models {
        for seed in 0..GRAD_SEEDS {
            let r = case(seed).with_context(|| format!("{name} seed {seed}"))?;
            let e = r.max_tensor_rel_error();
            ensure!(
                e < GRAD_TOL,
                "{name} seed {seed}: tensor relative error {e:.3e}"
            );
            worst_model = worst_model.max(e);
            worst_element = worst_element.max(r.max_rel_error);
        }
    }
    Ok(format!(
        "10 layer cases and 2 models x {GRAD_SEEDS} seeds; layers worst elementwise {worst_layer:.2e}, \
         models worst per-tensor {worst_model:.2e} (elementwise {worst_element:.2e})"
    ))
}

fn loss_identities() -> Result<String> {
    let mut checked = 0;
    let mut worst = 0.0f64;
    for k in [2usize, 3, 5] {
        for i in 1..=999 {
            let p = i as f64 / 1000.0;
            let mut probs = vec![(1.0 - p) / (k - 1) as f64; k];
            probs[0] = p;
            let ce = cross_entropy_loss(&probs, 0)?;
            let f0 = focal_loss(&probs, 0, 0.0, &vec![1.0; k])?;
            let f2 = focal_loss(&probs, 0, 2.0, &vec![1.0; k])?;
            worst = worst.max((f0 - ce).abs()).max((ce + p.ln()).abs());
            ensure!(
                (f0 - ce).abs() <= 1e-9,
                "focal(0, 1) = {f0} but cross-entropy = {ce} at p = {p}"
            );
            ensure!(
                (ce + p.ln()).abs() <= 1e-9,
                "cross-entropy {ce} differs from -ln {p}"
            );
            ensure!(
                f2 <= ce,
                "focal(2, 1) = {f2} exceeds cross-entropy {ce} at p = {p}"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} grid points, max deviation {worst:.1e}"))
}

/// AP by enumerating every confidence threshold: the area under the
/// interpolated curve `p(r) = max { precision(t) : recall(t) >= r }`.
fn ap_oracle(dets: &[Detection], total_gt: usize, eleven: bool) -> f64 {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&Detection> = dets.iter().filter(|d| d.confidence >= t).collect();
            let tp = kept.iter().filter(|d| d.true_positive).count();
            (tp as f64 / total_gt as f64, tp as f64 / kept.len() as f64)
        })
        .collect();
    let interp = |r: f64| {
        points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max)
    };
    if eleven {
        return (0..=10).map(|t| interp(t as f64 / 10.0)).sum::<f64>() / 11.0;
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        if r > prev {
            area += (r - prev) * interp(r);
            prev = r;
        }
    }
    area
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn metric_oracles() -> Result<String> {
    let mut rng = rng_for(3, "metric-oracles");
    let sets = 2000;
    for n in 0..sets {
        let size = rng.random_range(0..=10);
        // distinct confidences: a shuffled grid
        let mut confs: Vec<f64> = (0..size).map(|i| (i as f64 + 0.5) / size as f64).collect();
        for i in (1..confs.len()).rev() {
            confs.swap(i, rng.random_range(0..=i));
        }
        let dets: Vec<Detection> = confs
            .iter()
            .map(|&confidence| Detection {
                confidence,
                true_positive: rng.random_bool(0.5),
            })
            .collect();
        let tps = dets.iter().filter(|d| d.true_positive).count();
        let total_gt = tps.max(1) + rng.random_range(0..3);
        for (mode, eleven) in [
            (ApInterpolation::AllPoint, false),
            (ApInterpolation::ElevenPoint, true),
        ] {
            let got = pr_curve_and_ap(&dets, total_gt, mode)?.ap;
            let want = ap_oracle(&dets, total_gt, eleven);
            ensure!(
                (got - want).abs() <= 1e-12,
                "set {n} ({mode:?}): AP {got} but oracle {want}"
            );
        }
    }

    let masks = 1000;
    for n in 0..masks {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let da = rng.random_range(0.0..1.0);
        let a = random_mask(&mut rng, h, w, da);
        let db = rng.random_range(0.0..1.0);
        let b = random_mask(&mut rng, h, w, db);
        let inter = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| **x && **y)
            .count();
        let union = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| **x || **y)
            .count();
        let want = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        ensure!(
            iou(&a, &b)? == want,
            "mask pair {n}: IoU {} but pixel oracle {want}",
            iou(&a, &b)?
        );

        let pred_probs = Tensor::from_fn(&[h, w], |_| rng.random_range(0.5f32..1.0));
        let preds = extract_instances(&a, Some(&pred_probs))?;
        let gts = extract_instances(&b, None)?;
        for p in &preds {
            for q in &gts {
                let i = p.pixels.iter().filter(|x| q.pixels.contains(x)).count();
                let u = p.area() + q.area() - i;
                ensure!(
                    p.iou(q) == i as f64 / u as f64,
                    "instance IoU disagrees with pixel oracle"
                );
            }
        }
        let threshold = rng.random_range(0.05..0.95);
        let m = match_instances(&preds, &gts, threshold)?;
        ensure!(
            m.tp + m.fn_ == gts.len() && m.tp + m.fp == preds.len(),
            "mask pair {n}: tp {} fp {} fn {} for {} predictions and {} ground truths",
            m.tp,
            m.fp,
            m.fn_,
            preds.len(),
            gts.len()
        );
        ensure!(
            m.pairs.len() == m.tp && m.pairs.iter().all(|p| p.2 >= threshold),
            "mask pair {n}: bad pairs"
        );
    }
    Ok(format!("{sets} prediction sets, {masks} mask pairs"))
}

fn coarse_remap() -> Result<String> {
    let mut rng = rng_for(4, "coarse-remap");
    let trials = 10_000;
    let mut strictly = 0;
    for n in 0..trials {
        let len = rng.random_range(1..=60);
        let truth: Vec<u8> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<u8> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let idx = |v: &[u8]| v.iter().map(|&l| l as usize).collect::<Vec<_>>();
        let coarse = |v: &[u8]| -> Result<Vec<usize>> {
            v.iter()
                .map(|&l| Ok(remap_coarse(DamageState::new(l)?).index()))
                .collect()
        };
        let (_, fine) = confusion_and_accuracy(&idx(&truth), &idx(&pred), 5)?;
        let (_, coarse_acc) = confusion_and_accuracy(&coarse(&truth)?, &coarse(&pred)?, 3)?;
        ensure!(
            coarse_acc >= fine,
            "trial {n}: coarse {coarse_acc} below fine {fine}"
        );
        strictly += usize::from(coarse_acc > fine);
    }
    Ok(format!("{trials} label sets, {strictly} strictly improved"))
}

fn model_l_iou() -> Result<String> {
    let gen = GeneratorConfig {
        n_buildings: 100,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let [train, val, test] = split_loaded(generate_in_memory(&gen)?, [0.8, 0.1, 0.1], gen.seed)?;
    let model = ModelL::new(ModelLConfig::default(), derive_seed(7, "model_l"))?;
    let config = TrainConfig {
        seed: 7,
        ..TrainConfig::localization()
    };
    let outcome = train_model_l(
        model,
        &segmentation_examples(&train),
        &segmentation_examples(&val),
        &config,
    )?;
    let m = evaluate_model_l(&outcome.model, &test)?;
    ensure!(
        m.mean_iou >= 0.70,
        "mean IoU {:.4} after {} epochs",
        m.mean_iou,
        outcome.log.entries.len()
    );
    Ok(format!(
        "mean IoU {:.3}, F1 {:.3}, mAP {:.3}, {} epochs",
        m.mean_iou,
        m.mean_f1,
        m.map,
        outcome.log.entries.len()
    ))
}

fn model_c_overfit() -> Result<String> {
    let gen = GeneratorConfig {
        n_buildings: 25,
        seed: 11,
        ..GeneratorConfig::default()
    };
    let mut all = generate_in_memory(&gen)?;
    let val = all.split_off(20);
    let model = ModelC::new(ModelCConfig::default(), derive_seed(11, "model_c"))?;
    let head = TrainConfig {
        seed: 11,
        ..TrainConfig::classification_head()
    };
    let finetune = TrainConfig {
        seed: 11,
        ..TrainConfig::classification_finetune()
    };
    let outcome = train_model_c(model, &all, &val, &head, &finetune)?;
    let acc = classification_accuracy(&outcome.model, &all)?;
    ensure!(acc >= 0.95, "training accuracy {acc:.3}");
    Ok(format!("training accuracy {acc:.3}"))
}

fn multi_view_advantage() -> Result<String> {
    let out = tempfile::tempdir()?;
    let report = ablate(&RunConfig::default(), out.path(), &mut |_| {})?;
    let seeds: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("seed {}: {:.2} vs {:.2}", r.seed, r.fused, r.best_single))
        .collect();
    ensure!(
        report.advantage >= 0.10,
        "fused {:.3} vs best single view {:.3} ({})",
        report.mean_fused,
        report.mean_best_single,
        seeds.join(", ")
    );
    Ok(format!(
        "fused {:.3} vs best single view {:.3}, +{:.1} points ({})",
        report.mean_fused,
        report.mean_best_single,
        100.0 * report.advantage,
        seeds.join(", ")
    ))
}

fn backbone_snapshot(model: &ModelC) -> Vec<(String, Vec<u32>)> {
    model
        .params
        .iter()
        .filter(|p| p.name.starts_with("backbone."))
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn freeze_contract() -> Result<String> {
    let gen = GeneratorConfig {
        n_buildings: 10,
        seed: 5,
        ..GeneratorConfig::default()
    };
    let mut train = generate_in_memory(&gen)?;
    let val = train.split_off(8);
    let mut model = ModelC::new(ModelCConfig::default(), 5)?;
    let initial = backbone_snapshot(&model);
    let head_initial = model.params.get("head.fc0.weight")?.value.clone();
    let phase = |max_epochs, learning_rate| TrainConfig {
        max_epochs,
        learning_rate,
        seed: 5,
        ..TrainConfig::classification_head()
    };
    let score = |m: &ModelC| classification_score(m, &val, 0.0, &[1.0; 5]);

    let frozen = set_trainable(&mut model.params, "backbone.", false)?;
    train_classifier_phase(&mut model, &train, &phase(2, 1e-3), 1, 1, score)?;
    ensure!(
        backbone_snapshot(&model) == initial,
        "a backbone parameter moved while frozen"
    );
    ensure!(
        model.params.get("head.fc0.weight")?.value != head_initial,
        "the head did not train in phase 1"
    );

    set_trainable(&mut model.params, "", true)?;
    train_classifier_phase(&mut model, &train, &phase(2, 1e-4), 2, 3, score)?;
    let after = backbone_snapshot(&model);
    let moved = after
        .iter()
        .zip(&initial)
        .filter(|(a, b)| a.1 != b.1)
        .count();
    ensure!(
        moved > 0,
        "no backbone parameter changed during fine-tuning"
    );

    // the packaged schedule honours the same contract
    let packaged = train_model_c(
        ModelC::new(ModelCConfig::default(), 5)?,
        &train,
        &val,
        &phase(1, 1e-3),
        &phase(1, 1e-4),
    )?;
    ensure!(
        backbone_snapshot(&packaged.model) != initial,
        "train_model_c never unfroze the backbones"
    );
    Ok(format!(
        "{frozen} backbone tensors frozen bitwise, {moved} moved in phase 2"
    ))
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvdamage"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MVDAMAGE_OUT")
        .output()
        .context("spawning mvdamage")?;
    if !out.status.success() {
        bail!(
            "mvdamage {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn cli_determinism() -> Result<String> {
    let config = "seed = 21\n[train_l]\nmax_epochs = 2\n[train_c_head]\nmax_epochs = 2\n[train_c_finetune]\nmax_epochs = 2\n";
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let root = dir.path();
        fs::write(root.join("cfg.toml"), config)?;
        let summary = run_cli(
            &[
                "generate",
                "--buildings",
                "10",
                "--seed",
                "3",
                "--out",
                "data",
            ],
            root,
        )?;
        run_cli(
            &[
                "train", "-c", "cfg.toml", "--stage", "all", "--data", "data", "--out", "train",
            ],
            root,
        )?;
        run_cli(
            &[
                "eval",
                "-c",
                "cfg.toml",
                "--data",
                "data",
                "--checkpoints",
                "train",
                "--out",
                "eval",
            ],
            root,
        )?;
        run_cli(
            &[
                "eval",
                "-c",
                "cfg.toml",
                "--data",
                "data",
                "--checkpoints",
                "train",
                "--out",
                "oracle",
                "--oracle-masks",
            ],
            root,
        )?;
        let digest = summary
            .lines()
            .find_map(|l| l.strip_prefix("digest: "))
            .ok_or_else(|| anyhow!("generate printed no digest"))?
            .to_string();
        runs.push((dir, digest));
    }
    ensure!(runs[0].1 == runs[1].1, "dataset digests differ");
    let files = [
        "data/manifest.json",
        "train/model_l.ckpt",
        "train/model_c.ckpt",
        "train/train_l_log.csv",
        "train/train_c_log.csv",
        "eval/metrics.json",
        "eval/pr_curve.csv",
        "oracle/metrics.json",
    ];
    for f in files {
        let a = fs::read(runs[0].0.path().join(f)).with_context(|| f.to_string())?;
        let b = fs::read(runs[1].0.path().join(f)).with_context(|| f.to_string())?;
        ensure!(a == b, "{f} differs between identical runs");
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        files.len()
    ))
}

fn square(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, confidence: f64) -> Instance {
    Instance::new(
        rows.flat_map(|r| cols.clone().map(move |c| r * 10 + c))
            .collect(),
        confidence,
    )
}

fn boundary_conventions() -> Result<String> {
    let empty = BinaryMask::filled(4, 4, false);
    ensure!(
        iou(&empty, &empty)? == 1.0,
        "IoU of two empty masks is not 1"
    );

    // 4 shared pixels over a union of 8
    let gt = square(0..2, 0..3, 1.0);
    let pred = square(0..2, 1..4, 0.9);
    ensure!(
        pred.iou(&gt) == 0.5,
        "constructed pair has IoU {}",
        pred.iou(&gt)
    );
    let m = match_instances(&[pred], &[gt], 0.5)?;
    ensure!(
        m.tp == 1 && m.fp == 0 && m.fn_ == 0,
        "IoU exactly 0.5 did not count as a true positive"
    );

    let none = MatchResult::default();
    ensure!(
        precision_recall_f1(&none) == (0.0, 0.0, 0.0),
        "empty denominators must give zeros"
    );
    let only_fp = MatchResult {
        fp: 3,
        ..MatchResult::default()
    };
    ensure!(
        precision_recall_f1(&only_fp) == (0.0, 0.0, 0.0),
        "no ground truth and no hits must give zeros"
    );
    Ok("empty IoU 1, IoU 0.5 is TP, empty P/R/F1 are 0".into())
}
