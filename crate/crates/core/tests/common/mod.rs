#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rbcl::featurespace::{build_neighbor_index, FeatureSet, NcaSampler, Source};
use rbcl::losses::{
    hard_triplet_loss, id_loss, influence_loss, l2_compat_loss, mmd_loss, smooth_ap_loss,
    smooth_ap_loss_with_constants, Bandwidth, DgrParams, SigmoidParams,
};
use rbcl::model::ClassifierHead;
use rbcl::oracles::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
use rbcl::ClassId;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_TAU: f64 = 0.1;
pub const GRAD_INSTANCES: u64 = 20;
/// Entries below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn feature_set(
    features: Array2<f64>,
    labels: Vec<ClassId>,
    id0: u64,
    encoder: &str,
) -> FeatureSet {
    let ids = (id0..id0 + labels.len() as u64).collect();
    FeatureSet::new(features, labels, ids, Source::new(encoder, "test")).unwrap()
}

/// `classes` clusters of `per_class` points around random centers.
pub fn clustered(
    rng: &mut ChaCha8Rng,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    id0: u64,
) -> FeatureSet {
    let centers = gaussian(rng, classes, dim, 1.0);
    let mut x = Array2::zeros((classes * per_class, dim));
    let mut labels = Vec::new();
    for c in 0..classes {
        for k in 0..per_class {
            let r = c * per_class + k;
            for f in 0..dim {
                x[[r, f]] = centers[[c, f]] + spread * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c as ClassId);
        }
    }
    feature_set(x, labels, id0, "rand")
}

fn check(analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64, at: &Array2<f64>) -> f64 {
    let numeric = finite_diff_grad(f, at, DEFAULT_STEP).unwrap();
    max_relative_error(analytic, &numeric, REL_FLOOR)
}

/// Smooth-AP against an NCA gallery drawn from a random old space.
pub fn smooth_ap_grad_error(seed: u64, dgr: bool) -> f64 {
    let mut r = rng(seed);
    let classes = 6;
    let old = clustered(&mut r, classes, 4, 5, 0.4, 1000);
    let index = build_neighbor_index(&old, 3);
    let sampler = NcaSampler::new(&index, &old);
    let batch_classes: Vec<ClassId> = vec![r.random_range(0..3), r.random_range(3..6)];
    let gallery = sampler.sample(&batch_classes, &mut r).unwrap();
    let labels: Vec<ClassId> = batch_classes.iter().flat_map(|&c| [c, c]).collect();
    let query = feature_set(gaussian(&mut r, labels.len(), 5, 1.0), labels, 0, "new");
    let p = SigmoidParams::new(GRAD_TAU).unwrap();
    let g = if dgr {
        DgrParams::default()
    } else {
        DgrParams::disabled()
    };
    let out = smooth_ap_loss(&query, &gallery, p, g).unwrap();
    let consts = out.constants.clone();
    check(
        &out.grad_query,
        |x| {
            let q = query.with_features(x.clone()).unwrap();
            smooth_ap_loss_with_constants(&q, &gallery, p, &consts)
                .unwrap()
                .l_m
        },
        query.features(),
    )
}

/// Hard triplet loss on a batch whose hinges and hardest choices are all
/// at least `gap` away from a switch.
pub fn triplet_grad_error(seed: u64) -> f64 {
    let margin = 0.3;
    let gap = 1e-3;
    let mut r = rng(seed);
    loop {
        let batch = clustered(&mut r, 3, 3, 4, 0.6, 0);
        if !off_boundaries(&batch, margin, gap) {
            continue;
        }
        let (_, grad) = hard_triplet_loss(&batch, margin).unwrap();
        return check(
            &grad,
            |x| {
                hard_triplet_loss(&batch.with_features(x.clone()).unwrap(), margin)
                    .unwrap()
                    .0
            },
            batch.features(),
        );
    }
}

fn off_boundaries(batch: &FeatureSet, margin: f64, gap: f64) -> bool {
    let n = batch.len();
    let x = batch.features();
    let dist = |a: usize, b: usize| (&x.row(a) - &x.row(b)).mapv(|v| v * v).sum().sqrt();
    for a in 0..n {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for b in 0..n {
            if b == a {
                continue;
            }
            if batch.labels()[b] == batch.labels()[a] {
                pos.push(dist(a, b));
            } else {
                neg.push(dist(a, b));
            }
        }
        pos.sort_by(|u, v| v.total_cmp(u));
        neg.sort_by(f64::total_cmp);
        if pos.len() > 1 && pos[0] - pos[1] < gap {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < gap {
            return false;
        }
        if (margin + pos[0] - neg[0]).abs() < gap {
            return false;
        }
    }
    true
}

pub fn id_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = gaussian(&mut r, 6, 4, 2.0);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    let (_, grad) = id_loss(&logits, &labels, 0.1).unwrap();
    check(&grad, |x| id_loss(x, &labels, 0.1).unwrap().0, &logits)
}

fn paired(seed: u64) -> (FeatureSet, FeatureSet) {
    let mut r = rng(seed);
    let labels: Vec<ClassId> = (0..6).map(|i| i / 2).collect();
    let new = feature_set(gaussian(&mut r, 6, 4, 1.0), labels.clone(), 0, "new");
    let old = feature_set(gaussian(&mut r, 6, 4, 1.0), labels, 0, "old");
    (new, old)
}

pub fn l2_grad_error(seed: u64) -> f64 {
    let (new, old) = paired(seed);
    let (_, grad) = l2_compat_loss(&new, &old).unwrap();
    check(
        &grad,
        |x| {
            l2_compat_loss(&new.with_features(x.clone()).unwrap(), &old)
                .unwrap()
                .0
        },
        new.features(),
    )
}

pub fn mmd_grad_error(seed: u64) -> f64 {
    let (new, old) = paired(seed);
    let bw = Bandwidth::Fixed(1.0 + (seed % 3) as f64 * 0.5);
    let (_, grad) = mmd_loss(&new, &old, bw).unwrap();
    check(
        &grad,
        |x| {
            mmd_loss(&new.with_features(x.clone()).unwrap(), &old, bw)
                .unwrap()
                .0
        },
        new.features(),
    )
}

pub fn influence_grad_error(seed: u64) -> f64 {
    let (new, old) = paired(seed);
    let head = ClassifierHead::init(5, 4, seed + 77).unwrap();
    let (_, grad) = influence_loss(&new, &old, &head).unwrap();
    check(
        &grad,
        |x| {
            influence_loss(&new.with_features(x.clone()).unwrap(), &old, &head)
                .unwrap()
                .0
        },
        new.features(),
    )
}

/// Worst error over the standard number of instances.
pub fn worst(f: impl Fn(u64) -> f64) -> f64 {
    (0..GRAD_INSTANCES).map(f).fold(0.0, f64::max)
}

/// Experiment config used by the end-to-end checks.
pub fn experiment_json(setting: &str, seed: u64, out: &str) -> String {
    let cross_domain = setting.starts_with("CD");
    let (spread, lr) = if cross_domain {
        (0.5, 0.005)
    } else {
        (0.3, 0.05)
    };
    let domain_b = if cross_domain {
        format!(
            r#"{{"num_classes": 30, "instances_per_class": 10, "input_dim": 16, "cluster_spread": {spread},
                "center_scale": 1.0, "domain": "B", "test_class_fraction": 0.3333333333, "seed": {},
                "shift": {{"rotation_seed": {}, "translation_scale": 1.5, "spread_multiplier": 1.2}}}}"#,
            seed + 500,
            seed + 900
        )
    } else {
        "null".to_string()
    };
    format!(
        r#"{{
        "setting": "{setting}",
        "domainA": {{"num_classes": 30, "instances_per_class": 10, "input_dim": 16, "cluster_spread": {spread},
                    "center_scale": 1.0, "domain": "A", "test_class_fraction": 0.3333333333, "seed": {seed}}},
        "domainB": {domain_b},
        "encoder_old": {{"input_dim": 16, "hidden_dims": [32], "embed_dim": 16, "activation": "relu", "seed": {seed}}},
        "encoder_new": null,
        "train": {{"epochs": 40, "p": 4, "k_inst": 4, "learning_rate": {lr}, "seed": {seed}, "nca_k": 10,
                  "tau": 0.01, "dgr": {{"alpha": 0.5, "enabled": true}}, "hist_epochs": [0, 39]}},
        "methods": ["rbcl"],
        "output_dir": "{out}"
    }}"#
    )
}
