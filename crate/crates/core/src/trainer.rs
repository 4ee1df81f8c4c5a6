//! Training loops: plain re-ID training (old model, upper bound) and
//! backward compatible training of a new model against a frozen old one.
//!
//! Every step minimizes `L_tri + L_id + L_compat` with unit weights by
//! momentum SGD over PK batches. The old encoder only ever produces the
//! cached old feature space; no gradient reaches it.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pk_batches, Dataset};
use crate::featurespace::{build_neighbor_index, format_float, FeatureSet, NcaSampler, Source};
use crate::losses::{
    hard_triplet_loss, id_loss, influence_loss, l2_compat_loss, mmd_loss, smooth_ap_loss,
    Bandwidth, DgrParams, LossReport, SigmoidParams, TripletTerms, DEFAULT_LABEL_SMOOTHING,
    DEFAULT_MARGIN,
};
use crate::model::{init_encoder, ClassifierHead, Encoder, EncoderGrad, EncoderSpec, Layer};
use crate::{ClassId, Error, Result};

const HEAD_SEED_SALT: u64 = 0x6865_6164;
const NCA_SEED_SALT: u64 = 0x006e_6361;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatLoss {
    None,
    Rbcl,
    L2,
    Mmd,
    Influence,
    TripletAlign,
}

impl CompatLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            CompatLoss::None => "none",
            CompatLoss::Rbcl => "rbcl",
            CompatLoss::L2 => "l2",
            CompatLoss::Mmd => "mmd",
            CompatLoss::Influence => "influence",
            CompatLoss::TripletAlign => "triplet_align",
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_nca_k() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_margin() -> f64 {
    DEFAULT_MARGIN
}
fn default_smoothing() -> f64 {
    DEFAULT_LABEL_SMOOTHING
}
fn default_bins() -> usize {
    40
}
fn default_compat() -> CompatLoss {
    CompatLoss::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; 0 means one full pass over the classes.
    #[serde(default)]
    pub batches_per_epoch: usize,
    pub p: usize,
    pub k_inst: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub tau: SigmoidParams,
    #[serde(default)]
    pub dgr: DgrParams,
    /// First epoch (0-based) with reactivation; defaults to 2/3 of `epochs`.
    #[serde(default)]
    pub dgr_start_epoch: Option<usize>,
    #[serde(default = "default_nca_k")]
    pub nca_k: usize,
    #[serde(default = "default_compat")]
    pub compat_loss: CompatLoss,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub init_from_old: bool,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub mmd_bandwidth: Bandwidth,
    /// Epochs at which to snapshot the triplet-term distribution.
    #[serde(default)]
    pub hist_epochs: Vec<usize>,
    #[serde(default = "default_bins")]
    pub hist_bins: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batches_per_epoch: 0,
            p: 4,
            k_inst: 4,
            learning_rate: 0.05,
            momentum: default_momentum(),
            tau: SigmoidParams::default(),
            dgr: DgrParams::default(),
            dgr_start_epoch: None,
            nca_k: default_nca_k(),
            compat_loss: CompatLoss::None,
            seed,
            init_from_old: true,
            margin: DEFAULT_MARGIN,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            mmd_bandwidth: Bandwidth::Auto,
            hist_epochs: Vec::new(),
            hist_bins: default_bins(),
        }
    }

    pub fn with_compat(&self, compat: CompatLoss) -> Self {
        Self {
            compat_loss: compat,
            ..self.clone()
        }
    }

    pub fn dgr_start(&self) -> usize {
        self.dgr_start_epoch.unwrap_or(self.epochs * 2 / 3)
    }

    /// Whether reactivation is on during `epoch`.
    pub fn dgr_active(&self, epoch: usize) -> bool {
        self.compat_loss == CompatLoss::Rbcl && self.dgr.enabled && epoch >= self.dgr_start()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be ≥ 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.p < 2 || self.k_inst < 2 {
            return bad("P and K_inst must both be ≥ 2".into());
        }
        SigmoidParams::new(self.tau.tau)?;
        DgrParams::new(self.dgr.alpha, self.dgr.enabled)?;
        if self.hist_bins == 0 {
            return bad("hist_bins must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Fixed-range histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = (v - self.lo) / (self.hi - self.lo) * bins as f64;
        let b = (t.floor().max(0.0) as usize).min(bins - 1);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + width * i as f64;
            writeln!(s, "{},{},{c}", format_float(lo), format_float(lo + width))
                .expect("string write");
        }
        s
    }
}

/// Distribution of the `d_nj` terms seen during one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TermHistogram {
    pub epoch: usize,
    pub raw: Histogram,
    pub shifted: Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub epoch: usize,
    pub l_m: f64,
    pub l_tri: f64,
    pub l_id: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_m: f64,
    pub l_tri: f64,
    pub l_id: f64,
    pub l_total: f64,
    pub dgr_active: bool,
    /// Largest raw `d_nj` of the epoch, `None` without ranking terms.
    pub max_raw_term: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepLosses>,
    pub histograms: Vec<TermHistogram>,
    pub notes: Vec<String>,
}

impl TrainTrace {
    pub fn dgr_active(&self) -> Vec<bool> {
        self.epochs.iter().map(|e| e.dgr_active).collect()
    }

    /// `epoch,l_m,l_tri,l_id,l_total,dgr_active`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_m,l_tri,l_id,l_total,dgr_active\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                format_float(e.l_m),
                format_float(e.l_tri),
                format_float(e.l_id),
                format_float(e.l_total),
                e.dgr_active
            )
            .expect("string write");
        }
        s
    }
}

/// What the compatibility term needs from the old model.
struct OldSpace<'a> {
    features: FeatureSet,
    classifier: &'a ClassifierHead,
    sampler: NcaSampler<'a>,
}

struct Momentum {
    encoder: EncoderGrad,
    head: Layer,
}

fn sgd_update(param: &mut Layer, grad: &Layer, velocity: &mut Layer, lr: f64, momentum: f64) {
    velocity.weight.mapv_inplace(|v| v * momentum);
    velocity.weight += &grad.weight;
    velocity.bias.mapv_inplace(|v| v * momentum);
    velocity.bias += &grad.bias;
    param.weight.scaled_add(-lr, &velocity.weight);
    param.bias.scaled_add(-lr, &velocity.bias);
}

/// Batch features with positional instance ids (batches may repeat an
/// instance when a class is sampled with replacement).
fn batch_set(features: Array2<f64>, labels: Vec<ClassId>, source: &str) -> Result<FeatureSet> {
    let ids = (0..labels.len() as u64).collect();
    FeatureSet::new(features, labels, ids, Source::new(source, "batch"))
}

struct Compat {
    value: f64,
    grad: Array2<f64>,
    terms: TripletTerms,
}

fn compat_term(
    cfg: &TrainConfig,
    epoch: usize,
    new_batch: &FeatureSet,
    rows: &[usize],
    old: &OldSpace<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Compat> {
    let aligned_old = || -> Result<FeatureSet> {
        batch_set(
            old.features.features().select(Axis(0), rows),
            new_batch.labels().to_vec(),
            "old",
        )
    };
    let (value, grad, terms) = match cfg.compat_loss {
        CompatLoss::None => (
            0.0,
            Array2::zeros(new_batch.features().dim()),
            TripletTerms::default(),
        ),
        CompatLoss::Rbcl => {
            let classes: Vec<ClassId> = new_batch
                .labels()
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let gallery = old.sampler.sample(&classes, rng)?;
            let dgr = cfg.dgr.with_enabled(cfg.dgr_active(epoch));
            let out = smooth_ap_loss(new_batch, &gallery, cfg.tau, dgr)?;
            (out.l_m, out.grad_query, out.terms)
        }
        CompatLoss::L2 => {
            let (v, g) = l2_compat_loss(new_batch, &aligned_old()?)?;
            (v, g, TripletTerms::default())
        }
        CompatLoss::Mmd => {
            let (v, g) = mmd_loss(new_batch, &aligned_old()?, cfg.mmd_bandwidth)?;
            (v, g, TripletTerms::default())
        }
        CompatLoss::Influence => {
            let (v, g) = influence_loss(new_batch, &aligned_old()?, old.classifier)?;
            (v, g, TripletTerms::default())
        }
        CompatLoss::TripletAlign => {
            let n = new_batch.len();
            let old_b = aligned_old()?;
            let union = concatenate(
                Axis(0),
                &[new_batch.features().view(), old_b.features().view()],
            )
            .expect("equal widths");
            let labels = [new_batch.labels(), old_b.labels()].concat();
            let (v, g) = hard_triplet_loss(&batch_set(union, labels, "union")?, cfg.margin)?;
            (v, g.slice(s![..n, ..]).to_owned(), TripletTerms::default())
        }
    };
    Ok(Compat { value, grad, terms })
}

fn run_training(
    train: &Dataset,
    mut encoder: Encoder,
    cfg: &TrainConfig,
    old: Option<&OldSpace<'_>>,
    trace: &mut TrainTrace,
) -> Result<(Encoder, ClassifierHead)> {
    cfg.validate()?;
    let classes = train.classes();
    let class_index: HashMap<ClassId, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut head = ClassifierHead::init(
        classes.len(),
        encoder.embed_dim(),
        cfg.seed ^ HEAD_SEED_SALT,
    )?;

    let p = cfg.p.min(classes.len());
    if p < 2 {
        return Err(Error::TooFewClasses {
            needed: 2,
            available: classes.len(),
        });
    }
    if p < cfg.p {
        trace
            .notes
            .push(format!("P clamped from {} to {p} classes", cfg.p));
    }
    let mut sampler = pk_batches(train, p, cfg.k_inst, cfg.seed)?;
    let steps = if cfg.batches_per_epoch == 0 {
        sampler.epoch_len()
    } else {
        cfg.batches_per_epoch
    };
    let rows_of = train.row_index();
    let mut nca_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NCA_SEED_SALT);
    let mut velocity = Momentum {
        encoder: EncoderGrad::zeros_like(&encoder),
        head: Layer {
            weight: Array2::zeros(head.weight.dim()),
            bias: ndarray::Array1::zeros(head.bias.len()),
        },
    };
    let hist_epochs: BTreeSet<usize> = cfg.hist_epochs.iter().copied().collect();

    for epoch in 0..cfg.epochs {
        let dgr_active = cfg.dgr_active(epoch);
        let mut sums = [0.0f64; 4];
        let mut max_raw: Option<f64> = None;
        let snapshot = hist_epochs.contains(&epoch);
        let mut raw_hist = Histogram::new(-2.0, 2.0, cfg.hist_bins);
        let mut shifted_hist = Histogram::new(-2.0, 2.0, cfg.hist_bins);

        for _ in 0..steps {
            let ids = sampler.next().expect("pk stream is endless");
            let rows: Vec<usize> = ids.iter().map(|id| rows_of[id]).collect();
            let x = train.inputs().select(Axis(0), &rows);
            let labels: Vec<ClassId> = rows.iter().map(|&r| train.labels()[r]).collect();
            let label_idx: Vec<usize> = labels.iter().map(|l| class_index[l]).collect();

            let feats = encoder.encode(&x)?;
            let batch = batch_set(feats.clone(), labels, "new")?;
            let (l_tri, g_tri) = hard_triplet_loss(&batch, cfg.margin)?;
            let logits = head.logits(&feats)?;
            let (l_id, g_logits) = id_loss(&logits, &label_idx, cfg.label_smoothing)?;
            let compat = match old {
                Some(o) => compat_term(cfg, epoch, &batch, &rows, o, &mut nca_rng)?,
                None => Compat {
                    value: 0.0,
                    grad: Array2::zeros(feats.dim()),
                    terms: TripletTerms::default(),
                },
            };
            let grad_feats = g_tri + &head.backward_input(&g_logits) + &compat.grad;
            let report = LossReport::new(compat.value, l_tri, l_id, grad_feats, compat.terms);
            if !report.l_total.is_finite() || report.grad_query.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }

            let (enc_grad, _) = encoder.encode_backward(&x, &report.grad_query)?;
            let head_grad = head.backward_params(&feats, &g_logits);
            for ((layer, g), v) in encoder
                .layers_mut()
                .iter_mut()
                .zip(&enc_grad.layers)
                .zip(&mut velocity.encoder.layers)
            {
                sgd_update(layer, g, v, cfg.learning_rate, cfg.momentum);
            }
            let mut head_layer = Layer {
                weight: std::mem::take(&mut head.weight),
                bias: std::mem::take(&mut head.bias),
            };
            sgd_update(
                &mut head_layer,
                &head_grad,
                &mut velocity.head,
                cfg.learning_rate,
                cfg.momentum,
            );
            head.weight = head_layer.weight;
            head.bias = head_layer.bias;

            for (i, v) in [report.l_m, report.l_tri, report.l_id, report.l_total]
                .into_iter()
                .enumerate()
            {
                sums[i] += v;
            }
            for &d in &report.terms.values {
                max_raw = Some(max_raw.map_or(d, |m: f64| m.max(d)));
            }
            if snapshot {
                report.terms.values.iter().for_each(|&d| raw_hist.add(d));
                report
                    .terms
                    .shifted_values
                    .iter()
                    .for_each(|&d| shifted_hist.add(d));
            }
            trace.steps.push(StepLosses {
                epoch,
                l_m: report.l_m,
                l_tri: report.l_tri,
                l_id: report.l_id,
                l_total: report.l_total,
            });
        }

        let n = steps.max(1) as f64;
        trace.epochs.push(EpochStats {
            epoch,
            l_m: sums[0] / n,
            l_tri: sums[1] / n,
            l_id: sums[2] / n,
            l_total: sums[3] / n,
            dgr_active,
            max_raw_term: max_raw,
        });
        if snapshot {
            trace.histograms.push(TermHistogram {
                epoch,
                raw: raw_hist,
                shifted: shifted_hist,
            });
        }
    }
    Ok((encoder, head))
}

/// Trains an encoder and classifier from scratch with `L_tri + L_id`.
pub fn train_reid(
    train: &Dataset,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<(Encoder, ClassifierHead, TrainTrace)> {
    if cfg.compat_loss != CompatLoss::None {
        return Err(Error::InvalidSpec(
            "train_reid takes compat_loss = none".into(),
        ));
    }
    let mut trace = TrainTrace::default();
    let (encoder, head) = run_training(train, init_encoder(spec)?, cfg, None, &mut trace)?;
    Ok((encoder, head, trace))
}

#[derive(Debug, Clone)]
pub struct BctOutcome {
    pub encoder: Encoder,
    pub classifier: ClassifierHead,
    pub trace: TrainTrace,
}

/// Backward compatible training of a new encoder against a frozen old one.
///
/// The old features of `new_train` are computed once; the neighbor index is
/// built over their class centroids. With `init_from_old` and matching
/// shapes the new encoder starts from the old weights, otherwise from a
/// fresh initialization (recorded in the trace notes).
pub fn train_bct(
    new_train: &Dataset,
    old: &Encoder,
    old_classifier: &ClassifierHead,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<BctOutcome> {
    spec.validate()?;
    if spec.embed_dim != old.embed_dim() {
        return Err(Error::EmbedDimMismatch(spec.embed_dim, old.embed_dim()));
    }
    let mut trace = TrainTrace::default();
    let old_features = new_train.encode(old, "old")?;
    let index = build_neighbor_index(&old_features, cfg.nca_k);
    let space = OldSpace {
        sampler: NcaSampler::new(&index, &old_features),
        features: old_features.clone(),
        classifier: old_classifier,
    };

    let init = if cfg.init_from_old {
        if spec.same_shape(old.spec()) && spec.activation == old.spec().activation {
            Encoder::from_layers(spec.clone(), old.layers().to_vec())?
        } else {
            trace
                .notes
                .push("init_from_old skipped: encoder shapes differ, using fresh init".into());
            init_encoder(spec)?
        }
    } else {
        init_encoder(spec)?
    };
    let (encoder, classifier) = run_training(new_train, init, cfg, Some(&space), &mut trace)?;
    Ok(BctOutcome {
        encoder,
        classifier,
        trace,
    })
}
