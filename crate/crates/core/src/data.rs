//! Synthetic identity datasets, the four supervised upgrade settings and
//! PK-balanced batch sampling.
//!
//! Each class is a Gaussian blob around a Gaussian-distributed center. A
//! domain shift applies a seeded orthogonal rotation and a translation to
//! every point and widens the blobs. Test identities are disjoint from
//! training identities; each test class is split half query, half gallery.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::featurespace::{format_float, FeatureSet, Source};
use crate::model::{Encoder, EncoderSpec};
use crate::{ClassId, Error, InstanceId, Result};

/// Share of training identities the old model sees in the in-domain settings.
pub const OLD_CLASS_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub rotation_seed: u64,
    pub translation_scale: f64,
    pub spread_multiplier: f64,
}

fn default_test_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub input_dim: usize,
    /// Within-class standard deviation.
    pub cluster_spread: f64,
    /// Standard deviation of class centers.
    pub center_scale: f64,
    pub domain: String,
    #[serde(default)]
    pub shift: Option<DomainShift>,
    pub seed: u64,
    /// Fraction of classes held out as test identities.
    #[serde(default = "default_test_fraction")]
    pub test_class_fraction: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.instances_per_class < 4 {
            return bad(format!(
                "instances_per_class {} < 4",
                self.instances_per_class
            ));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be ≥ 1".into());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread < self.center_scale) {
            return bad(format!(
                "need 0 < cluster_spread ({}) < center_scale ({})",
                self.cluster_spread, self.center_scale
            ));
        }
        if !(self.test_class_fraction > 0.0 && self.test_class_fraction < 1.0) {
            return bad(format!(
                "test_class_fraction {} outside (0, 1)",
                self.test_class_fraction
            ));
        }
        if let Some(s) = &self.shift {
            if s.spread_multiplier.is_nan()
                || s.spread_multiplier <= 0.0
                || !s.translation_scale.is_finite()
                || s.translation_scale < 0.0
            {
                return bad("shift needs spread_multiplier > 0 and translation_scale ≥ 0".into());
            }
        }
        Ok(())
    }

    pub fn num_test_classes(&self) -> usize {
        let n = (self.num_classes as f64 * self.test_class_fraction).round() as usize;
        n.clamp(1, self.num_classes - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<ClassId>,
    instance_ids: Vec<InstanceId>,
    domain: String,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn instance_ids(&self) -> &[InstanceId] {
        &self.instance_ids
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            inputs: self.inputs.select(Axis(0), &rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            instance_ids: rows.iter().map(|&r| self.instance_ids[r]).collect(),
            domain: self.domain.clone(),
            splits: rows.iter().map(|&r| self.splits[r]).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Self {
        self.filter(|i| self.splits[i] == split)
    }

    pub fn train(&self) -> Self {
        self.split(Split::Train)
    }

    /// Query and gallery instances together.
    pub fn test(&self) -> Self {
        self.filter(|i| self.splits[i] != Split::Train)
    }

    pub fn query(&self) -> Self {
        self.split(Split::Query)
    }

    pub fn gallery(&self) -> Self {
        self.split(Split::Gallery)
    }

    pub fn with_classes(&self, classes: &BTreeSet<ClassId>) -> Self {
        self.filter(|i| classes.contains(&self.labels[i]))
    }

    /// Runs the encoder over every instance.
    pub fn encode(&self, encoder: &Encoder, name: &str) -> Result<FeatureSet> {
        FeatureSet::new(
            encoder.encode(&self.inputs)?,
            self.labels.clone(),
            self.instance_ids.clone(),
            Source::new(name, self.domain.clone()),
        )
    }

    pub fn row_index(&self) -> HashMap<InstanceId, usize> {
        self.instance_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// `instance_id,label,split,f0,...` CSV plus the `source=` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        write!(out, "instance_id,label,split")?;
        for k in 0..self.inputs.ncols() {
            write!(out, ",f{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(
                out,
                "{},{},{}",
                self.instance_ids[i],
                self.labels[i],
                self.splits[i].as_str()
            )?;
            for &v in self.inputs.row(i) {
                write!(out, ",{}", format_float(v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        fs::write(
            crate::featurespace::sidecar_path(path),
            format!("source=input:{}\n", self.domain),
        )?;
        Ok(())
    }
}

/// Haar-ish random orthogonal matrix from Gram–Schmidt on Gaussian columns.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut q = Array2::<f64>::from_shape_simple_fn((dim, dim), || rng.sample(StandardNormal));
        let mut ok = true;
        for j in 0..dim {
            // two passes keep the basis orthogonal to rounding level
            for _ in 0..2 {
                for k in 0..j {
                    let proj = q.column(j).dot(&q.column(k));
                    let prev = q.column(k).to_owned();
                    q.column_mut(j).scaled_add(-proj, &prev);
                }
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

/// Rotation and translation of a domain shift, drawn from its own seed.
pub fn shift_transform(shift: &DomainShift, dim: usize) -> (Array2<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(shift.rotation_seed);
    let rotation = random_rotation(dim, &mut rng);
    let translation = Array1::from_shape_simple_fn(dim, || {
        shift.translation_scale * rng.sample::<f64, _>(StandardNormal)
    });
    (rotation, translation)
}

/// `x ↦ R x + t` applied to every row.
pub fn apply_transform(
    points: &Array2<f64>,
    rotation: &Array2<f64>,
    translation: &Array1<f64>,
) -> Array2<f64> {
    points.dot(&rotation.t()) + translation
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let centers = Array2::<f64>::from_shape_simple_fn((spec.num_classes, d), || {
        spec.center_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let spread = spec.cluster_spread * spec.shift.as_ref().map_or(1.0, |s| s.spread_multiplier);
    let ipc = spec.instances_per_class;
    let n = spec.num_classes * ipc;
    let mut inputs = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let first_test = spec.num_classes - spec.num_test_classes();
    for c in 0..spec.num_classes {
        for k in 0..ipc {
            let row = c * ipc + k;
            for f in 0..d {
                inputs[[row, f]] = centers[[c, f]] + spread * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c as ClassId);
            ids.push(row as InstanceId);
            splits.push(if c < first_test {
                Split::Train
            } else if k < ipc / 2 {
                Split::Query
            } else {
                Split::Gallery
            });
        }
    }
    if let Some(shift) = &spec.shift {
        let (r, t) = shift_transform(shift, d);
        inputs = apply_transform(&inputs, &r, &t);
    }
    Ok(Dataset {
        inputs,
        labels,
        instance_ids: ids,
        domain: spec.domain.clone(),
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    IdS1,
    IdS2,
    CdS1,
    CdS2,
}

impl Setting {
    pub fn cross_domain(self) -> bool {
        matches!(self, Setting::CdS1 | Setting::CdS2)
    }

    pub fn structure_change(self) -> bool {
        matches!(self, Setting::IdS2 | Setting::CdS2)
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID-S-1" => Ok(Setting::IdS1),
            "ID-S-2" => Ok(Setting::IdS2),
            "CD-S-1" => Ok(Setting::CdS1),
            "CD-S-2" => Ok(Setting::CdS2),
            other => Err(Error::UnsupportedSetting(other.to_string())),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::IdS1 => "ID-S-1",
            Setting::IdS2 => "ID-S-2",
            Setting::CdS1 => "CD-S-1",
            Setting::CdS2 => "CD-S-2",
        })
    }
}

/// Data and encoder wiring of one upgrade scenario.
#[derive(Debug, Clone)]
pub struct SettingPlan {
    pub setting: Setting,
    pub old_train: Dataset,
    pub new_train: Dataset,
    pub test: Dataset,
    pub old_spec: EncoderSpec,
    pub new_spec: EncoderSpec,
}

fn total_hidden(spec: &EncoderSpec) -> usize {
    spec.hidden_dims.iter().sum()
}

/// Default wide encoder for the structure-change settings.
pub fn widened(old: &EncoderSpec) -> EncoderSpec {
    let width = old.hidden_dims.iter().copied().max().unwrap_or(0);
    let wide = if width >= 128 { width * 4 } else { 128 };
    EncoderSpec {
        hidden_dims: vec![wide, wide],
        seed: old.seed.wrapping_add(1),
        ..old.clone()
    }
}

/// Builds the old/new training sets, test set and encoder specs.
///
/// In-domain settings use `domain_a` only, giving the old model a seeded
/// `ceil(10%)` of the training identities (at least two). Cross-domain settings train the
/// old model on `domain_a` and everything else on `domain_b`. Without an
/// explicit `new_spec`, the `*-1` settings reuse the old shape and the
/// `*-2` settings use [`widened`].
pub fn plan_setting(
    name: &str,
    domain_a: &SyntheticSpec,
    domain_b: Option<&SyntheticSpec>,
    old_spec: &EncoderSpec,
    new_spec: Option<&EncoderSpec>,
) -> Result<SettingPlan> {
    let setting: Setting = name.parse()?;
    old_spec.validate()?;
    let new_spec = match new_spec {
        Some(s) => {
            s.validate()?;
            if setting.structure_change() && total_hidden(s) <= total_hidden(old_spec) {
                return Err(Error::InvalidSpec(format!(
                    "{setting} needs a wider new encoder"
                )));
            }
            if !setting.structure_change() && !s.same_shape(old_spec) {
                return Err(Error::InvalidSpec(format!(
                    "{setting} keeps the encoder shape"
                )));
            }
            s.clone()
        }
        None if setting.structure_change() => widened(old_spec),
        None => EncoderSpec {
            seed: old_spec.seed.wrapping_add(1),
            ..old_spec.clone()
        },
    };
    if new_spec.embed_dim != old_spec.embed_dim {
        return Err(Error::EmbedDimMismatch(
            new_spec.embed_dim,
            old_spec.embed_dim,
        ));
    }

    let a = generate_dataset(domain_a)?;
    let (old_train, new_train, test) = if setting.cross_domain() {
        let spec_b = domain_b
            .ok_or_else(|| Error::InvalidSpec(format!("{setting} needs a second domain")))?;
        if spec_b.domain == domain_a.domain {
            return Err(Error::InvalidSpec(
                "cross-domain settings need distinct domain tags".into(),
            ));
        }
        let b = generate_dataset(spec_b)?;
        (a.train(), b.train(), b.test())
    } else {
        let train = a.train();
        let mut classes = train.classes();
        if classes.len() < 2 {
            return Err(Error::TooFewClasses {
                needed: 2,
                available: classes.len(),
            });
        }
        // the old classifier needs at least two identities
        let keep =
            ((classes.len() as f64 * OLD_CLASS_FRACTION).ceil() as usize).clamp(2, classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(domain_a.seed ^ 0x0dd5_eed5);
        classes.shuffle(&mut rng);
        let old_classes: BTreeSet<ClassId> = classes.into_iter().take(keep).collect();
        (train.with_classes(&old_classes), train, a.test())
    };
    for part in [&old_train, &new_train, &test] {
        if part.inputs().ncols() != old_spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "data dim {} vs encoder input {}",
                part.inputs().ncols(),
                old_spec.input_dim
            )));
        }
    }
    Ok(SettingPlan {
        setting,
        old_train,
        new_train,
        test,
        old_spec: old_spec.clone(),
        new_spec,
    })
}

/// Endless stream of PK batches over a training set.
///
/// Every sampler epoch visits the classes in a fresh random order, `P` at a
/// time; a short final group is topped up with other random classes, so an
/// epoch of [`PkSampler::epoch_len`] batches covers every class. Within a
/// class, `K` instances are drawn without replacement, or with replacement
/// when the class has fewer than `K`.
#[derive(Debug, Clone)]
pub struct PkSampler {
    class_rows: Vec<(ClassId, Vec<InstanceId>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
}

pub fn pk_batches(train: &Dataset, p: usize, k: usize, seed: u64) -> Result<PkSampler> {
    let mut groups: std::collections::BTreeMap<ClassId, Vec<InstanceId>> = Default::default();
    for (&l, &id) in train.labels().iter().zip(train.instance_ids()) {
        groups.entry(l).or_default().push(id);
    }
    if p == 0 || p > groups.len() {
        return Err(Error::TooFewClasses {
            needed: p,
            available: groups.len(),
        });
    }
    if k < 2 {
        return Err(Error::InvalidSpec(format!("K_inst must be ≥ 2, got {k}")));
    }
    Ok(PkSampler {
        class_rows: groups.into_iter().collect(),
        p,
        k,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: Vec::new(),
    })
}

impl PkSampler {
    pub fn epoch_len(&self) -> usize {
        self.class_rows.len().div_ceil(self.p)
    }

    pub fn num_classes(&self) -> usize {
        self.class_rows.len()
    }
}

impl Iterator for PkSampler {
    type Item = Vec<InstanceId>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending.is_empty() {
            let mut order: Vec<usize> = (0..self.class_rows.len()).collect();
            order.shuffle(&mut self.rng);
            order.reverse();
            self.pending = order;
        }
        let take = self.p.min(self.pending.len());
        let mut chosen: Vec<usize> = self.pending.split_off(self.pending.len() - take);
        chosen.reverse();
        if chosen.len() < self.p {
            let mut rest: Vec<usize> = (0..self.class_rows.len())
                .filter(|c| !chosen.contains(c))
                .collect();
            rest.shuffle(&mut self.rng);
            chosen.extend(rest.into_iter().take(self.p - chosen.len()));
        }
        let mut batch = Vec::with_capacity(self.p * self.k);
        for c in chosen {
            let ids = &self.class_rows[c].1;
            if ids.len() >= self.k {
                batch.extend(ids.choose_multiple(&mut self.rng, self.k).copied());
            } else {
                for _ in 0..self.k {
                    batch.push(ids[self.rng.random_range(0..ids.len())]);
                }
            }
        }
        Some(batch)
    }
}
