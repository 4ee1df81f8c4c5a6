//! Geometry over labeled embedding sets.
//!
//! Cosine similarity matrices, class centroids, the class-neighbor adjacency
//! built from centroid distances, and neighbor-context-agent gallery sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use crate::{ClassId, Error, InstanceId, Result};

/// Rows with a norm at or below this are rejected by cosine similarity.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Which encoder produced a feature set and on which domain.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Source {
    pub encoder: String,
    pub domain: String,
}

impl Source {
    pub fn new(encoder: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            encoder: encoder.into(),
            domain: domain.into(),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.encoder, self.domain)
    }
}

/// A labeled N×D matrix of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Array2<f64>,
    labels: Vec<ClassId>,
    instance_ids: Vec<InstanceId>,
    source: Source,
}

impl FeatureSet {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<ClassId>,
        instance_ids: Vec<InstanceId>,
        source: Source,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidFeatureSet(format!("empty matrix {n}x{d}")));
        }
        if labels.len() != n || instance_ids.len() != n {
            return Err(Error::InvalidFeatureSet(format!(
                "{n} rows but {} labels and {} instance ids",
                labels.len(),
                instance_ids.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureSet(format!(
                "non-finite value in row {}",
                pos / d
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &instance_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidFeatureSet(format!(
                    "duplicate instance id {id}"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            instance_ids,
            source,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn instance_ids(&self) -> &[InstanceId] {
        &self.instance_ids
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Same labels, ids and source with a replacement feature matrix.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(
            features,
            self.labels.clone(),
            self.instance_ids.clone(),
            self.source.clone(),
        )
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select(Axis(0), rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.instance_ids[r]).collect(),
            self.source.clone(),
        )
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Row indices grouped by label, labels ascending, rows in original order.
    pub fn rows_by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut map: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Writes `instance_id,label,f0,...` CSV plus a `<path>.source` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        write!(out, "instance_id,label")?;
        for k in 0..self.dim() {
            write!(out, ",f{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{},{}", self.instance_ids[i], self.labels[i])?;
            for &v in self.features.row(i) {
                write!(out, ",{}", format_float(v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        fs::write(sidecar_path(path), format!("source={}\n", self.source))?;
        Ok(())
    }

    /// Reads the format written by [`FeatureSet::write_csv`]. A missing
    /// sidecar yields an empty source.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty feature file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "instance_id" || cols[1] != "label" {
            return Err(Error::Parse(format!("bad header {header:?}")));
        }
        let d = cols.len() - 2;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 2,
                    d + 2,
                    fields.len()
                )));
            }
            ids.push(parse_field(fields[0], lineno)?);
            labels.push(parse_field(fields[1], lineno)?);
            for f in &fields[2..] {
                values.push(parse_field::<f64>(f, lineno)?);
            }
        }
        let n = labels.len();
        let features =
            Array2::from_shape_vec((n, d), values).map_err(|e| Error::Parse(e.to_string()))?;
        let source = match fs::read_to_string(sidecar_path(path)) {
            Ok(text) => parse_source_line(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Source::default(),
            Err(e) => return Err(e.into()),
        };
        Self::new(features, labels, ids, source)
    }
}

/// Nine significant digits, scientific notation.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {}: cannot parse {s:?}", lineno + 2)))
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".source");
    PathBuf::from(os)
}

fn parse_source_line(text: &str) -> Result<Source> {
    let line = text.lines().next().unwrap_or("");
    let rest = line
        .strip_prefix("source=")
        .ok_or_else(|| Error::Parse(format!("bad source line {line:?}")))?;
    let (encoder, domain) = rest.split_once(':').unwrap_or((rest, ""));
    Ok(Source::new(encoder, domain))
}

/// Q×G matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Rows scaled to unit length, with the original norms.
pub(crate) fn normalized_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm <= MIN_ROW_NORM {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pairwise cosine similarity between the rows of two raw matrices.
pub(crate) fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "feature dims {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (an, _) = normalized_rows(a)?;
    let (bn, _) = normalized_rows(b)?;
    // Explicit loops keep the summation order identical for (i, j) and (j, i).
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in an.axis_iter(Axis(0)).enumerate() {
        for (j, rb) in bn.axis_iter(Axis(0)).enumerate() {
            out[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

pub fn cosine_similarity_matrix(a: &FeatureSet, b: &FeatureSet) -> Result<SimilarityMatrix> {
    Ok(SimilarityMatrix {
        values: cosine_matrix(a.features(), b.features())?,
    })
}

/// Mean feature per class; class ids ascending, one centroid row each.
pub fn class_centroids(set: &FeatureSet) -> (Vec<ClassId>, Array2<f64>) {
    let groups = set.rows_by_class();
    let mut centroids = Array2::zeros((groups.len(), set.dim()));
    let mut ids = Vec::with_capacity(groups.len());
    for (c, (&label, rows)) in groups.iter().enumerate() {
        let mut acc = centroids.row_mut(c);
        for &r in rows {
            acc += &set.row(r);
        }
        acc.mapv_inplace(|v| v / rows.len() as f64);
        ids.push(label);
    }
    (ids, centroids)
}

/// For every class, the K classes with the closest centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    class_ids: Vec<ClassId>,
    centroids: Array2<f64>,
    neighbors: Vec<Vec<ClassId>>,
}

impl NeighborIndex {
    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    /// Neighbors of `class`, nearest first. `None` if the class is unknown.
    pub fn neighbors(&self, class: ClassId) -> Option<&[ClassId]> {
        self.class_ids
            .binary_search(&class)
            .ok()
            .map(|i| self.neighbors[i].as_slice())
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

/// Euclidean distances between raw centroids; ties go to the smaller class id.
/// `k` is clamped to `C - 1`.
pub fn build_neighbor_index(set: &FeatureSet, k: usize) -> NeighborIndex {
    let (class_ids, centroids) = class_centroids(set);
    let c = class_ids.len();
    let k = k.min(c.saturating_sub(1));
    let neighbors = (0..c)
        .map(|a| {
            let mut others: Vec<(f64, ClassId)> = (0..c)
                .filter(|&b| b != a)
                .map(|b| {
                    let diff = &centroids.row(a) - &centroids.row(b);
                    (diff.dot(&diff).sqrt(), class_ids[b])
                })
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            others.into_iter().take(k).map(|(_, id)| id).collect()
        })
        .collect();
    NeighborIndex {
        class_ids,
        centroids,
        neighbors,
    }
}

/// Draws neighbor-context-agent galleries from a fixed old feature set.
///
/// Holds the per-class row lists so repeated sampling does not regroup the
/// old features every step.
#[derive(Debug, Clone)]
pub struct NcaSampler<'a> {
    index: &'a NeighborIndex,
    old: &'a FeatureSet,
    rows: BTreeMap<ClassId, Vec<usize>>,
}

impl<'a> NcaSampler<'a> {
    pub fn new(index: &'a NeighborIndex, old: &'a FeatureSet) -> Self {
        Self {
            index,
            old,
            rows: old.rows_by_class(),
        }
    }

    /// Row indices into the old set: for every distinct batch class `c`
    /// (ascending), one uniform draw from each class of `{c} ∪ N_c`, then
    /// deduplicated by instance while keeping first occurrence.
    pub fn sample_rows<R: Rng + ?Sized>(
        &self,
        batch_classes: &[ClassId],
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let batch: BTreeSet<ClassId> = batch_classes.iter().copied().collect();
        let mut picked = Vec::new();
        let mut seen = HashSet::new();
        for &c in &batch {
            let neighbors = self.index.neighbors(c).ok_or(Error::MissingClass(c))?;
            for &k in std::iter::once(&c).chain(neighbors) {
                let rows = self
                    .rows
                    .get(&k)
                    .filter(|r| !r.is_empty())
                    .ok_or(Error::MissingClass(k))?;
                let row = rows[rng.random_range(0..rows.len())];
                if seen.insert(self.old.instance_ids()[row]) {
                    picked.push(row);
                }
            }
        }
        Ok(picked)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_classes: &[ClassId],
        rng: &mut R,
    ) -> Result<FeatureSet> {
        let rows = self.sample_rows(batch_classes, rng)?;
        self.old.select(&rows)
    }
}

/// One-shot agent gallery for a batch; see [`NcaSampler::sample`].
pub fn sample_ncas<R: Rng + ?Sized>(
    batch_classes: &[ClassId],
    index: &NeighborIndex,
    old: &FeatureSet,
    rng: &mut R,
) -> Result<FeatureSet> {
    NcaSampler::new(index, old).sample(batch_classes, rng)
}
