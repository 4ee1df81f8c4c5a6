//! Retrieval metrics and the cross-model evaluation protocol.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::featurespace::{cosine_matrix, FeatureSet};
use crate::model::Encoder;
use crate::{Error, Result};

/// Average precision of a ranking given as relevance flags, best first.
pub fn exact_ap(ranking: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (k, &rel) in ranking.iter().enumerate() {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(precision_sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub rank1: f64,
    /// `cmc[k]` is the fraction of queries with a positive in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub query_encoder: String,
    pub gallery_encoder: String,
    pub num_queries: usize,
}

impl RetrievalReport {
    /// CMC at rank `k` (1-based), saturating at the gallery size.
    pub fn cmc_at(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }

    pub const CSV_HEADER: &'static str = "setting,query_enc,gallery_enc,map,rank1,cmc1,cmc5,cmc10";

    pub fn csv_row(&self, setting: &str) -> String {
        let mut s = String::new();
        write!(
            s,
            "{setting},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.query_encoder,
            self.gallery_encoder,
            self.map,
            self.rank1,
            self.cmc_at(1),
            self.cmc_at(5),
            self.cmc_at(10)
        )
        .expect("write to string");
        s
    }
}

/// Ranks every gallery entry per query by cosine similarity (descending,
/// ties by ascending gallery instance id) and scores the rankings.
pub fn evaluate_retrieval(query: &FeatureSet, gallery: &FeatureSet) -> Result<RetrievalReport> {
    let gallery_ids: HashSet<_> = gallery.instance_ids().iter().collect();
    if let Some(id) = query
        .instance_ids()
        .iter()
        .find(|id| gallery_ids.contains(id))
    {
        return Err(Error::InvalidFeatureSet(format!(
            "instance {id} appears in both query and gallery"
        )));
    }
    let sims = cosine_matrix(query.features(), gallery.features())?;
    let g = gallery.len();
    let mut first_hit_counts = vec![0usize; g];
    let mut ap_sum = 0.0;
    let mut order: Vec<usize> = (0..g).collect();
    for i in 0..query.len() {
        let label = query.labels()[i];
        let row = sims.row(i);
        order.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then(gallery.instance_ids()[a].cmp(&gallery.instance_ids()[b]))
        });
        let flags: Vec<bool> = order
            .iter()
            .map(|&j| gallery.labels()[j] == label)
            .collect();
        let ap = exact_ap(&flags).map_err(|_| Error::MissingPositive(label))?;
        ap_sum += ap;
        let first = flags.iter().position(|&f| f).expect("has a positive");
        first_hit_counts[first] += 1;
    }
    let q = query.len() as f64;
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for c in first_hit_counts {
        acc += c;
        cmc.push(acc as f64 / q);
    }
    Ok(RetrievalReport {
        map: ap_sum / q,
        rank1: cmc[0],
        cmc,
        query_encoder: query.source().encoder.clone(),
        gallery_encoder: gallery.source().encoder.clone(),
        num_queries: query.len(),
    })
}

/// Query and gallery features of a test split.
pub fn test_features(
    encoder: &Encoder,
    name: &str,
    test: &Dataset,
) -> Result<(FeatureSet, FeatureSet)> {
    let query = test.query();
    let gallery = test.gallery();
    Ok((query.encode(encoder, name)?, gallery.encode(encoder, name)?))
}

/// Direct = M(old, old), cross = M(new, old), self-test = M(new, new).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModelMatrix {
    pub direct: RetrievalReport,
    pub cross: RetrievalReport,
    pub new_self: RetrievalReport,
}

pub fn cross_model_matrix(
    old: &Encoder,
    new: &Encoder,
    test: &Dataset,
) -> Result<CrossModelMatrix> {
    if old.embed_dim() != new.embed_dim() {
        return Err(Error::EmbedDimMismatch(new.embed_dim(), old.embed_dim()));
    }
    let (old_q, old_g) = test_features(old, "old", test)?;
    let (new_q, new_g) = test_features(new, "new", test)?;
    Ok(CrossModelMatrix {
        direct: evaluate_retrieval(&old_q, &old_g)?,
        cross: evaluate_retrieval(&new_q, &old_g)?,
        new_self: evaluate_retrieval(&new_q, &new_g)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurespace::Source;
    use ndarray::{array, Array2};

    fn set(rows: Array2<f64>, labels: &[u32], id0: u64, enc: &str) -> FeatureSet {
        let ids = (id0..id0 + labels.len() as u64).collect();
        FeatureSet::new(rows, labels.to_vec(), ids, Source::new(enc, "d")).unwrap()
    }

    #[test]
    fn exact_ap_examples() {
        assert_eq!(exact_ap(&[true, true, false]).unwrap(), 1.0);
        assert!((exact_ap(&[true, false, true, false]).unwrap() - 0.8333333).abs() < 1e-7);
        assert!(matches!(exact_ap(&[false, false]), Err(Error::NoRelevant)));
    }

    #[test]
    fn perfect_separation() {
        let q = set(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0, 1], 0, "a");
        let g = set(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            &[0, 1, 2],
            10,
            "b",
        );
        let r = evaluate_retrieval(&q, &g).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1, 1.0);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
        assert_eq!(
            (r.query_encoder.as_str(), r.gallery_encoder.as_str()),
            ("a", "b")
        );
    }

    #[test]
    fn positives_at_one_and_three() {
        let q = set(array![[1.0, 0.0]], &[0], 0, "q");
        let g = set(
            array![[1.0, 0.0], [1.0, 0.3], [1.0, 0.6], [1.0, 0.9]],
            &[0, 1, 0, 2],
            10,
            "g",
        );
        let r = evaluate_retrieval(&q, &g).unwrap();
        assert!((r.map - 0.8333333).abs() < 1e-7);
        assert_eq!(r.cmc_at(5), 1.0);
    }

    #[test]
    fn ties_use_gallery_id() {
        let q = set(array![[1.0, 0.0]], &[0], 0, "q");
        // identical vectors: the lower instance id ranks first
        let g = FeatureSet::new(
            array![[1.0, 0.0], [1.0, 0.0]],
            vec![0, 1],
            vec![20, 10],
            Source::default(),
        )
        .unwrap();
        assert_eq!(evaluate_retrieval(&q, &g).unwrap().map, 0.5);
    }

    #[test]
    fn missing_positive_and_overlap() {
        let q = set(array![[1.0, 0.0]], &[4], 0, "q");
        let g = set(array![[1.0, 0.0]], &[0], 10, "g");
        assert!(matches!(
            evaluate_retrieval(&q, &g),
            Err(Error::MissingPositive(4))
        ));
        let g = set(array![[1.0, 0.0]], &[4], 0, "g");
        assert!(evaluate_retrieval(&q, &g).is_err());
    }

    #[test]
    fn csv_row_format() {
        let q = set(array![[1.0, 0.0]], &[0], 0, "new-rbcl");
        let g = set(array![[1.0, 0.0], [0.0, 1.0]], &[0, 1], 10, "old");
        let r = evaluate_retrieval(&q, &g).unwrap();
        assert_eq!(
            r.csv_row("ID-S-1"),
            "ID-S-1,new-rbcl,old,1.000000,1.000000,1.000000,1.000000,1.000000"
        );
    }
}
