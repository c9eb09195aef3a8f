//! Mini-batch assembly: per step, L queries sampled uniformly, each paired
//! with one positive document and M-1 uniformly random documents, with
//! labels built from the true occurrence index for all M (so accidental
//! positives among the "negatives" are labeled correctly).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_frame_labels_for, LabelVector, Occurrence, QueryText};
use crate::error::{Error, Result};

use super::LossConfig;

#[derive(Debug, Clone, Copy)]
pub(crate) struct DocMeta {
    pub n_frames: usize,
    pub frame_period: f64,
}

/// Everything batch sampling needs: queries, their occurrence index and
/// per-document metadata.
#[derive(Debug, Clone)]
pub struct SampleIndex {
    pub(crate) queries: Vec<QueryText>,
    /// (query index) -> doc ids containing at least one occurrence.
    positive_docs: Vec<Vec<String>>,
    /// (query id, doc id) -> occurrences.
    by_query_doc: BTreeMap<(String, String), Vec<Occurrence>>,
    doc_ids: Vec<String>,
    doc_meta: BTreeMap<String, DocMeta>,
}

impl SampleIndex {
    /// Validates that every query has at least one occurrence inside the
    /// document set.
    pub fn new(
        queries: Vec<QueryText>,
        occurrences: &[Occurrence],
        docs: impl IntoIterator<Item = (String, usize, f64)>,
    ) -> Result<Self> {
        let mut doc_meta = BTreeMap::new();
        for (doc_id, n_frames, frame_period) in docs {
            doc_meta.insert(
                doc_id,
                DocMeta {
                    n_frames,
                    frame_period,
                },
            );
        }
        if doc_meta.is_empty() {
            return Err(Error::invalid("sample index needs at least one document"));
        }
        let doc_ids: Vec<String> = doc_meta.keys().cloned().collect();
        let mut by_query_doc: BTreeMap<(String, String), Vec<Occurrence>> = BTreeMap::new();
        let mut positives: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for occ in occurrences {
            if !doc_meta.contains_key(&occ.doc_id) {
                continue; // reference outside this document set
            }
            by_query_doc
                .entry((occ.query_id.clone(), occ.doc_id.clone()))
                .or_default()
                .push(occ.clone());
            let list = positives.entry(occ.query_id.as_str()).or_default();
            if !list.contains(&occ.doc_id) {
                list.push(occ.doc_id.clone());
            }
        }
        let mut positive_docs = Vec::with_capacity(queries.len());
        for q in &queries {
            let list = positives.get(q.query_id.as_str()).cloned().unwrap_or_default();
            if list.is_empty() {
                return Err(Error::invalid(format!(
                    "query {} has no occurrence in the training documents",
                    q.query_id
                )));
            }
            positive_docs.push(list);
        }
        Ok(SampleIndex {
            queries,
            positive_docs,
            by_query_doc,
            doc_ids,
            doc_meta,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn query(&self, index: usize) -> &QueryText {
        &self.queries[index]
    }

    fn occurrences_of(&self, query_id: &str, doc_id: &str) -> &[Occurrence] {
        self.by_query_doc
            .get(&(query_id.to_string(), doc_id.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Labels of one (query, document) pair at the encoder frame rate.
    pub(crate) fn labels_for(
        &self,
        query_index: usize,
        doc_id: &str,
        downsample: usize,
    ) -> Result<LabelVector> {
        let q = &self.queries[query_index];
        let meta = self.doc_meta[doc_id];
        build_frame_labels_for(
            q,
            self.occurrences_of(&q.query_id, doc_id),
            doc_id,
            meta.n_frames,
            meta.frame_period,
            downsample,
        )
    }
}

/// One query with its M documents (first one positive) and their labels.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub query_index: usize,
    pub doc_ids: Vec<String>,
    pub labels: Vec<LabelVector>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn num_pairs(&self) -> usize {
        self.items.iter().map(|i| i.doc_ids.len()).sum()
    }
}

impl SampleIndex {
    /// One batch item for a fixed query: its positive document plus M-1
    /// uniformly random documents, labels from the true occurrence index.
    pub fn sample_item_for(
        &self,
        query_index: usize,
        cfg: &LossConfig,
        downsample: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchItem> {
        let positives = &self.positive_docs[query_index];
        let mut doc_ids = Vec::with_capacity(cfg.m);
        doc_ids.push(positives[rng.random_range(0..positives.len())].clone());
        for _ in 1..cfg.m {
            doc_ids.push(self.doc_ids[rng.random_range(0..self.doc_ids.len())].clone());
        }
        let labels = doc_ids
            .iter()
            .map(|d| self.labels_for(query_index, d, downsample))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchItem {
            query_index,
            doc_ids,
            labels,
        })
    }
}

/// Draws `n_queries` batch items. Deterministic for a given RNG state.
pub fn sample_batch(
    index: &SampleIndex,
    cfg: &LossConfig,
    n_queries: usize,
    downsample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    cfg.validate()?;
    if index.queries.is_empty() {
        return Err(Error::invalid("sample index has no queries"));
    }
    let mut items = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        let qi = rng.random_range(0..index.queries.len());
        items.push(index.sample_item_for(qi, cfg, downsample, rng)?);
    }
    Ok(Batch { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn docs(n: usize) -> Vec<(String, usize, f64)> {
        (0..n).map(|i| (format!("d{i}"), 100, 0.01)).collect()
    }

    fn query(id: &str) -> QueryText {
        QueryText::new(id, vec![], vec!["a".into()]).unwrap()
    }

    fn occ(q: &str, d: &str, t0: f64, t1: f64) -> Occurrence {
        Occurrence::new(q, d, t0, t1).unwrap()
    }

    fn index() -> SampleIndex {
        SampleIndex::new(
            vec![query("q1"), query("q2")],
            &[
                occ("q1", "d0", 0.1, 0.3),
                occ("q1", "d3", 0.5, 0.7),
                occ("q2", "d1", 0.2, 0.4),
            ],
            docs(10),
        )
        .unwrap()
    }

    #[test]
    fn batch_shape_first_doc_positive() {
        let idx = index();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&idx, &cfg, 8, 2, &mut rng).unwrap();
        assert_eq!(b.items.len(), 8);
        for item in &b.items {
            assert_eq!(item.doc_ids.len(), 4);
            assert_eq!(item.labels.len(), 4);
            // First document must contain the query.
            assert!(item.labels[0].num_positive() > 0);
            for l in &item.labels {
                assert_eq!(l.values.len(), 50);
            }
        }
    }

    #[test]
    fn fixed_rng_state_reproduces_the_batch() {
        let idx = index();
        let cfg = LossConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_batch(&idx, &cfg, 5, 2, &mut r1).unwrap();
        let b = sample_batch(&idx, &cfg, 5, 2, &mut r2).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.query_index, y.query_index);
            assert_eq!(x.doc_ids, y.doc_ids);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn accidental_positives_are_labeled() {
        // d3 contains q1; whenever d3 shows up among q1's "negatives" its
        // labels must carry ones over the occurrence span.
        let idx = index();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = false;
        for _ in 0..200 {
            let b = sample_batch(&idx, &cfg, 4, 1, &mut rng).unwrap();
            for item in b.items {
                if idx.query(item.query_index).query_id != "q1" {
                    continue;
                }
                for (slot, doc) in item.doc_ids.iter().enumerate() {
                    if slot > 0 && doc == "d3" {
                        seen = true;
                        // Occurrence [0.5, 0.7) at period 0.01: frames 50..69.
                        let on = item.labels[slot].num_positive();
                        assert_eq!(on, 20);
                    }
                }
            }
        }
        assert!(seen, "sampler never drew d3 as a negative for q1");
    }

    #[test]
    fn negative_sampling_is_uniform_within_3_sigma() {
        let idx = index();
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::BTreeMap::<String, usize>::new();
        let draws = 10_000usize;
        for _ in 0..draws {
            let b = sample_batch(&idx, &cfg, 1, 2, &mut rng).unwrap();
            for d in &b.items[0].doc_ids[1..] {
                *counts.entry(d.clone()).or_default() += 1;
            }
        }
        let slots = (draws * (cfg.m - 1)) as f64;
        let p = 1.0 / 10.0;
        let sigma = (slots * p * (1.0 - p)).sqrt();
        for i in 0..10 {
            let c = *counts.get(&format!("d{i}")).unwrap_or(&0) as f64;
            assert!(
                (c - slots * p).abs() <= 3.0 * sigma,
                "doc d{i}: {c} outside {} +- {}",
                slots * p,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn query_without_occurrence_is_rejected() {
        let err = SampleIndex::new(
            vec![query("q1"), query("qx")],
            &[occ("q1", "d0", 0.1, 0.3)],
            docs(4),
        )
        .unwrap_err();
        assert!(err.to_string().contains("qx"), "{err}");
    }
}
