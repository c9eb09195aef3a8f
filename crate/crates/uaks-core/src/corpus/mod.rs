//! Data model and ingestion: documents, features, alignments, queries,
//! frame labels, and a deterministic synthetic corpus.

mod io;
mod synth;

pub use io::{
    load_alignments, load_feature_matrix, load_occurrences, load_queries, write_alignments,
    write_feature_matrix, write_occurrences, write_queries,
};
pub use synth::{synth_corpus, LexWord, SynthConfig, SynthCorpus};

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Feature source tag carried by [`FeatureMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mfcc,
    External,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::External => "external",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mfcc" => Some(FeatureKind::Mfcc),
            "external" => Some(FeatureKind::External),
            _ => None,
        }
    }
}

/// Per-document acoustic frames with their frame period in seconds.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub doc_id: String,
    /// N x D, row per frame. Stored as f32 to match the on-disk container.
    pub frames: Array2<f32>,
    pub frame_period: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        doc_id: impl Into<String>,
        frames: Array2<f32>,
        frame_period: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::invalid(format!(
                "feature matrix for {doc_id} must be at least 1x1, got {}x{}",
                frames.nrows(),
                frames.ncols()
            )));
        }
        if !(frame_period > 0.0) {
            return Err(Error::invalid(format!(
                "frame period must be positive, got {frame_period}"
            )));
        }
        if let Some((n, d)) = first_non_finite(&frames) {
            return Err(Error::invalid(format!(
                "non-finite value in features for {doc_id} at frame {n}, dim {d}"
            )));
        }
        Ok(FeatureMatrix {
            doc_id,
            frames,
            frame_period,
            kind,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Total duration in seconds.
    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 * self.frame_period
    }
}

fn first_non_finite(m: &Array2<f32>) -> Option<(usize, usize)> {
    for (idx, v) in m.indexed_iter() {
        if !v.is_finite() {
            return Some(idx);
        }
    }
    None
}

/// One aligned word: token with begin/end times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentEntry {
    pub token: String,
    pub t_begin: f64,
    pub t_end: f64,
}

/// Time-sorted word alignment of one document.
#[derive(Debug, Clone)]
pub struct WordAlignment {
    pub doc_id: String,
    pub entries: Vec<AlignmentEntry>,
}

/// Token <-> index bijection with a reserved padding index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<pad>";

impl Alphabet {
    /// Builds an alphabet from the given tokens. Index 0 is the padding
    /// token; duplicates are rejected.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Alphabet {
            tokens: vec![PAD_TOKEN.to_string()],
            index: HashMap::from([(PAD_TOKEN.to_string(), 0)]),
        };
        for t in tokens {
            let t = t.into();
            if out.index.contains_key(&t) {
                return Err(Error::invalid(format!("duplicate alphabet token {t:?}")));
            }
            out.index.insert(t.clone(), out.tokens.len());
            out.tokens.push(t);
        }
        Ok(out)
    }

    /// Alphabet over the distinct tokens of the given queries, sorted.
    pub fn from_queries(queries: &[QueryText]) -> Result<Self> {
        let set: std::collections::BTreeSet<&str> = queries
            .iter()
            .flat_map(|q| q.tokens.iter().map(|t| t.as_str()))
            .collect();
        Alphabet::new(set.into_iter().map(str::to_string))
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Number of entries including the padding token.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    /// All tokens including the padding token, in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A written query: the source word n-gram plus its token sequence
/// (graphemes at finetune time, unit IDs at pretrain time).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryText {
    pub query_id: String,
    /// The word n-gram this query was built from; empty for pseudo-queries.
    pub words: Vec<String>,
    pub tokens: Vec<String>,
}

impl QueryText {
    pub fn new(
        query_id: impl Into<String>,
        words: Vec<String>,
        tokens: Vec<String>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("query must have at least one token"));
        }
        if tokens.iter().any(|t| t == PAD_TOKEN) {
            return Err(Error::invalid("padding token not allowed in a query"));
        }
        Ok(QueryText {
            query_id: query_id.into(),
            words,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Word-boundary grapheme used when spelling out multi-word queries.
pub const WORD_BOUNDARY: &str = "_";

/// Spells a word n-gram as grapheme tokens with a boundary token between
/// words: ["the", "cat"] -> t h e _ c a t.
pub fn grapheme_tokens(words: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push(WORD_BOUNDARY.to_string());
        }
        out.extend(w.chars().map(|c| c.to_string()));
    }
    out
}

/// One reference occurrence of a query inside a document.
#[derive(Debug, Clone, PartialEq)]
pub struct Occurrence {
    pub query_id: String,
    pub doc_id: String,
    pub t_begin: f64,
    pub t_end: f64,
}

impl Occurrence {
    pub fn new(query_id: impl Into<String>, doc_id: impl Into<String>, t_begin: f64, t_end: f64) -> Result<Self> {
        if !(t_begin < t_end) {
            return Err(Error::invalid(format!(
                "occurrence must satisfy t_begin < t_end, got [{t_begin}, {t_end})"
            )));
        }
        Ok(Occurrence {
            query_id: query_id.into(),
            doc_id: doc_id.into(),
            t_begin,
            t_end,
        })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_begin + self.t_end)
    }
}

/// Binary frame labels at the encoder frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub doc_id: String,
    pub values: Vec<u8>,
    pub encoder_frame_period: f64,
}

impl LabelVector {
    pub fn num_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Builds the per-frame binary labels of `query` in `doc` at the encoder
/// frame rate (period = downsample x input frame period). Encoder frame n
/// covers [n*p', (n+1)*p') and is labeled 1 iff its center lies inside one
/// of the occurrence spans.
pub fn build_frame_labels(
    query: &QueryText,
    occurrences: &[Occurrence],
    doc: &FeatureMatrix,
    downsample: usize,
) -> Result<LabelVector> {
    build_frame_labels_for(
        query,
        occurrences,
        &doc.doc_id,
        doc.num_frames(),
        doc.frame_period,
        downsample,
    )
}

/// Same labeling rule given document metadata instead of the features
/// themselves; batch assembly uses this to avoid holding feature matrices.
pub fn build_frame_labels_for(
    query: &QueryText,
    occurrences: &[Occurrence],
    doc_id: &str,
    num_frames: usize,
    frame_period: f64,
    downsample: usize,
) -> Result<LabelVector> {
    if downsample == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    let duration = num_frames as f64 * frame_period;
    for occ in occurrences {
        debug_assert_eq!(occ.query_id, query.query_id);
        if occ.doc_id != doc_id {
            return Err(Error::invalid(format!(
                "occurrence of {} refers to document {}, labels requested for {doc_id}",
                occ.query_id, occ.doc_id
            )));
        }
        // Forced-alignment end times can land exactly on the last frame edge.
        if occ.t_end > duration + 1e-9 {
            return Err(Error::invalid(format!(
                "occurrence [{}, {}) of {} extends beyond document {doc_id} of duration {duration}",
                occ.t_begin, occ.t_end, occ.query_id
            )));
        }
    }
    let n_enc = num_frames.div_ceil(downsample);
    let p_enc = frame_period * downsample as f64;
    let mut values = vec![0u8; n_enc];
    for (n, v) in values.iter_mut().enumerate() {
        // Center of the frames the encoder step actually covers; for a
        // full step this is n*p' + p'/2, for a trailing partial step the
        // center stays inside the document.
        let first = n * downsample;
        let last = ((n + 1) * downsample).min(num_frames);
        let center = 0.5 * (first + last) as f64 * frame_period;
        if occurrences
            .iter()
            .any(|o| o.t_begin <= center && center < o.t_end)
        {
            *v = 1;
        }
    }
    Ok(LabelVector {
        doc_id: doc_id.to_string(),
        values,
        encoder_frame_period: p_enc,
    })
}

/// A query list with its reference occurrence index.
#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    pub queries: Vec<QueryText>,
    pub occurrences: Vec<Occurrence>,
}

impl QuerySet {
    /// Occurrences grouped by query id, in stable order.
    pub fn occurrences_by_query(&self) -> BTreeMap<&str, Vec<&Occurrence>> {
        let mut map: BTreeMap<&str, Vec<&Occurrence>> = BTreeMap::new();
        for q in &self.queries {
            map.entry(q.query_id.as_str()).or_default();
        }
        for o in &self.occurrences {
            map.entry(o.query_id.as_str()).or_default().push(o);
        }
        map
    }
}

fn collect_ngrams(
    alignments: &[WordAlignment],
    orders: &[usize],
) -> Result<(Vec<usize>, BTreeMap<Vec<String>, Vec<Occurrence>>)> {
    if alignments.is_empty() {
        return Err(Error::invalid("cannot build queries from empty alignments"));
    }
    if orders.is_empty() || orders.iter().any(|&o| o == 0) {
        return Err(Error::invalid("orders must be non-empty positive integers"));
    }
    let mut orders = orders.to_vec();
    orders.sort_unstable();
    orders.dedup();

    // Enumerate every n-gram of consecutive alignment entries per order.
    // BTreeMap keeps n-gram iteration order deterministic.
    let mut ngrams: BTreeMap<Vec<String>, Vec<Occurrence>> = BTreeMap::new();
    for ali in alignments {
        for &order in &orders {
            if ali.entries.len() < order {
                continue;
            }
            for window in ali.entries.windows(order) {
                let words: Vec<String> = window.iter().map(|e| e.token.clone()).collect();
                let occ = Occurrence {
                    query_id: String::new(),
                    doc_id: ali.doc_id.clone(),
                    t_begin: window[0].t_begin,
                    t_end: window[order - 1].t_end,
                };
                ngrams.entry(words).or_default().push(occ);
            }
        }
    }
    Ok((orders, ngrams))
}

fn emit_queries(
    selected: Vec<&Vec<String>>,
    ngrams: &BTreeMap<Vec<String>, Vec<Occurrence>>,
    queries: &mut Vec<QueryText>,
    occurrences: &mut Vec<Occurrence>,
) {
    for words in selected {
        let query_id = format!("q{:04}", queries.len() + 1);
        let tokens = grapheme_tokens(words);
        for occ in &ngrams[words] {
            occurrences.push(Occurrence {
                query_id: query_id.clone(),
                ..occ.clone()
            });
        }
        queries.push(QueryText {
            query_id,
            words: words.clone(),
            tokens,
        });
    }
}

/// Every distinct word n-gram of the requested orders with all of its
/// occurrences, deterministically ordered.
pub fn enumerate_ngrams(alignments: &[WordAlignment], orders: &[usize]) -> Result<QuerySet> {
    let (orders, ngrams) = collect_ngrams(alignments, orders)?;
    let mut queries = Vec::new();
    let mut occurrences = Vec::new();
    for &order in &orders {
        let selected: Vec<&Vec<String>> = ngrams.keys().filter(|w| w.len() == order).collect();
        emit_queries(selected, &ngrams, &mut queries, &mut occurrences);
    }
    Ok(QuerySet {
        queries,
        occurrences,
    })
}

/// Samples `count` queries from the word n-grams of `alignments`, split in
/// equal proportions across the requested orders, and returns them with
/// every occurrence found in the alignments. Deterministic under `seed`.
pub fn build_query_set(
    alignments: &[WordAlignment],
    orders: &[usize],
    count: usize,
    seed: u64,
) -> Result<QuerySet> {
    if count == 0 {
        return Err(Error::invalid("query count must be >= 1"));
    }
    let (orders, ngrams) = collect_ngrams(alignments, orders)?;

    // Equal proportions per order, remainder going to the lower orders.
    let base = count / orders.len();
    let rem = count % orders.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(count);
    let mut occurrences = Vec::new();
    for (i, &order) in orders.iter().enumerate() {
        let want = base + usize::from(i < rem);
        let mut candidates: Vec<&Vec<String>> =
            ngrams.keys().filter(|w| w.len() == order).collect();
        if candidates.len() < want {
            return Err(Error::invalid(format!(
                "requested {want} queries of order {order}, only {} distinct n-grams available",
                candidates.len()
            )));
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(want);
        // Keep output order stable regardless of the shuffle.
        candidates.sort();
        emit_queries(candidates, &ngrams, &mut queries, &mut occurrences);
    }
    Ok(QuerySet {
        queries,
        occurrences,
    })
}

/// Percentage of queries containing at least one word absent from the
/// training lexicon.
pub fn oov_rate(queries: &[QueryText], lexicon: &HashSet<String>) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("oov rate of an empty query list is undefined"));
    }
    let oov = queries
        .iter()
        .filter(|q| q.words.iter().any(|w| !lexicon.contains(w)))
        .count();
    Ok(100.0 * oov as f64 / queries.len() as f64)
}

/// The set of word types occurring in the given alignments.
pub fn lexicon_of(alignments: &[WordAlignment]) -> HashSet<String> {
    alignments
        .iter()
        .flat_map(|a| a.entries.iter().map(|e| e.token.clone()))
        .collect()
}
