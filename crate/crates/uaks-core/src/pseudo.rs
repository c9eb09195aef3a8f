//! Pseudo-words: n-grams of consecutive acoustic units with time
//! boundaries, and the pretraining query/occurrence index built from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aud::UnitTranscript;
use crate::corpus::{Alphabet, Occurrence, QueryText};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Retain at most this many occurrences per document (seed-stable
    /// subsample); `None` keeps everything, matching the plain method.
    pub cap_per_doc: Option<usize>,
    /// Drop pseudo-words with fewer total occurrences than this.
    pub min_count: usize,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            n_min: 5,
            n_max: 15,
            cap_per_doc: Some(200),
            min_count: 1,
            seed: 0,
        }
    }
}

/// One pseudo-word: a unit-ID sequence and everywhere it occurs.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoWord {
    pub pseudo_id: String,
    pub tokens: Vec<usize>,
    pub occurrences: Vec<Occurrence>,
}

/// A single extracted occurrence before index merging.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOccurrence {
    pub tokens: Vec<usize>,
    pub doc_id: String,
    pub t_begin: f64,
    pub t_end: f64,
}

/// Emits every window of n consecutive segments for each n in
/// [n_min, n_max], spanning first segment start to last segment end.
pub fn extract_pseudo_words(
    transcript: &UnitTranscript,
    n_min: usize,
    n_max: usize,
) -> Result<Vec<PseudoOccurrence>> {
    if n_min == 0 || n_max < n_min {
        return Err(Error::invalid("pseudo-word lengths must satisfy 1 <= n_min <= n_max"));
    }
    let segs = &transcript.segments;
    let mut out = Vec::new();
    for n in n_min..=n_max.min(segs.len()) {
        for window in segs.windows(n) {
            out.push(PseudoOccurrence {
                tokens: window.iter().map(|s| s.unit).collect(),
                doc_id: transcript.doc_id.clone(),
                t_begin: window[0].start as f64 * transcript.frame_period,
                t_end: window[n - 1].end as f64 * transcript.frame_period,
            });
        }
    }
    Ok(out)
}

/// The pretraining index: pseudo-words keyed by token sequence, plus the
/// unit-ID alphabet the pretraining query encoder embeds.
#[derive(Debug, Clone)]
pub struct PretrainIndex {
    pub pseudo_words: Vec<PseudoWord>,
    pub alphabet: Alphabet,
}

impl PretrainIndex {
    pub fn num_occurrences(&self) -> usize {
        self.pseudo_words.iter().map(|p| p.occurrences.len()).sum()
    }

    /// Pseudo-words as queries over the unit alphabet.
    pub fn queries(&self) -> Vec<QueryText> {
        self.pseudo_words
            .iter()
            .map(|p| QueryText {
                query_id: p.pseudo_id.clone(),
                words: Vec::new(),
                tokens: p.tokens.iter().map(|u| u.to_string()).collect(),
            })
            .collect()
    }

    pub fn occurrences(&self) -> Vec<Occurrence> {
        self.pseudo_words
            .iter()
            .flat_map(|p| p.occurrences.iter().cloned())
            .collect()
    }
}

/// Merges identical token sequences across documents, optionally
/// subsampling each document to `cap_per_doc` occurrences and dropping
/// pseudo-words seen fewer than `min_count` times. Deterministic under the
/// config seed.
pub fn build_pretrain_index(
    transcripts: &[UnitTranscript],
    config: &PseudoConfig,
) -> Result<PretrainIndex> {
    if transcripts.is_empty() {
        return Err(Error::invalid("cannot build a pretrain index from no transcripts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut max_unit = 0usize;
    let mut by_tokens: BTreeMap<Vec<usize>, Vec<Occurrence>> = BTreeMap::new();
    for t in transcripts {
        t.validate()?;
        for seg in &t.segments {
            max_unit = max_unit.max(seg.unit);
        }
        let mut occs = extract_pseudo_words(t, config.n_min, config.n_max)?;
        if let Some(cap) = config.cap_per_doc {
            if occs.len() > cap {
                // Canonical order before the seeded shuffle keeps the
                // subsample independent of extraction order.
                occs.sort_by(|a, b| {
                    (a.t_begin, a.t_end, &a.tokens)
                        .partial_cmp(&(b.t_begin, b.t_end, &b.tokens))
                        .expect("finite times")
                });
                occs.shuffle(&mut rng);
                occs.truncate(cap);
            }
        }
        for occ in occs {
            by_tokens.entry(occ.tokens).or_default().push(Occurrence {
                query_id: String::new(),
                doc_id: occ.doc_id,
                t_begin: occ.t_begin,
                t_end: occ.t_end,
            });
        }
    }

    let mut pseudo_words = Vec::new();
    for (tokens, mut occurrences) in by_tokens {
        if occurrences.len() < config.min_count {
            continue;
        }
        let pseudo_id = format!("p{:06}", pseudo_words.len() + 1);
        for o in &mut occurrences {
            o.query_id = pseudo_id.clone();
        }
        occurrences.sort_by(|a, b| {
            (&a.doc_id, a.t_begin)
                .partial_cmp(&(&b.doc_id, b.t_begin))
                .expect("finite times")
        });
        pseudo_words.push(PseudoWord {
            pseudo_id,
            tokens,
            occurrences,
        });
    }
    if pseudo_words.is_empty() {
        return Err(Error::invalid(
            "no pseudo-words survive the length and count filters",
        ));
    }
    let alphabet = Alphabet::new((0..=max_unit).map(|u| u.to_string()))?;
    Ok(PretrainIndex {
        pseudo_words,
        alphabet,
    })
}

/// Loads an index written by [`write_pretrain_index`].
pub fn load_pretrain_index(
    words_path: &std::path::Path,
    occurrences_path: &std::path::Path,
) -> Result<PretrainIndex> {
    use std::io::BufRead;
    let file = std::fs::File::open(words_path).map_err(|e| Error::io(words_path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut words: Vec<(String, Vec<usize>)> = Vec::new();
    let mut max_unit = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(words_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(words_path, lineno, "expected <pseudo-id>\\t<unit ids>"))?;
        let tokens = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::parse(words_path, lineno, format!("bad unit id `{t}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        if tokens.is_empty() {
            return Err(Error::parse(words_path, lineno, "pseudo-word has no units"));
        }
        max_unit = max_unit.max(*tokens.iter().max().expect("non-empty"));
        words.push((id.to_string(), tokens));
    }
    if words.is_empty() {
        return Err(Error::invalid("pretrain index file is empty"));
    }
    let occurrences = crate::corpus::load_occurrences(occurrences_path)?;
    let mut by_id: BTreeMap<&str, Vec<Occurrence>> = BTreeMap::new();
    for occ in &occurrences {
        by_id.entry(occ.query_id.as_str()).or_default().push(occ.clone());
    }
    let pseudo_words = words
        .into_iter()
        .map(|(pseudo_id, tokens)| {
            let occurrences = by_id.remove(pseudo_id.as_str()).unwrap_or_default();
            if occurrences.is_empty() {
                return Err(Error::invalid(format!(
                    "pseudo-word {pseudo_id} has no occurrences in the occurrence file"
                )));
            }
            Ok(PseudoWord {
                pseudo_id,
                tokens,
                occurrences,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let alphabet = Alphabet::new((0..=max_unit).map(|u| u.to_string()))?;
    Ok(PretrainIndex {
        pseudo_words,
        alphabet,
    })
}

/// Writes the index as `<pseudo-id>\t<unit ids space-separated>` plus a
/// reference-format occurrence TSV next to it.
pub fn write_pretrain_index(
    words_path: &Path,
    occurrences_path: &Path,
    index: &PretrainIndex,
) -> Result<()> {
    let file = File::create(words_path).map_err(|e| Error::io(words_path, e))?;
    let mut w = BufWriter::new(file);
    for p in &index.pseudo_words {
        let ids: Vec<String> = p.tokens.iter().map(|u| u.to_string()).collect();
        writeln!(w, "{}\t{}", p.pseudo_id, ids.join(" ")).map_err(|e| Error::io(words_path, e))?;
    }
    w.flush().map_err(|e| Error::io(words_path, e))?;
    crate::corpus::write_occurrences(occurrences_path, &index.occurrences())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aud::Segment;

    fn transcript(units: &[usize], frames_each: usize) -> UnitTranscript {
        let segments = units
            .iter()
            .enumerate()
            .map(|(i, &u)| Segment {
                unit: u,
                start: i * frames_each,
                end: (i + 1) * frames_each,
            })
            .collect();
        UnitTranscript {
            doc_id: "d1".into(),
            segments,
            frame_period: 0.01,
        }
    }

    #[test]
    fn six_segments_yield_three_occurrences() {
        let t = transcript(&[0, 1, 2, 3, 4, 5], 2);
        let occs = extract_pseudo_words(&t, 5, 15).unwrap();
        // two 5-grams + one 6-gram
        assert_eq!(occs.len(), 3);
        let lens: Vec<usize> = occs.iter().map(|o| o.tokens.len()).collect();
        assert_eq!(lens.iter().filter(|&&l| l == 5).count(), 2);
        assert_eq!(lens.iter().filter(|&&l| l == 6).count(), 1);
    }

    #[test]
    fn short_transcript_yields_nothing() {
        let t = transcript(&[0, 1, 2, 3], 2);
        assert!(extract_pseudo_words(&t, 5, 15).unwrap().is_empty());
    }

    #[test]
    fn combinatorial_count_for_fifteen_segments() {
        let units: Vec<usize> = (0..15).collect();
        let t = transcript(&units, 1);
        let occs = extract_pseudo_words(&t, 5, 15).unwrap();
        let expect: usize = (5..=15).map(|n| 15 - n + 1).sum();
        assert_eq!(expect, 66);
        assert_eq!(occs.len(), 66);
    }

    #[test]
    fn occurrence_count_identity_holds_generally() {
        for l in 1..20 {
            let units: Vec<usize> = (0..l).map(|i| i % 7).collect();
            let t = transcript(&units, 3);
            let occs = extract_pseudo_words(&t, 5, 15).unwrap();
            let expect: usize = (5..=15.min(l)).map(|n| l - n + 1).sum();
            assert_eq!(occs.len(), expect, "L = {l}");
        }
    }

    #[test]
    fn spans_echo_transcript_tokens() {
        let t = transcript(&[3, 1, 4, 1, 5, 9, 2, 6], 4);
        let units = t.frame_units();
        for occ in extract_pseudo_words(&t, 5, 15).unwrap() {
            assert!(occ.t_end > occ.t_begin);
            assert!(occ.t_end <= t.num_frames() as f64 * t.frame_period + 1e-9);
            // Units over the span, deduplicated per segment, equal tokens.
            let first = (occ.t_begin / t.frame_period).round() as usize;
            let last = (occ.t_end / t.frame_period).round() as usize;
            let mut seen = Vec::new();
            for &u in &units[first..last] {
                if seen.last() != Some(&u) {
                    seen.push(u);
                }
            }
            assert_eq!(seen, occ.tokens);
        }
    }

    #[test]
    fn identical_ngrams_merge_across_documents() {
        let mut t1 = transcript(&[0, 1, 2, 3, 4], 2);
        let mut t2 = transcript(&[0, 1, 2, 3, 4], 2);
        t1.doc_id = "a".into();
        t2.doc_id = "b".into();
        let idx = build_pretrain_index(
            &[t1, t2],
            &PseudoConfig {
                cap_per_doc: None,
                ..PseudoConfig::default()
            },
        )
        .unwrap();
        assert_eq!(idx.pseudo_words.len(), 1);
        assert_eq!(idx.pseudo_words[0].occurrences.len(), 2);
        // Unit alphabet covers ids 0..=4 plus padding.
        assert_eq!(idx.alphabet.len(), 6);
    }

    #[test]
    fn cap_is_exact_and_seed_stable() {
        let units: Vec<usize> = (0..40).map(|i| i % 9).collect();
        let t = transcript(&units, 2);
        let cfg = PseudoConfig {
            cap_per_doc: Some(10),
            min_count: 1,
            seed: 5,
            ..PseudoConfig::default()
        };
        let a = build_pretrain_index(std::slice::from_ref(&t), &cfg).unwrap();
        assert_eq!(a.num_occurrences(), 10);
        let b = build_pretrain_index(&[t], &cfg).unwrap();
        assert_eq!(a.pseudo_words, b.pseudo_words);
    }

    #[test]
    fn min_count_matches_hash_count_oracle() {
        // Aperiodic unit sequence so both repeated and singleton n-grams
        // exist.
        let units: Vec<usize> = (0..30)
            .map(|i| if i < 12 { i % 4 } else { (i * i + i / 3) % 5 })
            .collect();
        let t = transcript(&units, 1);
        let all = build_pretrain_index(
            std::slice::from_ref(&t),
            &PseudoConfig {
                cap_per_doc: None,
                min_count: 1,
                ..PseudoConfig::default()
            },
        )
        .unwrap();
        // Independent count: hash every extracted token sequence.
        let mut counts: std::collections::HashMap<Vec<usize>, usize> =
            std::collections::HashMap::new();
        for occ in extract_pseudo_words(&t, 5, 15).unwrap() {
            *counts.entry(occ.tokens).or_default() += 1;
        }
        let filtered = build_pretrain_index(
            &[t],
            &PseudoConfig {
                cap_per_doc: None,
                min_count: 2,
                ..PseudoConfig::default()
            },
        )
        .unwrap();
        let expect: usize = counts.values().filter(|&&c| c >= 2).count();
        assert_eq!(filtered.pseudo_words.len(), expect);
        assert!(filtered.pseudo_words.len() < all.pseudo_words.len());
        for p in &filtered.pseudo_words {
            assert!(p.occurrences.len() >= 2);
        }
    }

    #[test]
    fn empty_transcript_set_is_rejected() {
        assert!(build_pretrain_index(&[], &PseudoConfig::default()).is_err());
    }

    #[test]
    fn index_files_round_trip() {
        let units: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let t = transcript(&units, 2);
        let idx = build_pretrain_index(
            &[t],
            &PseudoConfig {
                cap_per_doc: None,
                ..PseudoConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let words = dir.path().join("index.tsv");
        let occs = dir.path().join("occ.tsv");
        write_pretrain_index(&words, &occs, &idx).unwrap();
        let back = load_pretrain_index(&words, &occs).unwrap();
        assert_eq!(idx.pseudo_words, back.pseudo_words);
        assert_eq!(idx.alphabet, back.alphabet);
    }
}
