//! Posterior post-processing: island detection with median scoring,
//! keyword-specific threshold score normalization, and corpus search.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{FeatureMatrix, QueryText};
use crate::error::{Error, Result};
use crate::model::{encode_document, encode_query, score, ModelParams, PosteriorVector};

/// One detected span with its raw (median) and normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub query_id: String,
    pub doc_id: String,
    pub t_begin: f64,
    pub t_end: f64,
    pub raw_score: f64,
    pub norm_score: f64,
}

/// All hypotheses grouped by query plus the total evaluated speech
/// duration feeding the TWV trial counts.
#[derive(Debug, Clone, Default)]
pub struct HitList {
    pub by_query: BTreeMap<String, Vec<Hypothesis>>,
    pub total_duration: f64,
}

impl HitList {
    pub fn num_hits(&self) -> usize {
        self.by_query.values().map(Vec::len).sum()
    }
}

/// A maximal run of posteriors surviving the 0.5 cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Island {
    pub first_frame: usize,
    pub last_frame: usize,
    pub score: f64,
}

/// Zeroes out z_n < 0.5 (strictly, so exactly-0.5 frames survive) and
/// returns each maximal surviving run with its median probability.
pub fn detect_islands(z: &PosteriorVector) -> Vec<Island> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for n in 0..=z.z.len() {
        let alive = n < z.z.len() && z.z[n] >= 0.5;
        match (run_start, alive) {
            (None, true) => run_start = Some(n),
            (Some(start), false) => {
                out.push(Island {
                    first_frame: start,
                    last_frame: n - 1,
                    score: median(&z.z[start..n]),
                });
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// Median with the even-length convention: mean of the two central order
/// statistics.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("posteriors are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Keyword-specific thresholding: with expected true count
/// N = sum of the query's raw scores, the per-query threshold is
/// p* = beta*N / (T - N + beta*N) and each score s is mapped through the
/// odds rescaling s(1-p*) / (s(1-p*) + (1-s)p*), sending s = p* to 0.5.
pub fn kst_normalize(hits: &mut [Hypothesis], total_duration: f64, beta: f64) -> Result<()> {
    if hits.is_empty() {
        return Ok(());
    }
    if !(total_duration > 0.0) {
        return Err(Error::invalid("total duration must be positive"));
    }
    let n_true: f64 = hits.iter().map(|h| h.raw_score).sum();
    if n_true >= total_duration {
        return Err(Error::invalid(format!(
            "expected true count {n_true} exceeds evaluated duration {total_duration}"
        )));
    }
    let p_star = beta * n_true / (total_duration - n_true + beta * n_true);
    for h in hits.iter_mut() {
        let s = h.raw_score;
        h.norm_score = s * (1.0 - p_star) / (s * (1.0 - p_star) + (1.0 - s) * p_star);
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Cap per-query hit lists before normalization; `None` disables.
    pub top_k: Option<usize>,
    pub beta: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            top_k: Some(10_000),
            beta: 999.9,
        }
    }
}

/// Runs the full inference path for every (query, document) pair: encode,
/// score, island detection, then keyword-specific normalization per query
/// over the whole corpus. Hypotheses come back sorted by normalized score.
pub fn search_corpus(
    params: &ModelParams,
    queries: &[QueryText],
    docs: &[FeatureMatrix],
    config: &SearchConfig,
) -> Result<HitList> {
    let total_duration: f64 = docs.iter().map(|d| d.duration()).sum();
    if !(total_duration > 0.0) {
        return Err(Error::invalid("search corpus has no speech"));
    }
    // Documents are encoded once and shared across queries.
    let encodings = docs
        .par_iter()
        .map(|d| encode_document(params, d, false))
        .collect::<Result<Vec<_>>>()?;

    let mut by_query = BTreeMap::new();
    let per_query: Vec<Result<(String, Vec<Hypothesis>)>> = queries
        .par_iter()
        .map(|q| {
            let e_q = encode_query(params, q)?;
            let mut hits = Vec::new();
            for (doc, enc) in docs.iter().zip(&encodings) {
                let z = score(enc, &e_q)?;
                for island in detect_islands(&z) {
                    hits.push(Hypothesis {
                        query_id: q.query_id.clone(),
                        doc_id: doc.doc_id.clone(),
                        t_begin: island.first_frame as f64 * z.encoder_frame_period,
                        t_end: (island.last_frame + 1) as f64 * z.encoder_frame_period,
                        raw_score: island.score,
                        norm_score: 0.0,
                    });
                }
            }
            if let Some(k) = config.top_k {
                if hits.len() > k {
                    hits.sort_by(|a, b| {
                        b.raw_score
                            .partial_cmp(&a.raw_score)
                            .expect("scores are finite")
                            .then_with(|| a.doc_id.cmp(&b.doc_id))
                            .then_with(|| a.t_begin.partial_cmp(&b.t_begin).expect("finite"))
                    });
                    hits.truncate(k);
                }
            }
            kst_normalize(&mut hits, total_duration, config.beta)?;
            hits.sort_by(|a, b| {
                b.norm_score
                    .partial_cmp(&a.norm_score)
                    .expect("scores are finite")
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
                    .then_with(|| a.t_begin.partial_cmp(&b.t_begin).expect("finite"))
            });
            Ok((q.query_id.clone(), hits))
        })
        .collect();
    for r in per_query {
        let (qid, hits) = r?;
        by_query.insert(qid, hits);
    }
    Ok(HitList {
        by_query,
        total_duration,
    })
}

/// Hit list TSV: `<query-id>\t<doc-id>\t<t_begin>\t<t_end>\t<raw>\t<norm>`.
pub fn write_hits(path: &Path, hits: &HitList) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# duration={}", hits.total_duration).map_err(|e| Error::io(path, e))?;
    for hyps in hits.by_query.values() {
        for h in hyps {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                h.query_id, h.doc_id, h.t_begin, h.t_end, h.raw_score, h.norm_score
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_hits(path: &Path) -> Result<HitList> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = HitList::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# duration=") {
            out.total_duration = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad duration header"))?;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 tab-separated fields, found {}", fields.len()),
            ));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad {what} `{s}`")))
        };
        let h = Hypothesis {
            query_id: fields[0].to_string(),
            doc_id: fields[1].to_string(),
            t_begin: parse_f(fields[2], "begin time")?,
            t_end: parse_f(fields[3], "end time")?,
            raw_score: parse_f(fields[4], "raw score")?,
            norm_score: parse_f(fields[5], "normalized score")?,
        };
        out.by_query.entry(h.query_id.clone()).or_default().push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posterior(z: Vec<f64>) -> PosteriorVector {
        PosteriorVector {
            z,
            encoder_frame_period: 0.02,
        }
    }

    #[test]
    fn hand_executed_island_case() {
        let z = posterior(vec![0.2, 0.6, 0.7, 0.4, 0.9]);
        let islands = detect_islands(&z);
        assert_eq!(islands.len(), 2);
        assert_eq!((islands[0].first_frame, islands[0].last_frame), (1, 2));
        assert_abs_diff_eq!(islands[0].score, 0.65, epsilon = 1e-12);
        assert_eq!((islands[1].first_frame, islands[1].last_frame), (4, 4));
        assert_abs_diff_eq!(islands[1].score, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn all_below_threshold_yields_nothing() {
        assert!(detect_islands(&posterior(vec![0.1, 0.49, 0.3])).is_empty());
    }

    #[test]
    fn uniform_high_posterior_is_one_island() {
        let islands = detect_islands(&posterior(vec![0.9; 7]));
        assert_eq!(islands.len(), 1);
        assert_eq!((islands[0].first_frame, islands[0].last_frame), (0, 6));
        assert_abs_diff_eq!(islands[0].score, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn exactly_half_survives_zeroing() {
        // Strict z < 0.5 zeroing: a constant 0.5 vector is one island.
        let islands = detect_islands(&posterior(vec![0.5; 4]));
        assert_eq!(islands.len(), 1);
        assert_abs_diff_eq!(islands[0].score, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn islands_match_brute_force_segmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..1000 {
            let len = rng.random_range(1..=64);
            let z: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            let fast = detect_islands(&posterior(z.clone()));
            // Oracle: scan all maximal surviving runs directly.
            let mut slow = Vec::new();
            let mut i = 0usize;
            while i < z.len() {
                if z[i] >= 0.5 {
                    let start = i;
                    while i < z.len() && z[i] >= 0.5 {
                        i += 1;
                    }
                    slow.push(Island {
                        first_frame: start,
                        last_frame: i - 1,
                        score: median(&z[start..i]),
                    });
                } else {
                    i += 1;
                }
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn islands_are_maximal_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let len = rng.random_range(2..=64);
            let z: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            let islands = detect_islands(&posterior(z));
            for pair in islands.windows(2) {
                assert!(pair[1].first_frame > pair[0].last_frame + 1);
            }
        }
    }

    fn hit(raw: f64) -> Hypothesis {
        Hypothesis {
            query_id: "q".into(),
            doc_id: "d".into(),
            t_begin: 0.0,
            t_end: 1.0,
            raw_score: raw,
            norm_score: 0.0,
        }
    }

    #[test]
    fn kst_closed_form_single_hit() {
        let mut hits = vec![hit(0.9)];
        kst_normalize(&mut hits, 3600.0, 999.9).unwrap();
        // N = 0.9, p* = 899.91 / 4499.01 = 0.20002..., norm = 0.9730...
        assert_abs_diff_eq!(hits[0].norm_score, 0.9730, epsilon = 1e-4);
    }

    #[test]
    fn score_equal_to_threshold_maps_to_half() {
        // Construct hits whose sum gives p*, then check s = p* -> 0.5.
        let mut hits = vec![hit(0.4), hit(0.6)];
        let t = 100.0;
        let beta = 999.9;
        let n_true = 1.0;
        let p_star = beta * n_true / (t - n_true + beta * n_true);
        hits.push(hit(p_star));
        // Adding the third hit changes N; recompute with all three raw scores.
        let n_true = 1.0 + p_star;
        let p_star = beta * n_true / (t - n_true + beta * n_true);
        hits[2].raw_score = p_star;
        kst_normalize(&mut hits, t, beta).unwrap();
        // The dependence of p* on its own hit converges immediately here
        // because n_true feeds only through the sum; verify the fixed point.
        let n_check: f64 = hits.iter().map(|h| h.raw_score).sum();
        let p_check = beta * n_check / (t - n_check + beta * n_check);
        let expect = p_star * (1.0 - p_check) / (p_star * (1.0 - p_check) + (1.0 - p_star) * p_check);
        assert_abs_diff_eq!(hits[2].norm_score, expect, epsilon = 1e-12);
        if (p_star - p_check).abs() < 1e-9 {
            assert_abs_diff_eq!(hits[2].norm_score, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn normalization_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut hits: Vec<Hypothesis> =
            (0..50).map(|_| hit(rng.random_range(0.01..0.99))).collect();
        kst_normalize(&mut hits, 7200.0, 999.9).unwrap();
        let mut sorted_raw = hits.clone();
        sorted_raw.sort_by(|a, b| a.raw_score.partial_cmp(&b.raw_score).unwrap());
        for pair in sorted_raw.windows(2) {
            assert!(
                pair[1].norm_score > pair[0].norm_score,
                "KST must be strictly increasing"
            );
        }
    }

    #[test]
    fn degenerate_duration_is_rejected() {
        let mut hits = vec![hit(0.9); 10];
        assert!(kst_normalize(&mut hits, 5.0, 999.9).is_err());
    }

    #[test]
    fn hit_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hits.tsv");
        let mut hl = HitList {
            total_duration: 120.0,
            ..HitList::default()
        };
        hl.by_query.insert(
            "q1".into(),
            vec![Hypothesis {
                query_id: "q1".into(),
                doc_id: "d1".into(),
                t_begin: 1.5,
                t_end: 2.0,
                raw_score: 0.8,
                norm_score: 0.97,
            }],
        );
        write_hits(&path, &hl).unwrap();
        let back = load_hits(&path).unwrap();
        assert_eq!(back.total_duration, 120.0);
        assert_eq!(back.by_query["q1"], hl.by_query["q1"]);
    }
}
