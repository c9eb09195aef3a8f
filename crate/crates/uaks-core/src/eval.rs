//! NIST-style evaluation: hypothesis-reference alignment, term weighted
//! value (TWV/MTWV/ATWV), query-level bootstrap percentile intervals, and
//! normalized mutual information for acoustic units.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Occurrence;
use crate::error::{Error, Result};
use crate::search::HitList;

#[derive(Debug, Clone)]
pub struct TwvConfig {
    pub beta: f64,
    /// Total evaluated speech duration T in seconds.
    pub total_duration: f64,
    /// Midpoint distance below which a hypothesis can claim a reference.
    pub match_tolerance: f64,
}

impl TwvConfig {
    pub fn new(total_duration: f64) -> Self {
        TwvConfig {
            beta: 999.9,
            total_duration,
            match_tolerance: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.total_duration > 0.0) {
            return Err(Error::invalid("total duration must be positive"));
        }
        if self.match_tolerance < 0.0 {
            return Err(Error::invalid("match tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Threshold-free alignment of one query's hypotheses: matched hypotheses
/// carry their normalized score, as do the false-alarm candidates.
#[derive(Debug, Clone, Default)]
pub struct AlignedQuery {
    /// Normalized scores of hypotheses matched one-to-one to references,
    /// descending.
    pub matched_scores: Vec<f64>,
    /// Normalized scores of unmatched hypotheses, descending.
    pub unmatched_scores: Vec<f64>,
    pub n_true: usize,
}

/// Greedy one-to-one matching per query in descending normalized score: a
/// hypothesis claims the nearest unmatched same-document reference whose
/// midpoint lies within the tolerance.
pub fn align_hyps_to_refs(
    hits: &HitList,
    refs: &[Occurrence],
    tolerance: f64,
) -> BTreeMap<String, AlignedQuery> {
    let mut refs_by_query: BTreeMap<&str, Vec<&Occurrence>> = BTreeMap::new();
    for r in refs {
        refs_by_query.entry(r.query_id.as_str()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (query_id, query_refs) in &refs_by_query {
        let mut aligned = AlignedQuery {
            n_true: query_refs.len(),
            ..AlignedQuery::default()
        };
        let mut taken = vec![false; query_refs.len()];
        if let Some(hyps) = hits.by_query.get(*query_id) {
            let mut hyps: Vec<_> = hyps.iter().collect();
            hyps.sort_by(|a, b| {
                b.norm_score
                    .partial_cmp(&a.norm_score)
                    .expect("scores are finite")
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
                    .then_with(|| a.t_begin.partial_cmp(&b.t_begin).expect("finite"))
            });
            for h in hyps {
                let mid = 0.5 * (h.t_begin + h.t_end);
                let mut best: Option<(f64, usize)> = None;
                for (i, r) in query_refs.iter().enumerate() {
                    if taken[i] || r.doc_id != h.doc_id {
                        continue;
                    }
                    let dist = (mid - r.midpoint()).abs();
                    if dist <= tolerance && best.map_or(true, |(d, _)| dist < d) {
                        best = Some((dist, i));
                    }
                }
                match best {
                    Some((_, i)) => {
                        taken[i] = true;
                        aligned.matched_scores.push(h.norm_score);
                    }
                    None => aligned.unmatched_scores.push(h.norm_score),
                }
            }
        }
        aligned
            .matched_scores
            .sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        aligned
            .unmatched_scores
            .sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        out.insert(query_id.to_string(), aligned);
    }
    out
}

/// Per-query miss and false-alarm probabilities at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryCost {
    pub p_miss: f64,
    pub p_fa: f64,
    pub n_true: usize,
}

impl QueryCost {
    pub fn cost(&self, beta: f64) -> f64 {
        self.p_miss + beta * self.p_fa
    }
}

#[derive(Debug, Clone)]
pub struct TwvResult {
    pub twv: f64,
    pub threshold: f64,
    pub per_query: BTreeMap<String, QueryCost>,
    /// Queries that were scored but have no reference occurrences; they
    /// are excluded from the average and reported here.
    pub excluded_queries: usize,
}

fn count_at_least(sorted_desc: &[f64], zeta: f64) -> usize {
    // Scores are sorted descending; find how many are >= zeta.
    sorted_desc.partition_point(|&s| s >= zeta)
}

fn twv_from_alignment(
    aligned: &BTreeMap<String, AlignedQuery>,
    zeta: f64,
    cfg: &TwvConfig,
    excluded: usize,
) -> Result<TwvResult> {
    if aligned.is_empty() {
        return Err(Error::invalid("no queries with references to average over"));
    }
    let mut per_query = BTreeMap::new();
    let mut total_cost = 0.0;
    for (qid, a) in aligned {
        if a.n_true == 0 {
            return Err(Error::invalid(format!(
                "query {qid} has no reference occurrences but entered the averaging set"
            )));
        }
        let n_correct = count_at_least(&a.matched_scores, zeta);
        let n_fa = count_at_least(&a.unmatched_scores, zeta);
        let p_miss = 1.0 - n_correct as f64 / a.n_true as f64;
        // One-second trials: T - n_true of them can false-alarm.
        let trials = cfg.total_duration - a.n_true as f64;
        if !(trials > 0.0) {
            return Err(Error::invalid(format!(
                "query {qid}: reference count {} leaves no trials in duration {}",
                a.n_true, cfg.total_duration
            )));
        }
        let p_fa = n_fa as f64 / trials;
        let qc = QueryCost {
            p_miss,
            p_fa,
            n_true: a.n_true,
        };
        total_cost += qc.cost(cfg.beta);
        per_query.insert(qid.clone(), qc);
    }
    let twv = 100.0 * (1.0 - total_cost / aligned.len() as f64);
    Ok(TwvResult {
        twv,
        threshold: zeta,
        per_query,
        excluded_queries: excluded,
    })
}

fn excluded_count(hits: &HitList, aligned: &BTreeMap<String, AlignedQuery>) -> usize {
    hits.by_query
        .keys()
        .filter(|q| !aligned.contains_key(*q))
        .count()
}

/// TWV at a fixed decision threshold: decisions are `norm_score >= zeta`.
pub fn twv(hits: &HitList, refs: &[Occurrence], zeta: f64, cfg: &TwvConfig) -> Result<TwvResult> {
    cfg.validate()?;
    let aligned = align_hyps_to_refs(hits, refs, cfg.match_tolerance);
    let excluded = excluded_count(hits, &aligned);
    twv_from_alignment(&aligned, zeta, cfg, excluded)
}

/// Sweeps every distinct normalized score (plus the reject-all sentinel 1)
/// and returns the maximizing threshold; ties resolve to the smallest.
/// A 0 sentinel would decide exactly like the smallest score, so it only
/// enters when there are no scores at all.
pub fn mtwv_sweep(hits: &HitList, refs: &[Occurrence], cfg: &TwvConfig) -> Result<TwvResult> {
    cfg.validate()?;
    let aligned = align_hyps_to_refs(hits, refs, cfg.match_tolerance);
    let excluded = excluded_count(hits, &aligned);
    let mut candidates: Vec<f64> = Vec::new();
    for a in aligned.values() {
        candidates.extend_from_slice(&a.matched_scores);
        candidates.extend_from_slice(&a.unmatched_scores);
    }
    if candidates.is_empty() {
        candidates.push(0.0);
    }
    candidates.push(1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    candidates.dedup();
    let mut best: Option<TwvResult> = None;
    for &zeta in &candidates {
        let r = twv_from_alignment(&aligned, zeta, cfg, excluded)?;
        let better = match &best {
            None => true,
            // Strict improvement only: ties keep the smaller threshold.
            Some(b) => r.twv > b.twv + 1e-12,
        };
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

/// TWV at a threshold tuned elsewhere (the dev-set MTWV threshold).
pub fn atwv(
    hits: &HitList,
    refs: &[Occurrence],
    zeta_dev: f64,
    cfg: &TwvConfig,
) -> Result<TwvResult> {
    twv(hits, refs, zeta_dev, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi {
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Query-level percentile bootstrap of the ATWV at a fixed threshold:
/// resample the query set with replacement B times, recompute the average
/// cost from the cached per-query costs, and report the empirical 2.5th
/// and 97.5th percentiles.
pub fn bootstrap_ci(
    hits: &HitList,
    refs: &[Occurrence],
    zeta: f64,
    resamples: usize,
    seed: u64,
    cfg: &TwvConfig,
) -> Result<BootstrapCi> {
    if resamples < 2 {
        return Err(Error::invalid("need at least 2 bootstrap resamples"));
    }
    let point = twv(hits, refs, zeta, cfg)?;
    let costs: Vec<f64> = point.per_query.values().map(|qc| qc.cost(cfg.beta)).collect();
    if costs.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 queries"));
    }
    let mut atwvs: Vec<f64> = Vec::with_capacity(resamples);
    for b in 0..resamples {
        // Independent stream per resample: (seed, resample index).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let total: f64 = (0..costs.len())
            .map(|_| costs[rng.random_range(0..costs.len())])
            .sum();
        atwvs.push(100.0 * (1.0 - total / costs.len() as f64));
    }
    atwvs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(BootstrapCi {
        lower: percentile(&atwvs, 2.5),
        upper: percentile(&atwvs, 97.5),
        resamples,
        seed,
    })
}

/// Linear-interpolation percentile of a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmiResult {
    /// Mutual information in nats.
    pub mutual_information: f64,
    pub entropy_ref: f64,
    pub entropy_units: f64,
    /// 200 * I / (H_ref + H_units), in [0, 100].
    pub nmi: f64,
}

/// Frame-level normalized mutual information between reference labels and
/// discovered unit labels: NMI = 200 * I(P;U) / (H(P) + H(U)). Both inputs
/// are per-document frame label sequences and must agree in length.
pub fn nmi<P, U>(reference: &[Vec<P>], units: &[Vec<U>]) -> Result<NmiResult>
where
    P: Hash + Eq + Ord + Clone,
    U: Hash + Eq + Ord + Clone,
{
    if reference.len() != units.len() {
        return Err(Error::dims("nmi document count", reference.len(), units.len()));
    }
    let mut joint: BTreeMap<(P, U), f64> = BTreeMap::new();
    let mut total = 0usize;
    for (doc_idx, (p_doc, u_doc)) in reference.iter().zip(units).enumerate() {
        if p_doc.len() != u_doc.len() {
            return Err(Error::dims(
                format!("nmi frame count in document {doc_idx}"),
                p_doc.len(),
                u_doc.len(),
            ));
        }
        for (p, u) in p_doc.iter().zip(u_doc) {
            *joint.entry((p.clone(), u.clone())).or_default() += 1.0;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("nmi needs at least one frame"));
    }
    let n = total as f64;
    let mut p_marg: BTreeMap<&P, f64> = BTreeMap::new();
    let mut u_marg: BTreeMap<&U, f64> = BTreeMap::new();
    for ((p, u), c) in &joint {
        *p_marg.entry(p).or_default() += c;
        *u_marg.entry(u).or_default() += c;
    }
    // 0 * log 0 = 0 by convention; counts here are always positive.
    let h_p: f64 = p_marg.values().map(|&c| -(c / n) * (c / n).ln()).sum();
    let h_u: f64 = u_marg.values().map(|&c| -(c / n) * (c / n).ln()).sum();
    let mut mi = 0.0;
    for ((p, u), &c) in &joint {
        let pij = c / n;
        let pi = p_marg[p] / n;
        let pj = u_marg[u] / n;
        mi += pij * (pij / (pi * pj)).ln();
    }
    let mi = mi.max(0.0);
    let nmi_value = if h_p + h_u <= 0.0 {
        log::warn!("NMI: both labelings are single-class; defining NMI = 0");
        0.0
    } else {
        200.0 * mi / (h_p + h_u)
    };
    Ok(NmiResult {
        mutual_information: mi,
        entropy_ref: h_p,
        entropy_units: h_u,
        nmi: nmi_value,
    })
}

/// Reads a transcript-format TSV (`<doc-id>\t<label>\t<start>\t<end>`)
/// into per-document frame label sequences, with arbitrary string labels.
pub fn load_frame_labels(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut segments: BTreeMap<String, Vec<(usize, usize, String)>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let start: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad start frame `{}`", fields[2])))?;
        let end: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad end frame `{}`", fields[3])))?;
        if end <= start {
            return Err(Error::parse(path, lineno, "empty segment"));
        }
        segments
            .entry(fields[0].to_string())
            .or_default()
            .push((start, end, fields[1].to_string()));
    }
    let mut out = BTreeMap::new();
    for (doc, mut segs) in segments {
        segs.sort_by_key(|s| s.0);
        let mut frames = Vec::new();
        for (start, end, label) in segs {
            if start != frames.len() {
                return Err(Error::format(
                    "frame labels",
                    format!("document {doc} has a gap at frame {}", frames.len()),
                ));
            }
            frames.extend(std::iter::repeat_n(label, end - start));
        }
        out.insert(doc, frames);
    }
    Ok(out)
}
