//! Maximum-likelihood Baum-Welch training of the phone loop over a fixed
//! unit inventory. Per-document sufficient statistics are computed
//! independently and merged in document order, so results are identical
//! for a given seed regardless of thread count.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::hmm::{
    backward, forward, GmmState, HmmUnitParams, PhoneLoopModel, GAUSSIANS_PER_STATE,
    STATES_PER_UNIT,
};
use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Unit inventory size U.
    pub units: usize,
    pub iters: usize,
    pub seed: u64,
    /// Train on at most this many documents (seeded random subset);
    /// labeling afterwards still covers the full corpus.
    pub max_docs: Option<usize>,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub variance_floor_frac: f64,
    pub kmeans_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            units: 50,
            iters: 20,
            seed: 0,
            max_docs: Some(3000),
            variance_floor_frac: 1e-3,
            kmeans_iters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub model: PhoneLoopModel,
    /// Total log-likelihood of the training set; entry i is evaluated
    /// under the model before update i, with one final entry for the
    /// returned model. Non-decreasing within numerical tolerance.
    pub loglik_history: Vec<f64>,
}

struct SuffStats {
    // Indexed by flat (state * G + gauss).
    resp: Array1<f64>,
    x_sum: Array2<f64>,
    x2_sum: Array2<f64>,
    // Per flat state.
    self_count: Array1<f64>,
    advance_count: Array1<f64>,
    // Per unit: expected number of entries (initial + loop re-entries).
    unit_entry: Array1<f64>,
    loglik: f64,
}

impl SuffStats {
    fn zeros(num_states: usize, dim: usize, num_units: usize) -> Self {
        SuffStats {
            resp: Array1::zeros(num_states * GAUSSIANS_PER_STATE),
            x_sum: Array2::zeros((num_states * GAUSSIANS_PER_STATE, dim)),
            x2_sum: Array2::zeros((num_states * GAUSSIANS_PER_STATE, dim)),
            self_count: Array1::zeros(num_states),
            advance_count: Array1::zeros(num_states),
            unit_entry: Array1::zeros(num_units),
            loglik: 0.0,
        }
    }

    fn merge(&mut self, other: &SuffStats) {
        self.resp += &other.resp;
        self.x_sum += &other.x_sum;
        self.x2_sum += &other.x2_sum;
        self.self_count += &other.self_count;
        self.advance_count += &other.advance_count;
        self.unit_entry += &other.unit_entry;
        self.loglik += other.loglik;
    }
}

fn logsumexp_slice(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn doc_stats(model: &PhoneLoopModel, x: &FeatureMatrix) -> SuffStats {
    let logb = model.log_emissions(x);
    let alpha = forward(model, &logb);
    let beta = backward(model, &logb);
    let n = x.num_frames();
    let s_count = model.num_states();
    let u_count = model.num_units();
    let ll = logsumexp_slice((0..s_count).map(|s| alpha[[n - 1, s]]));
    let mut stats = SuffStats::zeros(s_count, model.dim, u_count);
    stats.loglik = ll;

    let mut frame = vec![0.0f64; model.dim];
    let mut comp = [0.0f64; GAUSSIANS_PER_STATE];
    for t in 0..n {
        for (d, f) in frame.iter_mut().enumerate() {
            *f = x.frames[[t, d]] as f64;
        }
        for s in 0..s_count {
            let lg = alpha[[t, s]] + beta[[t, s]] - ll;
            if lg < -34.0 {
                continue; // occupancy below ~1e-15
            }
            let gamma = lg.exp();
            let unit = &model.units[s / STATES_PER_UNIT];
            let st = &unit.states[s % STATES_PER_UNIT];
            st.component_log_joint(&frame, &mut comp);
            let norm = logsumexp_slice(comp.iter().copied());
            for (g, &c) in comp.iter().enumerate() {
                if c == f64::NEG_INFINITY {
                    continue;
                }
                let r = gamma * (c - norm).exp();
                let flat = s * GAUSSIANS_PER_STATE + g;
                stats.resp[flat] += r;
                for (d, &xd) in frame.iter().enumerate() {
                    stats.x_sum[[flat, d]] += r * xd;
                    stats.x2_sum[[flat, d]] += r * xd * xd;
                }
            }
        }
        if t == 0 {
            for u in 0..u_count {
                let s0 = u * STATES_PER_UNIT;
                let lg = alpha[[0, s0]] + beta[[0, s0]] - ll;
                if lg > -34.0 {
                    stats.unit_entry[u] += lg.exp();
                }
            }
        }
        if t + 1 < n {
            // Pooled exit mass at t and entry mass at t+1 factorize the
            // U x U loop transitions into O(U) work.
            let exit = logsumexp_slice((0..u_count).map(|u| {
                let s2 = u * STATES_PER_UNIT + STATES_PER_UNIT - 1;
                alpha[[t, s2]] + (1.0 - model.units[u].self_loop[STATES_PER_UNIT - 1]).ln()
            }));
            let entry = logsumexp_slice((0..u_count).map(|u| {
                let s0 = u * STATES_PER_UNIT;
                model.loop_weights[u].ln() + logb[[t + 1, s0]] + beta[[t + 1, s0]]
            }));
            for (u, unit) in model.units.iter().enumerate() {
                let base = u * STATES_PER_UNIT;
                for si in 0..STATES_PER_UNIT {
                    let s = base + si;
                    let a = unit.self_loop[si];
                    let lstay = alpha[[t, s]] + a.ln() + logb[[t + 1, s]] + beta[[t + 1, s]] - ll;
                    if lstay > -34.0 {
                        stats.self_count[s] += lstay.exp();
                    }
                    let ladv = if si + 1 < STATES_PER_UNIT {
                        alpha[[t, s]]
                            + (1.0 - a).ln()
                            + logb[[t + 1, s + 1]]
                            + beta[[t + 1, s + 1]]
                            - ll
                    } else {
                        alpha[[t, s]] + (1.0 - a).ln() + entry - ll
                    };
                    if ladv > -34.0 {
                        stats.advance_count[s] += ladv.exp();
                    }
                }
                let s0 = base;
                let lenter =
                    exit + model.loop_weights[u].ln() + logb[[t + 1, s0]] + beta[[t + 1, s0]] - ll;
                if lenter > -34.0 {
                    stats.unit_entry[u] += lenter.exp();
                }
            }
        }
    }
    stats
}

/// Baum-Welch EM over the pooled loop HMM: k-means++ seeded Gaussian means,
/// uniform loop weights, variance flooring, fixed inventory size.
pub fn em_train_phone_loop(features: &[FeatureMatrix], config: &EmConfig) -> Result<EmOutcome> {
    if config.units == 0 {
        return Err(Error::invalid("unit inventory must be >= 1"));
    }
    let dim = check_features(features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train_docs = training_subset(features, config, &mut rng);
    let (global_var, pooled) = pool_statistics(&train_docs);
    let floor: Array1<f64> = global_var.mapv(|v| (v * config.variance_floor_frac).max(1e-12));
    let model = init_model(config, &pooled, &global_var, &floor, &mut rng, dim);
    run_em(model, &train_docs, config.iters, &floor)
}

/// EM refinement from a caller-supplied model (for instance one realized
/// from a hyper-subspace); the same cap, floor and iteration rules apply.
pub fn em_train_from(
    init: PhoneLoopModel,
    features: &[FeatureMatrix],
    config: &EmConfig,
) -> Result<EmOutcome> {
    let dim = check_features(features)?;
    if init.dim != dim {
        return Err(Error::dims("initial model feature dim", dim, init.dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train_docs = training_subset(features, config, &mut rng);
    let (global_var, _) = pool_statistics(&train_docs);
    let floor: Array1<f64> = global_var.mapv(|v| (v * config.variance_floor_frac).max(1e-12));
    run_em(init, &train_docs, config.iters, &floor)
}

fn check_features(features: &[FeatureMatrix]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::invalid("cannot train the phone loop on an empty feature set"));
    }
    let dim = features[0].dim();
    for f in features {
        if f.dim() != dim {
            return Err(Error::dims(
                format!("features of {}", f.doc_id),
                dim,
                f.dim(),
            ));
        }
    }
    Ok(dim)
}

fn training_subset<'a>(
    features: &'a [FeatureMatrix],
    config: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a FeatureMatrix> {
    let mut train_docs: Vec<&FeatureMatrix> = features.iter().collect();
    if let Some(cap) = config.max_docs {
        if train_docs.len() > cap {
            train_docs.shuffle(rng);
            train_docs.truncate(cap);
            train_docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        }
    }
    train_docs
}

fn run_em(
    mut model: PhoneLoopModel,
    train_docs: &[&FeatureMatrix],
    iters: usize,
    floor: &Array1<f64>,
) -> Result<EmOutcome> {
    if iters == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let stats = accumulate(&model, train_docs);
        history.push(stats.loglik);
        model = reestimate(&model, &stats, floor);
    }
    // Log-likelihood of the returned model.
    history.push(accumulate_loglik(&model, train_docs));
    Ok(EmOutcome {
        model,
        loglik_history: history,
    })
}

/// Total training-set log-likelihood without statistics.
pub(crate) fn accumulate_loglik(model: &PhoneLoopModel, docs: &[&FeatureMatrix]) -> f64 {
    docs.par_iter()
        .map(|x| {
            let logb = model.log_emissions(x);
            let alpha = forward(model, &logb);
            let n = alpha.nrows();
            logsumexp_slice((0..alpha.ncols()).map(|s| alpha[[n - 1, s]]))
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

fn accumulate(model: &PhoneLoopModel, docs: &[&FeatureMatrix]) -> SuffStats {
    let mut total = SuffStats::zeros(model.num_states(), model.dim, model.num_units());
    // Bounded memory: one chunk of per-document stats at a time, merged in
    // document order for run-to-run determinism.
    for chunk in docs.chunks(64) {
        let partial: Vec<SuffStats> = chunk.par_iter().map(|x| doc_stats(model, x)).collect();
        for p in &partial {
            total.merge(p);
        }
    }
    total
}

fn pool_statistics(docs: &[&FeatureMatrix]) -> (Array1<f64>, Array2<f64>) {
    let dim = docs[0].dim();
    let total_frames: usize = docs.iter().map(|d| d.num_frames()).sum();
    let cap = 20_000usize;
    let stride = total_frames.div_ceil(cap).max(1);
    let mut pooled_rows = Vec::new();
    let mut mean = Array1::<f64>::zeros(dim);
    let mut sq = Array1::<f64>::zeros(dim);
    let mut count = 0usize;
    let mut idx = 0usize;
    for doc in docs {
        for t in 0..doc.num_frames() {
            let row: Vec<f64> = (0..dim).map(|d| doc.frames[[t, d]] as f64).collect();
            for d in 0..dim {
                mean[d] += row[d];
                sq[d] += row[d] * row[d];
            }
            count += 1;
            if idx % stride == 0 {
                pooled_rows.push(row);
            }
            idx += 1;
        }
    }
    mean /= count as f64;
    let var = Array1::from_shape_fn(dim, |d| {
        (sq[d] / count as f64 - mean[d] * mean[d]).max(1e-12)
    });
    let mut pooled = Array2::zeros((pooled_rows.len(), dim));
    for (i, row) in pooled_rows.iter().enumerate() {
        for d in 0..dim {
            pooled[[i, d]] = row[d];
        }
    }
    (var, pooled)
}

/// k-means++ seeding plus Lloyd iterations over the pooled subsample; one
/// centroid per unit, jittered copies for the per-state Gaussians.
fn init_model(
    config: &EmConfig,
    pooled: &Array2<f64>,
    global_var: &Array1<f64>,
    floor: &Array1<f64>,
    rng: &mut ChaCha8Rng,
    dim: usize,
) -> PhoneLoopModel {
    let n = pooled.nrows();
    let k = config.units;
    let mut centroids: Vec<Array1<f64>> = Vec::with_capacity(k);
    centroids.push(pooled.row(rng.random_range(0..n)).to_owned());
    let mut d2 = vec![0.0f64; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for (i, slot) in d2.iter_mut().enumerate() {
            let row = pooled.row(i);
            let mut best = f64::INFINITY;
            for c in &centroids {
                let mut acc = 0.0;
                for d in 0..dim {
                    let diff = row[d] - c[d];
                    acc += diff * diff;
                }
                best = best.min(acc);
            }
            *slot = best;
            total += best;
        }
        if total <= 1e-12 {
            // Fewer distinct points than units: reuse random frames.
            centroids.push(pooled.row(rng.random_range(0..n)).to_owned());
            continue;
        }
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if pick < w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        centroids.push(pooled.row(chosen).to_owned());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..config.kmeans_iters {
        let mut changed = false;
        for i in 0..n {
            let row = pooled.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (ci, c) in centroids.iter().enumerate() {
                let mut acc = 0.0;
                for d in 0..dim {
                    let diff = row[d] - c[d];
                    acc += diff * diff;
                }
                if acc < best.0 {
                    best = (acc, ci);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![Array1::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for d in 0..dim {
                sums[assign[i]][d] += pooled[[i, d]];
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                centroids[ci] = &sums[ci] / counts[ci] as f64;
            }
        }
        if !changed {
            break;
        }
    }

    let jitter_scale: Array1<f64> = global_var.mapv(|v| 0.1 * v.sqrt());
    let units = (0..k)
        .map(|unit_id| HmmUnitParams {
            unit_id,
            states: (0..STATES_PER_UNIT)
                .map(|_| {
                    let mut means = Array2::zeros((GAUSSIANS_PER_STATE, dim));
                    for g in 0..GAUSSIANS_PER_STATE {
                        for d in 0..dim {
                            means[[g, d]] = centroids[unit_id][d]
                                + jitter_scale[d] * rng.random_range(-1.0..1.0);
                        }
                    }
                    let vars =
                        Array2::from_shape_fn((GAUSSIANS_PER_STATE, dim), |(_, d)| {
                            global_var[d].max(floor[d])
                        });
                    GmmState {
                        means,
                        vars,
                        weights: Array1::from_elem(GAUSSIANS_PER_STATE, 1.0 / GAUSSIANS_PER_STATE as f64),
                    }
                })
                .collect(),
            self_loop: vec![0.5; STATES_PER_UNIT],
        })
        .collect();
    PhoneLoopModel::new(units, Array1::from_elem(k, 1.0 / k as f64)).expect("valid init")
}

fn reestimate(model: &PhoneLoopModel, stats: &SuffStats, floor: &Array1<f64>) -> PhoneLoopModel {
    const TINY: f64 = 1e-10;
    let dim = model.dim;
    let units = model
        .units
        .iter()
        .enumerate()
        .map(|(u, unit)| {
            let states = unit
                .states
                .iter()
                .enumerate()
                .map(|(si, old)| {
                    let s = u * STATES_PER_UNIT + si;
                    let mut means = old.means.clone();
                    let mut vars = old.vars.clone();
                    let mut weights = old.weights.clone();
                    let state_resp: f64 = (0..GAUSSIANS_PER_STATE)
                        .map(|g| stats.resp[s * GAUSSIANS_PER_STATE + g])
                        .sum();
                    if state_resp > TINY {
                        for g in 0..GAUSSIANS_PER_STATE {
                            let flat = s * GAUSSIANS_PER_STATE + g;
                            let r = stats.resp[flat];
                            weights[g] = r / state_resp;
                            if r > TINY {
                                for d in 0..dim {
                                    let m = stats.x_sum[[flat, d]] / r;
                                    means[[g, d]] = m;
                                    vars[[g, d]] =
                                        (stats.x2_sum[[flat, d]] / r - m * m).max(floor[d]);
                                }
                            }
                        }
                    }
                    GmmState {
                        means,
                        vars,
                        weights,
                    }
                })
                .collect();
            let self_loop = (0..STATES_PER_UNIT)
                .map(|si| {
                    let s = u * STATES_PER_UNIT + si;
                    let denom = stats.self_count[s] + stats.advance_count[s];
                    if denom > TINY {
                        // Keep strictly inside (0, 1) so log transitions stay finite.
                        (stats.self_count[s] / denom).clamp(1e-8, 1.0 - 1e-8)
                    } else {
                        unit.self_loop[si]
                    }
                })
                .collect();
            HmmUnitParams {
                unit_id: unit.unit_id,
                states,
                self_loop,
            }
        })
        .collect();
    let entry_total: f64 = stats.unit_entry.sum();
    let loop_weights = if entry_total > TINY {
        // Keep every unit reachable; renormalize after flooring.
        let mut w = stats.unit_entry.mapv(|v| (v / entry_total).max(1e-12));
        let s = w.sum();
        w /= s;
        w
    } else {
        model.loop_weights.clone()
    };
    PhoneLoopModel::new(units, loop_weights).expect("re-estimated model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aud::hmm::viterbi_label;
    use crate::corpus::{synth_corpus, SynthConfig};

    fn tiny_synth(noise: f64, seed: u64) -> crate::corpus::SynthCorpus {
        synth_corpus(&SynthConfig {
            lexicon_size: 5,
            word_len: (3, 5),
            n_phones: 5,
            frames_per_phone: 4,
            n_docs: 6,
            doc_len: 6,
            noise_sigma: noise,
            dim: 6,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn purity(corpus: &crate::corpus::SynthCorpus, model: &PhoneLoopModel) -> f64 {
        // Majority-vote mapping from discovered unit to true phone.
        let mut votes = std::collections::HashMap::<(usize, u32), usize>::new();
        let mut labels = Vec::new();
        for (doc, phones) in corpus.features.iter().zip(&corpus.phone_frames) {
            let t = viterbi_label(model, doc).unwrap();
            let units = t.frame_units();
            assert_eq!(units.len(), phones.len());
            for (&u, &p) in units.iter().zip(phones) {
                *votes.entry((u, p)).or_default() += 1;
            }
            labels.push((units, phones.clone()));
        }
        let mut majority = std::collections::HashMap::<usize, u32>::new();
        for (&(u, p), &c) in &votes {
            let cur = majority.get(&u).map(|&mp| votes[&(u, mp)]).unwrap_or(0);
            if c > cur {
                majority.insert(u, p);
            }
        }
        let mut total = 0usize;
        let mut good = 0usize;
        for (units, phones) in &labels {
            for (&u, &p) in units.iter().zip(phones) {
                total += 1;
                good += usize::from(majority.get(&u) == Some(&p));
            }
        }
        good as f64 / total as f64
    }

    #[test]
    fn noiseless_corpus_reaches_high_purity() {
        let corpus = tiny_synth(0.0, 2);
        let out = em_train_phone_loop(
            &corpus.features,
            &EmConfig {
                units: 5,
                iters: 20,
                seed: 0,
                ..EmConfig::default()
            },
        )
        .unwrap();
        assert!(
            purity(&corpus, &out.model) >= 0.99,
            "purity {} below 0.99",
            purity(&corpus, &out.model)
        );
    }

    #[test]
    fn loglik_is_monotone_and_seeded() {
        let corpus = tiny_synth(0.2, 3);
        let cfg = EmConfig {
            units: 4,
            iters: 5,
            seed: 7,
            ..EmConfig::default()
        };
        let a = em_train_phone_loop(&corpus.features, &cfg).unwrap();
        for w in a.loglik_history.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6,
                "loglik decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        let b = em_train_phone_loop(&corpus.features, &cfg).unwrap();
        assert_eq!(a.model, b.model, "same seed must give identical model");
        assert_eq!(a.loglik_history, b.loglik_history);
    }

    #[test]
    fn more_iterations_do_not_hurt() {
        let corpus = tiny_synth(0.2, 4);
        let mk = |iters| EmConfig {
            units: 3,
            iters,
            seed: 1,
            ..EmConfig::default()
        };
        let one = em_train_phone_loop(&corpus.features, &mk(1)).unwrap();
        let two = em_train_phone_loop(&corpus.features, &mk(2)).unwrap();
        let ll1 = *one.loglik_history.last().unwrap();
        let ll2 = *two.loglik_history.last().unwrap();
        assert!(ll2 >= ll1 - 1e-6, "loglik(2 iters) {ll2} < loglik(1 iter) {ll1}");
    }

    #[test]
    fn oracle_model_recovers_exact_boundaries() {
        // Build a model whose units are the true phone templates; Viterbi
        // must reproduce the constructed boundaries at sigma = 0.
        let corpus = tiny_synth(0.0, 5);
        let dim = corpus.config.dim;
        let units: Vec<HmmUnitParams> = (0..corpus.config.n_phones)
            .map(|p| HmmUnitParams {
                unit_id: p,
                states: (0..STATES_PER_UNIT)
                    .map(|_| GmmState {
                        means: Array2::from_shape_fn((GAUSSIANS_PER_STATE, dim), |(_, d)| {
                            corpus.templates[[p, d]]
                        }),
                        vars: Array2::from_elem((GAUSSIANS_PER_STATE, dim), 0.01),
                        weights: Array1::from_elem(GAUSSIANS_PER_STATE, 0.25),
                    })
                    .collect(),
                self_loop: vec![0.5; STATES_PER_UNIT],
            })
            .collect();
        let u = units.len();
        let model = PhoneLoopModel::new(units, Array1::from_elem(u, 1.0 / u as f64)).unwrap();
        for (doc, phones) in corpus.features.iter().zip(&corpus.phone_frames) {
            let t = viterbi_label(&model, doc).unwrap();
            let decoded: Vec<u32> = t.frame_units().iter().map(|&x| x as u32).collect();
            assert_eq!(&decoded, phones, "boundaries must match in {}", doc.doc_id);
        }
    }

    #[test]
    fn empty_feature_set_is_rejected() {
        assert!(em_train_phone_loop(&[], &EmConfig::default()).is_err());
    }
}
