//! Phone-loop HMM: each acoustic unit is a 3-state left-to-right HMM with a
//! 4-component diagonal-covariance GMM per state; units are connected in a
//! loop weighted by unit priors. Inference runs in the log domain.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};

pub const STATES_PER_UNIT: usize = 3;
pub const GAUSSIANS_PER_STATE: usize = 4;

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal-covariance GMM emission of one HMM state.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmState {
    /// n_gauss x dim
    pub means: Array2<f64>,
    /// n_gauss x dim, strictly positive
    pub vars: Array2<f64>,
    /// n_gauss, sums to one
    pub weights: Array1<f64>,
}

impl GmmState {
    /// Log density log p(x | state) = logsumexp_g log w_g N(x; mu_g, v_g).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let g = self.weights.len();
        let mut terms = [f64::NEG_INFINITY; GAUSSIANS_PER_STATE];
        for gi in 0..g {
            let w = self.weights[gi];
            if w <= 0.0 {
                continue;
            }
            let mut acc = w.ln();
            for (d, &xd) in x.iter().enumerate() {
                let v = self.vars[[gi, d]];
                let diff = xd - self.means[[gi, d]];
                acc -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
            }
            terms[gi] = acc;
            if acc > best {
                best = acc;
            }
        }
        if best == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut sum = 0.0;
        for t in terms.iter().take(g) {
            if *t > f64::NEG_INFINITY {
                sum += (t - best).exp();
            }
        }
        best + sum.ln()
    }

    /// Per-component log joint log(w_g) + log N(x; mu_g, v_g).
    pub fn component_log_joint(&self, x: &[f64], out: &mut [f64]) {
        for (gi, o) in out.iter_mut().enumerate() {
            let w = self.weights[gi];
            if w <= 0.0 {
                *o = f64::NEG_INFINITY;
                continue;
            }
            let mut acc = w.ln();
            for (d, &xd) in x.iter().enumerate() {
                let v = self.vars[[gi, d]];
                let diff = xd - self.means[[gi, d]];
                acc -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
            }
            *o = acc;
        }
    }
}

/// One acoustic unit: left-to-right states with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmUnitParams {
    pub unit_id: usize,
    pub states: Vec<GmmState>,
    /// Self-transition probability per state; the remainder moves forward
    /// (or exits the unit from the last state).
    pub self_loop: Vec<f64>,
}

impl HmmUnitParams {
    pub fn validate(&self) -> Result<()> {
        if self.states.len() != STATES_PER_UNIT {
            return Err(Error::dims(
                "unit states",
                STATES_PER_UNIT,
                self.states.len(),
            ));
        }
        if self.self_loop.len() != self.states.len() {
            return Err(Error::dims(
                "unit transitions",
                self.states.len(),
                self.self_loop.len(),
            ));
        }
        for (si, st) in self.states.iter().enumerate() {
            if st.vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "unit {} state {si} has non-positive variance",
                    self.unit_id
                )));
            }
            let wsum: f64 = st.weights.iter().sum();
            if (wsum - 1.0).abs() > 1e-9 || st.weights.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid(format!(
                    "unit {} state {si} mixture weights must form a simplex (sum {wsum})",
                    self.unit_id
                )));
            }
        }
        for &a in &self.self_loop {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::invalid(format!(
                    "unit {} self-loop probability {a} outside [0, 1)",
                    self.unit_id
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.states[0].means.ncols()
    }
}

/// The full phone loop: U units plus loop weights over them.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneLoopModel {
    pub units: Vec<HmmUnitParams>,
    pub loop_weights: Array1<f64>,
    pub dim: usize,
}

impl PhoneLoopModel {
    pub fn new(units: Vec<HmmUnitParams>, loop_weights: Array1<f64>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::invalid("phone loop needs at least one unit"));
        }
        if loop_weights.len() != units.len() {
            return Err(Error::dims("loop weights", units.len(), loop_weights.len()));
        }
        let wsum: f64 = loop_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || loop_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid(format!(
                "loop weights must form a simplex (sum {wsum})"
            )));
        }
        let dim = units[0].dim();
        for u in &units {
            u.validate()?;
            if u.dim() != dim {
                return Err(Error::dims("unit feature dim", dim, u.dim()));
            }
        }
        Ok(PhoneLoopModel {
            units,
            loop_weights,
            dim,
        })
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn num_states(&self) -> usize {
        self.units.len() * STATES_PER_UNIT
    }

    pub fn check_features(&self, x: &FeatureMatrix) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::dims(
                format!("features of {}", x.doc_id),
                self.dim,
                x.dim(),
            ));
        }
        Ok(())
    }

    /// N x (U*3) log emission matrix for a document.
    pub(crate) fn log_emissions(&self, x: &FeatureMatrix) -> Array2<f64> {
        let n = x.num_frames();
        let s = self.num_states();
        let mut out = Array2::zeros((n, s));
        let mut frame = vec![0.0f64; self.dim];
        for t in 0..n {
            for (d, f) in frame.iter_mut().enumerate() {
                *f = x.frames[[t, d]] as f64;
            }
            for (u, unit) in self.units.iter().enumerate() {
                for (si, st) in unit.states.iter().enumerate() {
                    out[[t, u * STATES_PER_UNIT + si]] = st.log_density(&frame);
                }
            }
        }
        out
    }
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Forward pass over the flattened loop states. Returns the N x S alpha
/// matrix (log domain); the log marginal likelihood is the logsumexp of the
/// last row.
pub(crate) fn forward(model: &PhoneLoopModel, logb: &Array2<f64>) -> Array2<f64> {
    let n = logb.nrows();
    let u_count = model.num_units();
    let s = model.num_states();
    let mut alpha = Array2::from_elem((n, s), f64::NEG_INFINITY);
    for (u, _) in model.units.iter().enumerate() {
        let st = u * STATES_PER_UNIT;
        alpha[[0, st]] = model.loop_weights[u].ln() + logb[[0, st]];
    }
    for t in 1..n {
        // Pooled exit mass: logsumexp_u' alpha[t-1][u',2] + log(1 - self).
        let exit = logsumexp((0..u_count).map(|u| {
            let st = u * STATES_PER_UNIT + STATES_PER_UNIT - 1;
            alpha[[t - 1, st]] + (1.0 - model.units[u].self_loop[STATES_PER_UNIT - 1]).ln()
        }));
        for (u, unit) in model.units.iter().enumerate() {
            let base = u * STATES_PER_UNIT;
            for si in 0..STATES_PER_UNIT {
                let stay = alpha[[t - 1, base + si]] + unit.self_loop[si].ln();
                let incoming = if si == 0 {
                    logsumexp2(stay, exit + model.loop_weights[u].ln())
                } else {
                    let from_prev =
                        alpha[[t - 1, base + si - 1]] + (1.0 - unit.self_loop[si - 1]).ln();
                    logsumexp2(stay, from_prev)
                };
                alpha[[t, base + si]] = incoming + logb[[t, base + si]];
            }
        }
    }
    alpha
}

/// Backward pass; beta[N-1] = 0 for every state.
pub(crate) fn backward(model: &PhoneLoopModel, logb: &Array2<f64>) -> Array2<f64> {
    let n = logb.nrows();
    let u_count = model.num_units();
    let s = model.num_states();
    let mut beta = Array2::from_elem((n, s), f64::NEG_INFINITY);
    for si in 0..s {
        beta[[n - 1, si]] = 0.0;
    }
    for t in (0..n - 1).rev() {
        // Pooled entry mass: logsumexp_u loop_w[u] + b[t+1][u,0] + beta[t+1][u,0].
        let entry = logsumexp((0..u_count).map(|u| {
            let st = u * STATES_PER_UNIT;
            model.loop_weights[u].ln() + logb[[t + 1, st]] + beta[[t + 1, st]]
        }));
        for (u, unit) in model.units.iter().enumerate() {
            let base = u * STATES_PER_UNIT;
            for si in 0..STATES_PER_UNIT {
                let stay =
                    unit.self_loop[si].ln() + logb[[t + 1, base + si]] + beta[[t + 1, base + si]];
                let out = if si + 1 < STATES_PER_UNIT {
                    (1.0 - unit.self_loop[si]).ln()
                        + logb[[t + 1, base + si + 1]]
                        + beta[[t + 1, base + si + 1]]
                } else {
                    (1.0 - unit.self_loop[si]).ln() + entry
                };
                beta[[t, base + si]] = logsumexp2(stay, out);
            }
        }
    }
    beta
}

/// Exact log marginal likelihood of the document under the loop HMM.
pub fn loglik(model: &PhoneLoopModel, x: &FeatureMatrix) -> Result<f64> {
    model.check_features(x)?;
    let logb = model.log_emissions(x);
    let alpha = forward(model, &logb);
    let n = alpha.nrows();
    Ok(logsumexp((0..alpha.ncols()).map(|s| alpha[[n - 1, s]])))
}

/// A decoded segment: unit id over [start, end) frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub unit: usize,
    pub start: usize,
    pub end: usize,
}

/// Viterbi-decoded unit sequence of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTranscript {
    pub doc_id: String,
    pub segments: Vec<Segment>,
    pub frame_period: f64,
}

impl UnitTranscript {
    /// Collapses per-frame unit labels into contiguous segments.
    pub fn from_frame_units(doc_id: impl Into<String>, units: &[usize], frame_period: f64) -> Self {
        let mut segments = Vec::new();
        let mut start = 0usize;
        for t in 1..=units.len() {
            if t == units.len() || units[t] != units[start] {
                segments.push(Segment {
                    unit: units[start],
                    start,
                    end: t,
                });
                start = t;
            }
        }
        UnitTranscript {
            doc_id: doc_id.into(),
            segments,
            frame_period,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    /// Expands segments back to one unit label per frame.
    pub fn frame_units(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for seg in &self.segments {
            out.extend(std::iter::repeat_n(seg.unit, seg.end - seg.start));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut pos = 0usize;
        for seg in &self.segments {
            if seg.start != pos || seg.end <= seg.start {
                return Err(Error::invalid(format!(
                    "transcript of {} has a gap or empty segment at frame {pos}",
                    self.doc_id
                )));
            }
            pos = seg.end;
        }
        Ok(())
    }
}

/// Maximum-probability state path, collapsed to unit segments.
pub fn viterbi_label(model: &PhoneLoopModel, x: &FeatureMatrix) -> Result<UnitTranscript> {
    model.check_features(x)?;
    let logb = model.log_emissions(x);
    let n = x.num_frames();
    let u_count = model.num_units();
    let s = model.num_states();
    let mut delta = Array2::from_elem((n, s), f64::NEG_INFINITY);
    let mut back = Array2::<u32>::zeros((n, s));
    for u in 0..u_count {
        let st = u * STATES_PER_UNIT;
        delta[[0, st]] = model.loop_weights[u].ln() + logb[[0, st]];
    }
    for t in 1..n {
        // Best exiting unit is shared across all destination units.
        let (mut exit_score, mut exit_src) = (f64::NEG_INFINITY, 0usize);
        for u in 0..u_count {
            let st = u * STATES_PER_UNIT + STATES_PER_UNIT - 1;
            let v = delta[[t - 1, st]] + (1.0 - model.units[u].self_loop[STATES_PER_UNIT - 1]).ln();
            if v > exit_score {
                exit_score = v;
                exit_src = st;
            }
        }
        for (u, unit) in model.units.iter().enumerate() {
            let base = u * STATES_PER_UNIT;
            for si in 0..STATES_PER_UNIT {
                let stay = delta[[t - 1, base + si]] + unit.self_loop[si].ln();
                let (score, src) = if si == 0 {
                    let enter = exit_score + model.loop_weights[u].ln();
                    if stay >= enter {
                        (stay, base)
                    } else {
                        (enter, exit_src)
                    }
                } else {
                    let from_prev =
                        delta[[t - 1, base + si - 1]] + (1.0 - unit.self_loop[si - 1]).ln();
                    if stay >= from_prev {
                        (stay, base + si)
                    } else {
                        (from_prev, base + si - 1)
                    }
                };
                delta[[t, base + si]] = score + logb[[t, base + si]];
                back[[t, base + si]] = src as u32;
            }
        }
    }
    let mut best_state = 0usize;
    let mut best = f64::NEG_INFINITY;
    for si in 0..s {
        if delta[[n - 1, si]] > best {
            best = delta[[n - 1, si]];
            best_state = si;
        }
    }
    let mut states = vec![0usize; n];
    states[n - 1] = best_state;
    for t in (1..n).rev() {
        states[t - 1] = back[[t, states[t]]] as usize;
    }
    let units: Vec<usize> = states.iter().map(|&s| s / STATES_PER_UNIT).collect();
    Ok(UnitTranscript::from_frame_units(
        x.doc_id.clone(),
        &units,
        x.frame_period,
    ))
}

/// Best path log probability, for oracle comparisons.
pub fn viterbi_score(model: &PhoneLoopModel, x: &FeatureMatrix) -> Result<f64> {
    model.check_features(x)?;
    let logb = model.log_emissions(x);
    let n = x.num_frames();
    let alpha = forward_max(model, &logb);
    Ok((0..alpha.ncols())
        .map(|s| alpha[[n - 1, s]])
        .fold(f64::NEG_INFINITY, f64::max))
}

fn forward_max(model: &PhoneLoopModel, logb: &Array2<f64>) -> Array2<f64> {
    let n = logb.nrows();
    let u_count = model.num_units();
    let s = model.num_states();
    let mut delta = Array2::from_elem((n, s), f64::NEG_INFINITY);
    for u in 0..u_count {
        let st = u * STATES_PER_UNIT;
        delta[[0, st]] = model.loop_weights[u].ln() + logb[[0, st]];
    }
    for t in 1..n {
        let exit = (0..u_count)
            .map(|u| {
                let st = u * STATES_PER_UNIT + STATES_PER_UNIT - 1;
                delta[[t - 1, st]] + (1.0 - model.units[u].self_loop[STATES_PER_UNIT - 1]).ln()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        for (u, unit) in model.units.iter().enumerate() {
            let base = u * STATES_PER_UNIT;
            for si in 0..STATES_PER_UNIT {
                let stay = delta[[t - 1, base + si]] + unit.self_loop[si].ln();
                let incoming = if si == 0 {
                    stay.max(exit + model.loop_weights[u].ln())
                } else {
                    stay.max(delta[[t - 1, base + si - 1]] + (1.0 - unit.self_loop[si - 1]).ln())
                };
                delta[[t, base + si]] = incoming + logb[[t, base + si]];
            }
        }
    }
    delta
}

/// Writes transcripts as TSV rows `<doc-id>\t<unit-id>\t<start>\t<end>`.
pub fn write_transcripts(path: &Path, transcripts: &[UnitTranscript]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in transcripts {
        for seg in &t.segments {
            writeln!(w, "{}\t{}\t{}\t{}", t.doc_id, seg.unit, seg.start, seg.end)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads transcripts written by [`write_transcripts`]. The frame period is
/// not stored in the file and must be supplied.
pub fn load_transcripts(path: &Path, frame_period: f64) -> Result<Vec<UnitTranscript>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut docs: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
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
        let unit: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad unit id `{}`", fields[1])))?;
        let start: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad start frame `{}`", fields[2])))?;
        let end: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad end frame `{}`", fields[3])))?;
        docs.entry(fields[0].to_string())
            .or_default()
            .push(Segment { unit, start, end });
    }
    let mut out = Vec::with_capacity(docs.len());
    for (doc_id, mut segments) in docs {
        segments.sort_by_key(|s| s.start);
        let t = UnitTranscript {
            doc_id,
            segments,
            frame_period,
        };
        t.validate()
            .map_err(|e| Error::format("unit transcript", e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureKind;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_state(dim: usize, mean: f64, var: f64) -> GmmState {
        GmmState {
            means: Array2::from_elem((GAUSSIANS_PER_STATE, dim), mean),
            vars: Array2::from_elem((GAUSSIANS_PER_STATE, dim), var),
            weights: Array1::from_elem(GAUSSIANS_PER_STATE, 0.25),
        }
    }

    fn random_model(u: usize, dim: usize, rng: &mut ChaCha8Rng) -> PhoneLoopModel {
        let units = (0..u)
            .map(|unit_id| HmmUnitParams {
                unit_id,
                states: (0..STATES_PER_UNIT)
                    .map(|_| GmmState {
                        means: Array2::from_shape_fn((GAUSSIANS_PER_STATE, dim), |_| {
                            rng.random_range(-2.0..2.0)
                        }),
                        vars: Array2::from_shape_fn((GAUSSIANS_PER_STATE, dim), |_| {
                            rng.random_range(0.3..2.0)
                        }),
                        weights: {
                            let raw: Vec<f64> =
                                (0..GAUSSIANS_PER_STATE).map(|_| rng.random_range(0.1..1.0)).collect();
                            let s: f64 = raw.iter().sum();
                            Array1::from_iter(raw.into_iter().map(|v| v / s))
                        },
                    })
                    .collect(),
                self_loop: (0..STATES_PER_UNIT).map(|_| rng.random_range(0.2..0.8)).collect(),
            })
            .collect();
        let raw: Vec<f64> = (0..u).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        PhoneLoopModel::new(units, Array1::from_iter(raw.into_iter().map(|v| v / s))).unwrap()
    }

    fn doc(values: Vec<f32>, dim: usize) -> FeatureMatrix {
        let n = values.len() / dim;
        FeatureMatrix::new(
            "t",
            Array2::from_shape_vec((n, dim), values).unwrap(),
            0.01,
            FeatureKind::Mfcc,
        )
        .unwrap()
    }

    /// Enumerates all transition-feasible state paths by DFS, accumulating
    /// either the log path sum or the best path score.
    fn brute_force(model: &PhoneLoopModel, x: &FeatureMatrix, max: bool) -> f64 {
        let logb = model.log_emissions(x);
        let n = x.num_frames();
        let u = model.num_units();
        struct Dfs<'a> {
            model: &'a PhoneLoopModel,
            logb: &'a Array2<f64>,
            n: usize,
            u: usize,
            max: bool,
            acc: f64,
        }
        impl Dfs<'_> {
            fn successors(&self, s: usize) -> Vec<(usize, f64)> {
                let unit = s / STATES_PER_UNIT;
                let si = s % STATES_PER_UNIT;
                let stay = self.model.units[unit].self_loop[si];
                let mut out = vec![(s, stay.ln())];
                if si + 1 < STATES_PER_UNIT {
                    out.push((s + 1, (1.0 - stay).ln()));
                } else {
                    for u2 in 0..self.u {
                        out.push((
                            u2 * STATES_PER_UNIT,
                            (1.0 - stay).ln() + self.model.loop_weights[u2].ln(),
                        ));
                    }
                }
                out
            }
            fn go(&mut self, t: usize, s: usize, logp: f64) {
                let logp = logp + self.logb[[t, s]];
                if t + 1 == self.n {
                    self.acc = if self.max {
                        self.acc.max(logp)
                    } else {
                        logsumexp2(self.acc, logp)
                    };
                    return;
                }
                for (s2, ltrans) in self.successors(s) {
                    self.go(t + 1, s2, logp + ltrans);
                }
            }
        }
        let mut dfs = Dfs {
            model,
            logb: &logb,
            n,
            u,
            max,
            acc: f64::NEG_INFINITY,
        };
        for unit in 0..u {
            dfs.go(0, unit * STATES_PER_UNIT, model.loop_weights[unit].ln());
        }
        dfs.acc
    }

    #[test]
    fn single_gaussian_zero_frame_closed_form() {
        // One unit whose first state is N(0, 1) in one dimension; a single
        // zero frame has log-likelihood -0.5*ln(2*pi).
        let unit = HmmUnitParams {
            unit_id: 0,
            states: vec![
                uniform_state(1, 0.0, 1.0),
                uniform_state(1, 0.0, 1.0),
                uniform_state(1, 0.0, 1.0),
            ],
            self_loop: vec![0.5; 3],
        };
        let model = PhoneLoopModel::new(vec![unit], Array1::from(vec![1.0])).unwrap();
        let x = doc(vec![0.0], 1);
        let ll = loglik(&model, &x).unwrap();
        assert_abs_diff_eq!(ll, -0.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn appending_frames_never_increases_loglik() {
        // With every emission density < 1 the path sum shrinks per frame.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(2, 2, &mut rng);
        let mut values = Vec::new();
        let mut prev = f64::INFINITY;
        for _ in 0..12 {
            values.extend([rng.random_range(-3.0f32..3.0), rng.random_range(-3.0f32..3.0)]);
            let ll = loglik(&model, &doc(values.clone(), 2)).unwrap();
            assert!(ll <= prev + 1e-12, "loglik rose from {prev} to {ll}");
            prev = ll;
        }
    }

    #[test]
    fn forward_matches_brute_force_path_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let u = 1 + (trial % 3);
            let n = 1 + (trial % 8);
            let model = random_model(u, 2, &mut rng);
            let values: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = doc(values, 2);
            let fast = loglik(&model, &x).unwrap();
            let slow = brute_force(&model, &x, false);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-8);
        }
    }

    #[test]
    fn viterbi_matches_brute_force_best_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..20 {
            let u = 1 + (trial % 3);
            let n = 1 + (trial % 8);
            let model = random_model(u, 2, &mut rng);
            let values: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = doc(values, 2);
            let fast = viterbi_score(&model, &x).unwrap();
            let slow = brute_force(&model, &x, true);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-8);
        }
    }

    #[test]
    fn single_unit_decodes_to_single_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(1, 2, &mut rng);
        let values: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = viterbi_label(&model, &doc(values, 2)).unwrap();
        assert_eq!(t.segments.len(), 1);
        assert_eq!(t.segments[0], Segment { unit: 0, start: 0, end: 10 });
    }

    #[test]
    fn transcript_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let t = UnitTranscript::from_frame_units("d1", &[1, 1, 2, 2, 2, 0], 0.01);
        assert_eq!(t.segments.len(), 3);
        write_transcripts(&path, std::slice::from_ref(&t)).unwrap();
        let back = load_transcripts(&path, 0.01).unwrap();
        assert_eq!(back, vec![t]);

        std::fs::write(&path, "d1\t4\t0\t3\nd1\t5\t4\t6\n").unwrap();
        assert!(load_transcripts(&path, 0.01).is_err(), "gap must be rejected");
    }

    #[test]
    fn frame_units_round_trip() {
        let units = vec![0, 0, 3, 3, 3, 1, 0];
        let t = UnitTranscript::from_frame_units("d", &units, 0.02);
        assert_eq!(t.frame_units(), units);
        assert_eq!(t.num_frames(), 7);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(1, 3, &mut rng);
        let x = doc(vec![0.0, 0.0], 2);
        assert!(loglik(&model, &x).is_err());
        assert!(viterbi_label(&model, &x).is_err());
    }
}
