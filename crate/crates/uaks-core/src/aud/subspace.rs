//! Hyper-subspace and subspace construction of unit HMM parameters.
//!
//! A unit is realized from a low-dimensional embedding eta as
//! theta = g(W eta + b), where the subspace (W, b) is itself a linear
//! combination of hyper-subspace templates: W = M_0 + sum_k alpha_k M_k,
//! b = m_0 + sum_k alpha_k m_k. The map g is identity on mean coordinates,
//! exp on log-variance coordinates and a per-state softmax on the mixture
//! weight logits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use super::hmm::{GmmState, HmmUnitParams};
use crate::error::{Error, Result};

/// Language-agnostic template matrices/vectors spanning the hyper-subspace.
/// Index 0 holds M_0 / m_0; indices 1..=K the K templates.
#[derive(Debug, Clone)]
pub struct HyperSubspace {
    mats: Vec<Array2<f64>>,
    vecs: Vec<Array1<f64>>,
}

impl HyperSubspace {
    pub fn new(mats: Vec<Array2<f64>>, vecs: Vec<Array1<f64>>) -> Result<Self> {
        if mats.is_empty() || vecs.is_empty() {
            return Err(Error::invalid("hyper-subspace needs at least M_0 and m_0"));
        }
        if mats.len() != vecs.len() {
            return Err(Error::dims(
                "hyper-subspace template counts",
                mats.len(),
                vecs.len(),
            ));
        }
        let (p, e) = (mats[0].nrows(), mats[0].ncols());
        for m in &mats {
            if m.nrows() != p || m.ncols() != e {
                return Err(Error::dims(
                    "hyper-subspace template matrix",
                    format!("{p}x{e}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        for v in &vecs {
            if v.len() != p {
                return Err(Error::dims("hyper-subspace template vector", p, v.len()));
            }
        }
        Ok(HyperSubspace { mats, vecs })
    }

    /// Number of templates K (excluding M_0 / m_0).
    pub fn k(&self) -> usize {
        self.mats.len() - 1
    }

    /// Supervector dimension P.
    pub fn p(&self) -> usize {
        self.mats[0].nrows()
    }

    /// Unit embedding dimension E.
    pub fn e(&self) -> usize {
        self.mats[0].ncols()
    }

    /// Seeded random hyper-subspace at desk scale, scaled so realized
    /// supervectors stay in a numerically comfortable range.
    pub fn random(k: usize, layout: &SupervectorLayout, e: usize, rng: &mut impl Rng) -> Self {
        let p = layout.supervector_len();
        let scale = 1.0 / (e as f64).sqrt();
        let sample =
            |rng: &mut dyn rand::RngCore| -> f64 { rng.random_range(-1.0..1.0) };
        let mats = (0..=k)
            .map(|_| Array2::from_shape_fn((p, e), |_| scale * sample(rng)))
            .collect();
        let vecs = (0..=k)
            .map(|_| Array1::from_shape_fn(p, |_| 0.1 * sample(rng)))
            .collect();
        HyperSubspace { mats, vecs }
    }
}

/// Language embedding alpha, length K.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEmbedding(pub Array1<f64>);

/// Unit embedding eta, length E.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(pub Array1<f64>);

/// A realized language subspace: supervector = W eta + b.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// W = M_0 + sum_k alpha_k M_k and b = m_0 + sum_k alpha_k m_k.
pub fn build_subspace(hyper: &HyperSubspace, alpha: &LanguageEmbedding) -> Result<Subspace> {
    if alpha.0.len() != hyper.k() {
        return Err(Error::dims("language embedding", hyper.k(), alpha.0.len()));
    }
    if alpha.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("language embedding must be finite"));
    }
    let mut w = hyper.mats[0].clone();
    let mut b = hyper.vecs[0].clone();
    for (k, &a) in alpha.0.iter().enumerate() {
        w.scaled_add(a, &hyper.mats[k + 1]);
        b.scaled_add(a, &hyper.vecs[k + 1]);
    }
    Ok(Subspace { w, b })
}

/// Coordinate layout of a unit supervector: all Gaussian means
/// (state-major), then all log variances in the same order, then the
/// per-state mixture weight logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervectorLayout {
    pub n_states: usize,
    pub n_gauss: usize,
    pub dim: usize,
}

impl SupervectorLayout {
    pub fn new(dim: usize) -> Self {
        SupervectorLayout {
            n_states: 3,
            n_gauss: 4,
            dim,
        }
    }

    /// Total supervector length P = 2*S*G*D + S*G.
    pub fn supervector_len(&self) -> usize {
        let sg = self.n_states * self.n_gauss;
        2 * sg * self.dim + sg
    }
}

/// Realizes unit HMM parameters theta = g(W eta + b).
pub fn realize_unit(
    subspace: &Subspace,
    eta: &UnitEmbedding,
    layout: &SupervectorLayout,
    unit_id: usize,
) -> Result<HmmUnitParams> {
    let p = layout.supervector_len();
    if subspace.w.nrows() != p || subspace.b.len() != p {
        return Err(Error::dims(
            "supervector layout",
            p,
            format!("W has {} rows, b has {}", subspace.w.nrows(), subspace.b.len()),
        ));
    }
    if subspace.w.ncols() != eta.0.len() {
        return Err(Error::dims("unit embedding", subspace.w.ncols(), eta.0.len()));
    }
    if eta.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("unit embedding must be finite"));
    }
    let sv = subspace.w.dot(&eta.0) + &subspace.b;

    let (s, g, d) = (layout.n_states, layout.n_gauss, layout.dim);
    let mean_block = 0;
    let var_block = s * g * d;
    let logit_block = 2 * s * g * d;
    let mut states = Vec::with_capacity(s);
    for si in 0..s {
        let mut means = Array2::zeros((g, d));
        let mut vars = Array2::zeros((g, d));
        for gi in 0..g {
            let off = (si * g + gi) * d;
            for di in 0..d {
                means[[gi, di]] = sv[mean_block + off + di];
                vars[[gi, di]] = sv[var_block + off + di].exp();
            }
        }
        // Per-state softmax over the weight logits.
        let logits: Vec<f64> = (0..g).map(|gi| sv[logit_block + si * g + gi]).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let weights = Array1::from_iter(exp.into_iter().map(|v| v / sum));
        states.push(GmmState {
            means,
            vars,
            weights,
        });
    }
    let unit = HmmUnitParams {
        unit_id,
        states,
        self_loop: vec![0.5; s],
    };
    unit.validate()?;
    Ok(unit)
}

const HSUB_MAGIC: &str = "UAKS-HSUB v1";

/// Writes the hyper-subspace container: a text header
/// `UAKS-HSUB v1 k=<K> p=<P> e=<E> dtype=f64le` followed by M_0..M_K
/// (row-major) and m_0..m_K as little-endian f64.
pub fn write_hyper_subspace(path: &Path, hyper: &HyperSubspace) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "{HSUB_MAGIC} k={} p={} e={} dtype=f64le\n",
        hyper.k(),
        hyper.p(),
        hyper.e()
    );
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for m in &hyper.mats {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    for vec in &hyper.vecs {
        for v in vec.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_hyper_subspace(path: &Path) -> Result<HyperSubspace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let header = header.trim_end_matches('\n');
    let mut fields = header.split(' ');
    let magic = format!(
        "{} {}",
        fields.next().unwrap_or(""),
        fields.next().unwrap_or("")
    );
    if magic != HSUB_MAGIC {
        return Err(Error::format(
            "hyper-subspace header",
            format!("expected `{HSUB_MAGIC}`, found `{magic}`"),
        ));
    }
    let mut k = None;
    let mut p = None;
    let mut e = None;
    for field in fields {
        match field.split_once('=') {
            Some(("k", v)) => k = v.parse::<usize>().ok(),
            Some(("p", v)) => p = v.parse::<usize>().ok(),
            Some(("e", v)) => e = v.parse::<usize>().ok(),
            Some(("dtype", "f64le")) => {}
            _ => {
                return Err(Error::format(
                    "hyper-subspace header",
                    format!("bad field `{field}`"),
                ))
            }
        }
    }
    let (k, p, e) = match (k, p, e) {
        (Some(k), Some(p), Some(e)) => (k, p, e),
        _ => return Err(Error::format("hyper-subspace header", "missing k=, p= or e=")),
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|er| Error::io(path, er))?;
    let want = ((k + 1) * (p * e + p)) * 8;
    if payload.len() != want {
        return Err(Error::format(
            "hyper-subspace payload",
            format!("expected {want} bytes, found {}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut mats = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        let m = Array2::from_shape_fn((p, e), |_| values.next().expect("sized above"));
        mats.push(m);
    }
    let mut vecs = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        let v = Array1::from_shape_fn(p, |_| values.next().expect("sized above"));
        vecs.push(v);
    }
    HyperSubspace::new(mats, vecs)
}
