//! The dual-encoder keyword search network: a grapheme/unit query encoder
//! (embedding, bidirectional GRU stack, temporal sum, affine projection)
//! and a BLSTM document encoder with mid-stack temporal downsampling,
//! scored per frame by a sigmoid inner product.

mod checkpoint;
mod nn;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Alphabet, FeatureMatrix, QueryText};
use crate::error::{Error, Result};
use nn::{
    bi_backward, bi_forward, dropout_mask, pair_average, pair_average_backward, AffineParams,
    BiCache, BiRnnParams, RnnDirParams,
};

/// Architecture hyper-parameters of both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub query_hidden: usize,
    pub query_layers: usize,
    pub doc_hidden: usize,
    pub doc_layers: usize,
    pub proj_dim: usize,
    pub dropout: f64,
    /// Downsample after this (1-based) BLSTM layer; 0 disables.
    pub downsample_after: usize,
    pub downsample_factor: usize,
}

impl ArchConfig {
    /// The full-size profile: 32-dim embeddings, 2 BiGRU layers of 256 per
    /// direction, 6 BLSTM layers of 512 per direction, 400-dim projections,
    /// dropout 0.4, x2 downsampling after layer 4.
    pub fn full(feature_dim: usize) -> Self {
        ArchConfig {
            feature_dim,
            embed_dim: 32,
            query_hidden: 256,
            query_layers: 2,
            doc_hidden: 512,
            doc_layers: 6,
            proj_dim: 400,
            dropout: 0.4,
            downsample_after: 4,
            downsample_factor: 2,
        }
    }

    /// Desk-scale profile for tests and synthetic recipes.
    pub fn reduced(feature_dim: usize) -> Self {
        ArchConfig {
            feature_dim,
            embed_dim: 16,
            query_hidden: 32,
            query_layers: 2,
            doc_hidden: 32,
            doc_layers: 3,
            proj_dim: 64,
            dropout: 0.1,
            downsample_after: 2,
            downsample_factor: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feature_dim,
            self.embed_dim,
            self.query_hidden,
            self.query_layers,
            self.doc_hidden,
            self.doc_layers,
            self.proj_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.downsample_after > self.doc_layers {
            return Err(Error::invalid(
                "downsample_after must name an existing document layer",
            ));
        }
        if self.downsample_after > 0 && self.downsample_factor < 2 {
            return Err(Error::invalid("downsample factor must be >= 2 when enabled"));
        }
        Ok(())
    }

    fn downsamples(&self) -> bool {
        self.downsample_after > 0
    }

    /// Encoded length for an N-frame document.
    pub fn encoded_len(&self, n: usize) -> usize {
        if self.downsamples() {
            n.div_ceil(self.downsample_factor)
        } else {
            n
        }
    }

    /// Encoder frame period for a given input frame period.
    pub fn encoder_period(&self, frame_period: f64) -> f64 {
        if self.downsamples() {
            frame_period * self.downsample_factor as f64
        } else {
            frame_period
        }
    }
}

/// All trainable tensors; gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TensorSet {
    pub qembed: Array2<f64>,
    pub qgru: Vec<BiRnnParams>,
    pub qproj: AffineParams,
    pub dlstm: Vec<BiRnnParams>,
    pub dproj: AffineParams,
}

impl TensorSet {
    fn zeros(arch: &ArchConfig, alphabet_len: usize) -> Self {
        let qgru = (0..arch.query_layers)
            .map(|l| {
                let input = if l == 0 {
                    arch.embed_dim
                } else {
                    2 * arch.query_hidden
                };
                BiRnnParams {
                    fwd: RnnDirParams::zeros(3, arch.query_hidden, input),
                    bwd: RnnDirParams::zeros(3, arch.query_hidden, input),
                }
            })
            .collect();
        let dlstm = (0..arch.doc_layers)
            .map(|l| {
                let input = if l == 0 {
                    arch.feature_dim
                } else {
                    2 * arch.doc_hidden
                };
                BiRnnParams {
                    fwd: RnnDirParams::zeros(4, arch.doc_hidden, input),
                    bwd: RnnDirParams::zeros(4, arch.doc_hidden, input),
                }
            })
            .collect();
        TensorSet {
            qembed: Array2::zeros((alphabet_len, arch.embed_dim)),
            qgru,
            qproj: AffineParams::zeros(arch.proj_dim, 2 * arch.query_hidden),
            dlstm,
            dproj: AffineParams::zeros(arch.proj_dim, 2 * arch.doc_hidden),
        }
    }

    /// Flat mutable views over every tensor, in a fixed order shared with
    /// [`TensorSet::flat`] and the checkpoint format.
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.qembed.as_slice_mut().expect("standard layout"));
        for layer in &mut self.qgru {
            for dir in [&mut layer.fwd, &mut layer.bwd] {
                out.push(dir.w_ih.as_slice_mut().expect("standard layout"));
                out.push(dir.w_hh.as_slice_mut().expect("standard layout"));
                out.push(dir.b_ih.as_slice_mut().expect("standard layout"));
                out.push(dir.b_hh.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.qproj.w.as_slice_mut().expect("standard layout"));
        out.push(self.qproj.b.as_slice_mut().expect("standard layout"));
        for layer in &mut self.dlstm {
            for dir in [&mut layer.fwd, &mut layer.bwd] {
                out.push(dir.w_ih.as_slice_mut().expect("standard layout"));
                out.push(dir.w_hh.as_slice_mut().expect("standard layout"));
                out.push(dir.b_ih.as_slice_mut().expect("standard layout"));
                out.push(dir.b_hh.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.dproj.w.as_slice_mut().expect("standard layout"));
        out.push(self.dproj.b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.qembed.as_slice().expect("standard layout"));
        for layer in &self.qgru {
            for dir in [&layer.fwd, &layer.bwd] {
                out.push(dir.w_ih.as_slice().expect("standard layout"));
                out.push(dir.w_hh.as_slice().expect("standard layout"));
                out.push(dir.b_ih.as_slice().expect("standard layout"));
                out.push(dir.b_hh.as_slice().expect("standard layout"));
            }
        }
        out.push(self.qproj.w.as_slice().expect("standard layout"));
        out.push(self.qproj.b.as_slice().expect("standard layout"));
        for layer in &self.dlstm {
            for dir in [&layer.fwd, &layer.bwd] {
                out.push(dir.w_ih.as_slice().expect("standard layout"));
                out.push(dir.w_hh.as_slice().expect("standard layout"));
                out.push(dir.b_ih.as_slice().expect("standard layout"));
                out.push(dir.b_hh.as_slice().expect("standard layout"));
            }
        }
        out.push(self.dproj.w.as_slice().expect("standard layout"));
        out.push(self.dproj.b.as_slice().expect("standard layout"));
        out
    }

    /// Tensor names in flat order; `query.` and `doc.` prefixes separate
    /// the two encoders.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["query.embed".to_string()];
        for (l, _) in self.qgru.iter().enumerate() {
            for dir in ["fwd", "bwd"] {
                for t in ["w_ih", "w_hh", "b_ih", "b_hh"] {
                    out.push(format!("query.gru{l}.{dir}.{t}"));
                }
            }
        }
        out.push("query.proj.w".to_string());
        out.push("query.proj.b".to_string());
        for (l, _) in self.dlstm.iter().enumerate() {
            for dir in ["fwd", "bwd"] {
                for t in ["w_ih", "w_hh", "b_ih", "b_hh"] {
                    out.push(format!("doc.lstm{l}.{dir}.{t}"));
                }
            }
        }
        out.push("doc.proj.w".to_string());
        out.push("doc.proj.b".to_string());
        out
    }
}

/// Trainable model: tensors plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub alphabet: Alphabet,
    pub seed: u64,
    pub(crate) tensors: TensorSet,
}

/// Gradients with the same tensor layout as the parameters.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub(crate) tensors: TensorSet,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            tensors: TensorSet::zeros(&params.arch, params.alphabet.len()),
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) {
        for (a, b) in self
            .tensors
            .flat_mut()
            .into_iter()
            .zip(other.tensors.flat())
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.tensors.flat_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .flat()
            .into_iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat_tensors(&self) -> Vec<&[f64]> {
        self.tensors.flat()
    }

    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.flat_mut()
    }
}

/// Fixed-length query representation e_q.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding(pub Array1<f64>);

/// Per-frame document representation H (encoded length x projection dim).
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEncoding {
    pub h: Array2<f64>,
    pub encoder_frame_period: f64,
}

/// Frame posteriors z_n in the open interval (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector {
    pub z: Vec<f64>,
    pub encoder_frame_period: f64,
}

fn uniform_fill(a: &mut [f64], scale: f64, rng: &mut ChaCha8Rng) {
    for v in a {
        *v = rng.random_range(-scale..scale);
    }
}

/// Deterministic initialization: uniform fan-in scaled weights and zero
/// biases; the padding embedding row stays zero.
pub fn init_params(alphabet: &Alphabet, arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    if alphabet.is_empty() {
        return Err(Error::invalid("alphabet must contain at least one token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = TensorSet::zeros(arch, alphabet.len());
    let escale = 1.0 / (arch.embed_dim as f64).sqrt();
    uniform_fill(
        tensors.qembed.as_slice_mut().expect("standard layout"),
        escale,
        &mut rng,
    );
    tensors.qembed.row_mut(0).fill(0.0);
    for layer in &mut tensors.qgru {
        for dir in [&mut layer.fwd, &mut layer.bwd] {
            let in_scale = 1.0 / (dir.w_ih.ncols() as f64).sqrt();
            let h_scale = 1.0 / (dir.w_hh.ncols() as f64).sqrt();
            uniform_fill(dir.w_ih.as_slice_mut().expect("standard layout"), in_scale, &mut rng);
            uniform_fill(dir.w_hh.as_slice_mut().expect("standard layout"), h_scale, &mut rng);
        }
    }
    let qp_scale = 1.0 / (tensors.qproj.w.ncols() as f64).sqrt();
    uniform_fill(
        tensors.qproj.w.as_slice_mut().expect("standard layout"),
        qp_scale,
        &mut rng,
    );
    for layer in &mut tensors.dlstm {
        for dir in [&mut layer.fwd, &mut layer.bwd] {
            let in_scale = 1.0 / (dir.w_ih.ncols() as f64).sqrt();
            let h_scale = 1.0 / (dir.w_hh.ncols() as f64).sqrt();
            uniform_fill(dir.w_ih.as_slice_mut().expect("standard layout"), in_scale, &mut rng);
            uniform_fill(dir.w_hh.as_slice_mut().expect("standard layout"), h_scale, &mut rng);
        }
    }
    let dp_scale = 1.0 / (tensors.dproj.w.ncols() as f64).sqrt();
    uniform_fill(
        tensors.dproj.w.as_slice_mut().expect("standard layout"),
        dp_scale,
        &mut rng,
    );
    Ok(ModelParams {
        arch: arch.clone(),
        alphabet: alphabet.clone(),
        seed,
        tensors,
    })
}

impl ModelParams {
    /// Named flat views of every tensor, checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        self.tensors
            .names()
            .into_iter()
            .zip(self.tensors.flat())
            .collect()
    }

    /// Flat tensor views in checkpoint order.
    pub fn flat_tensors(&self) -> Vec<&[f64]> {
        self.tensors.flat()
    }

    /// Flat mutable tensor views, for optimizers and finite-difference
    /// diagnostics.
    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.flat_mut()
    }

    /// Zeroes both output projections; every inner product then collapses
    /// to zero and z = 0.5 everywhere.
    pub fn zero_output_projections(&mut self) {
        self.tensors.qproj.w.fill(0.0);
        self.tensors.qproj.b.fill(0.0);
        self.tensors.dproj.w.fill(0.0);
        self.tensors.dproj.b.fill(0.0);
    }

    /// Sets the query projection weights to zero, leaving the bias; e_q is
    /// then exactly the bias vector for any query.
    pub fn zero_query_projection_weights(&mut self) {
        self.tensors.qproj.w.fill(0.0);
    }

    pub fn set_query_projection_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.arch.proj_dim {
            return Err(Error::dims("query projection bias", self.arch.proj_dim, bias.len()));
        }
        for (b, v) in self.tensors.qproj.b.iter_mut().zip(bias) {
            *b = *v;
        }
        Ok(())
    }

    fn token_indices(&self, q: &QueryText) -> Result<Vec<usize>> {
        q.tokens
            .iter()
            .map(|t| {
                self.alphabet
                    .index_of(t)
                    .ok_or_else(|| Error::invalid(format!("unknown token {t:?} in {}", q.query_id)))
            })
            .collect()
    }
}

pub(crate) struct QueryCache {
    embedded: Array2<f64>,
    layer_inputs: Vec<Array2<f64>>,
    layer_caches: Vec<BiCache>,
    summed: Array1<f64>,
    token_indices: Vec<usize>,
}

/// Forward pass of the query encoder with the caches needed for backprop.
pub struct QueryForward {
    pub embedding: QueryEmbedding,
    cache: QueryCache,
}

pub fn forward_query(params: &ModelParams, q: &QueryText) -> Result<QueryForward> {
    let idx = params.token_indices(q)?;
    let embedded = Array2::from_shape_fn((idx.len(), params.arch.embed_dim), |(t, d)| {
        params.tensors.qembed[[idx[t], d]]
    });
    let mut layer_inputs = Vec::with_capacity(params.arch.query_layers);
    let mut layer_caches = Vec::with_capacity(params.arch.query_layers);
    let mut cur = embedded.clone();
    for layer in &params.tensors.qgru {
        let cache = bi_forward(layer, &cur, true);
        let out = cache.output();
        layer_inputs.push(cur);
        layer_caches.push(cache);
        cur = out;
    }
    let summed = cur.sum_axis(Axis(0));
    let e = params.tensors.qproj.w.dot(&summed) + &params.tensors.qproj.b;
    Ok(QueryForward {
        embedding: QueryEmbedding(e),
        cache: QueryCache {
            embedded,
            layer_inputs,
            layer_caches,
            summed,
            token_indices: idx,
        },
    })
}

/// Accumulates query-encoder gradients for an upstream gradient on e_q.
pub fn backward_query(
    params: &ModelParams,
    fwd: &QueryForward,
    d_embedding: &Array1<f64>,
    grads: &mut ModelGrads,
) {
    let c = &fwd.cache;
    grads.tensors.qproj.b += d_embedding;
    let d_emb_col = d_embedding.view().insert_axis(Axis(1));
    let summed_row = c.summed.view().insert_axis(Axis(0));
    grads.tensors.qproj.w += &d_emb_col.dot(&summed_row);
    let d_summed = params.tensors.qproj.w.t().dot(d_embedding);
    // The temporal sum broadcasts its gradient to every position.
    let t_len = c.embedded.nrows();
    let mut dy = Array2::zeros((t_len, d_summed.len()));
    for t in 0..t_len {
        dy.row_mut(t).assign(&d_summed);
    }
    let mut d_cur = dy;
    for l in (0..params.tensors.qgru.len()).rev() {
        d_cur = bi_backward(
            &params.tensors.qgru[l],
            &c.layer_inputs[l],
            &c.layer_caches[l],
            &d_cur,
            &mut grads.tensors.qgru[l],
        );
    }
    for (t, &tok) in c.token_indices.iter().enumerate() {
        let mut row = grads.tensors.qembed.row_mut(tok);
        row += &d_cur.row(t);
    }
}

/// Computes e_q without exposing the cache.
pub fn encode_query(params: &ModelParams, q: &QueryText) -> Result<QueryEmbedding> {
    Ok(forward_query(params, q)?.embedding)
}

struct DocLayerCache {
    input: Array2<f64>,
    cache: BiCache,
    out_len: usize,
    downsampled: bool,
    dropout_mask: Option<Array2<f64>>,
}

pub(crate) struct DocCache {
    layers: Vec<DocLayerCache>,
    proj_in: Array2<f64>,
}

/// Forward pass of the document encoder with caches. Dropout fires only
/// when an RNG is supplied (training mode).
pub struct DocForward {
    pub encoding: DocumentEncoding,
    cache: DocCache,
}

pub fn forward_document(
    params: &ModelParams,
    x: &FeatureMatrix,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<DocForward> {
    if x.dim() != params.arch.feature_dim {
        return Err(Error::dims(
            format!("features of {}", x.doc_id),
            params.arch.feature_dim,
            x.dim(),
        ));
    }
    let n = x.num_frames();
    let mut cur = Array2::from_shape_fn((n, x.dim()), |(t, d)| x.frames[[t, d]] as f64);
    let mut layers = Vec::with_capacity(params.arch.doc_layers);
    for (l, layer) in params.tensors.dlstm.iter().enumerate() {
        let cache = bi_forward(layer, &cur, false);
        let out = cache.output();
        let out_len = out.nrows();
        let mut next = out;
        let downsampled = params.arch.downsamples() && l + 1 == params.arch.downsample_after;
        if downsampled {
            next = pair_average(&next);
        }
        let is_last = l + 1 == params.arch.doc_layers;
        let mask = match (&mut dropout_rng, is_last) {
            (Some(rng), false) if params.arch.dropout > 0.0 => {
                let m = dropout_mask((next.nrows(), next.ncols()), params.arch.dropout, rng);
                next *= &m;
                Some(m)
            }
            _ => None,
        };
        layers.push(DocLayerCache {
            input: cur,
            cache,
            out_len,
            downsampled,
            dropout_mask: mask,
        });
        cur = next;
    }
    let proj_in = cur;
    let h = params.tensors.dproj.forward(&proj_in);
    let enc = DocumentEncoding {
        h,
        encoder_frame_period: params.arch.encoder_period(x.frame_period),
    };
    Ok(DocForward {
        encoding: enc,
        cache: DocCache { layers, proj_in },
    })
}

/// Accumulates document-encoder gradients for an upstream gradient on H.
pub fn backward_document(
    params: &ModelParams,
    fwd: &DocForward,
    d_encoding: &Array2<f64>,
    grads: &mut ModelGrads,
) {
    let c = &fwd.cache;
    let mut d_cur = params
        .tensors
        .dproj
        .backward(&c.proj_in, d_encoding, &mut grads.tensors.dproj);
    for l in (0..c.layers.len()).rev() {
        let layer = &c.layers[l];
        if let Some(mask) = &layer.dropout_mask {
            d_cur *= mask;
        }
        if layer.downsampled {
            d_cur = pair_average_backward(&d_cur, layer.out_len);
        }
        d_cur = bi_backward(
            &params.tensors.dlstm[l],
            &layer.input,
            &layer.cache,
            &d_cur,
            &mut grads.tensors.dlstm[l],
        );
    }
}

/// Encodes a document without exposing the cache. In training mode the
/// dropout stream derives deterministically from the model seed and the
/// document id; the training loop uses its own per-step streams instead.
pub fn encode_document(
    params: &ModelParams,
    x: &FeatureMatrix,
    train_mode: bool,
) -> Result<DocumentEncoding> {
    if train_mode {
        let mut h: u64 = params.seed;
        for b in x.doc_id.bytes() {
            h = h.wrapping_mul(0x100000001b3).wrapping_add(b as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        Ok(forward_document(params, x, Some(&mut rng))?.encoding)
    } else {
        Ok(forward_document(params, x, None)?.encoding)
    }
}

/// z_n = sigmoid(h_n . e_q), clamped into the open interval (0, 1).
pub fn score(enc: &DocumentEncoding, e_q: &QueryEmbedding) -> Result<PosteriorVector> {
    if enc.h.ncols() != e_q.0.len() {
        return Err(Error::dims("scorer dimensions", enc.h.ncols(), e_q.0.len()));
    }
    const EPS: f64 = 1e-12;
    let a = enc.h.dot(&e_q.0);
    let z = a
        .iter()
        .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(EPS, 1.0 - EPS))
        .collect();
    Ok(PosteriorVector {
        z,
        encoder_frame_period: enc.encoder_frame_period,
    })
}

/// Gradients of the scored pair: given dL/dz, returns (dL/dH, dL/de_q)
/// using dz/da = z(1-z).
pub fn score_gradients(
    enc: &DocumentEncoding,
    e_q: &QueryEmbedding,
    z: &[f64],
    dldz: &[f64],
) -> (Array2<f64>, Array1<f64>) {
    let da: Array1<f64> = z
        .iter()
        .zip(dldz)
        .map(|(&z, &d)| d * z * (1.0 - z))
        .collect();
    let da_col = da.view().insert_axis(Axis(1));
    let e_row = e_q.0.view().insert_axis(Axis(0));
    let dh = da_col.dot(&e_row);
    let de = enc.h.t().dot(&da);
    (dh, de)
}

/// Copies the document encoder verbatim and freshly initializes a query
/// encoder over the new alphabet.
pub fn transfer_for_finetune(
    pretrained: &ModelParams,
    new_alphabet: &Alphabet,
    seed: u64,
) -> Result<ModelParams> {
    let mut out = init_params(new_alphabet, &pretrained.arch, seed)?;
    out.tensors.dlstm = pretrained.tensors.dlstm.clone();
    out.tensors.dproj = pretrained.tensors.dproj.clone();
    Ok(out)
}
