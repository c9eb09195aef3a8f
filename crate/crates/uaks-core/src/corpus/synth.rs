//! Deterministic synthetic corpus: a fixed lexicon of "words" over a small
//! phone inventory, template-vector phones, Gaussian frame noise, and exact
//! alignments and frame-level phone transcripts by construction.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AlignmentEntry, FeatureKind, FeatureMatrix, WordAlignment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub lexicon_size: usize,
    /// Phones per word, inclusive range.
    pub word_len: (usize, usize),
    /// Phone inventory size; at most 26 so phones map onto letters.
    pub n_phones: usize,
    pub frames_per_phone: usize,
    pub n_docs: usize,
    /// Words per document.
    pub doc_len: usize,
    pub noise_sigma: f64,
    pub frame_period: f64,
    pub dim: usize,
    /// Minimum pairwise distance between unit-norm phone templates.
    pub template_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lexicon_size: 30,
            word_len: (4, 8),
            n_phones: 12,
            frames_per_phone: 5,
            n_docs: 40,
            doc_len: 20,
            noise_sigma: 0.3,
            frame_period: 0.01,
            dim: 13,
            template_separation: 1.0,
            seed: 0,
        }
    }
}

/// A lexicon word: its written form and its phone sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexWord {
    pub word: String,
    pub phones: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub features: Vec<FeatureMatrix>,
    pub alignments: Vec<WordAlignment>,
    /// Per-document frame-level phone labels, parallel to `features`.
    pub phone_frames: Vec<Vec<u32>>,
    pub lexicon: Vec<LexWord>,
    /// n_phones x dim template vectors.
    pub templates: Array2<f64>,
    pub config: SynthConfig,
}

impl SynthCorpus {
    pub fn total_duration(&self) -> f64 {
        self.features.iter().map(|f| f.duration()).sum()
    }
}

fn phone_letter(p: usize) -> char {
    (b'a' + p as u8) as char
}

/// Generates a seeded synthetic corpus. Each lexicon word is a fixed phone
/// sequence; each phone a fixed unit-norm template vector; documents are
/// word concatenations with per-frame Gaussian noise.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.lexicon_size < 2 {
        return Err(Error::invalid("lexicon size must be >= 2"));
    }
    if config.noise_sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    if config.n_phones < 2 || config.n_phones > 26 {
        return Err(Error::invalid("phone inventory must be in 2..=26"));
    }
    if config.word_len.0 == 0 || config.word_len.0 > config.word_len.1 {
        return Err(Error::invalid("word length range must be 1 <= min <= max"));
    }
    if config.frames_per_phone == 0 || config.n_docs == 0 || config.doc_len == 0 {
        return Err(Error::invalid("frames per phone, docs and doc length must be >= 1"));
    }
    if !(config.frame_period > 0.0) {
        return Err(Error::invalid("frame period must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let templates = sample_templates(&mut rng, config)?;

    // Distinct phone sequences map to distinct written forms.
    let mut lexicon: Vec<LexWord> = Vec::with_capacity(config.lexicon_size);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0usize;
    while lexicon.len() < config.lexicon_size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(
                "cannot sample a distinct lexicon; enlarge the phone inventory or word lengths",
            ));
        }
        let len = rng.random_range(config.word_len.0..=config.word_len.1);
        let phones: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.n_phones)).collect();
        let word: String = phones.iter().map(|&p| phone_letter(p)).collect();
        if seen.insert(word.clone()) {
            lexicon.push(LexWord { word, phones });
        }
    }

    let noise = if config.noise_sigma > 0.0 {
        Some(Normal::new(0.0, config.noise_sigma).expect("sigma checked above"))
    } else {
        None
    };

    let mut features = Vec::with_capacity(config.n_docs);
    let mut alignments = Vec::with_capacity(config.n_docs);
    let mut phone_frames = Vec::with_capacity(config.n_docs);
    for doc_idx in 0..config.n_docs {
        let doc_id = format!("synth{doc_idx:04}");
        let word_ids: Vec<usize> =
            (0..config.doc_len).map(|_| rng.random_range(0..lexicon.len())).collect();
        let n_frames: usize = word_ids
            .iter()
            .map(|&w| lexicon[w].phones.len() * config.frames_per_phone)
            .sum();
        let mut frames = Array2::<f32>::zeros((n_frames, config.dim));
        let mut labels = Vec::with_capacity(n_frames);
        let mut entries = Vec::with_capacity(word_ids.len());
        let mut frame = 0usize;
        for &w in &word_ids {
            let start = frame;
            for &p in &lexicon[w].phones {
                for _ in 0..config.frames_per_phone {
                    for d in 0..config.dim {
                        let mut v = templates[[p, d]];
                        if let Some(n) = &noise {
                            v += n.sample(&mut rng);
                        }
                        frames[[frame, d]] = v as f32;
                    }
                    labels.push(p as u32);
                    frame += 1;
                }
            }
            entries.push(AlignmentEntry {
                token: lexicon[w].word.clone(),
                t_begin: start as f64 * config.frame_period,
                t_end: frame as f64 * config.frame_period,
            });
        }
        features.push(FeatureMatrix::new(
            doc_id.clone(),
            frames,
            config.frame_period,
            FeatureKind::Mfcc,
        )?);
        alignments.push(WordAlignment { doc_id, entries });
        phone_frames.push(labels);
    }

    Ok(SynthCorpus {
        features,
        alignments,
        phone_frames,
        lexicon,
        templates,
        config: config.clone(),
    })
}

fn sample_templates(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Result<Array2<f64>> {
    let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(config.n_phones);
    let mut attempts = 0usize;
    while rows.len() < config.n_phones {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(
                "cannot place separated phone templates; lower template_separation or raise dim",
            ));
        }
        let mut v = Array1::from_shape_fn(config.dim, |_| normal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm < 1e-9 {
            continue;
        }
        v /= norm;
        let ok = rows.iter().all(|r| {
            let d = (&v - r).mapv(|x| x * x).sum().sqrt();
            d >= config.template_separation
        });
        if ok {
            rows.push(v);
        }
    }
    let mut out = Array2::zeros((config.n_phones, config.dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}
