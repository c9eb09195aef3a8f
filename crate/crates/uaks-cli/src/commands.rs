//! Implementations behind the subcommands; the pipeline driver calls these
//! directly. Every artifact is written to a temporary name and renamed on
//! success so failures never leave half-written files in place.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use uaks_core::aud::{
    build_subspace, em_train_from, em_train_phone_loop, load_hyper_subspace, load_phone_loop,
    load_transcripts, realize_unit, save_phone_loop, viterbi_label, write_transcripts, EmConfig,
    LanguageEmbedding, PhoneLoopModel, SupervectorLayout, UnitEmbedding,
};
use uaks_core::corpus::{
    build_query_set, enumerate_ngrams, load_occurrences, load_queries, synth_corpus,
    write_alignments, write_feature_matrix, write_occurrences, write_queries, Alphabet,
    SynthConfig, WORD_BOUNDARY,
};
use uaks_core::eval::{atwv, bootstrap_ci, load_frame_labels, mtwv_sweep, nmi, TwvConfig};
use uaks_core::model::{init_params, load_checkpoint, save_checkpoint, transfer_for_finetune};
use uaks_core::pseudo::{build_pretrain_index, load_pretrain_index, write_pretrain_index};
use uaks_core::search::{load_hits, search_corpus, write_hits, SearchConfig};
use uaks_core::train::{finetune as run_finetune, pretrain as run_pretrain, write_trace};

use crate::config::PipelineConfig;
use crate::manifest::Manifest;

/// Runs `write` against a temporary sibling path, then renames over the
/// final path.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

pub fn cmd_synth(cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out_dir.join("feats"))?;
    let synth_cfg = SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let corpus = synth_corpus(&synth_cfg)?;
    let mut feature_files = Vec::new();
    for doc in &corpus.features {
        let rel = PathBuf::from("feats").join(format!("{}.feat", doc.doc_id));
        write_atomic(&out_dir.join(&rel), |tmp| {
            Ok(write_feature_matrix(tmp, doc)?)
        })?;
        feature_files.push(rel);
    }
    write_atomic(&out_dir.join("alignments.ctm"), |tmp| {
        Ok(write_alignments(tmp, &corpus.alignments)?)
    })?;
    // Frame-level phone transcripts in the unit-transcript format.
    let phone_transcripts: Vec<_> = corpus
        .features
        .iter()
        .zip(&corpus.phone_frames)
        .map(|(doc, frames)| {
            let units: Vec<usize> = frames.iter().map(|&p| p as usize).collect();
            uaks_core::aud::UnitTranscript::from_frame_units(
                doc.doc_id.clone(),
                &units,
                doc.frame_period,
            )
        })
        .collect();
    write_atomic(&out_dir.join("phones.tsv"), |tmp| {
        Ok(write_transcripts(tmp, &phone_transcripts)?)
    })?;
    let manifest = crate::manifest::manifest_for_features(
        &corpus.features,
        &feature_files,
        Some(Path::new("alignments.ctm")),
    );
    write_atomic(&out_dir.join("manifest.json"), |tmp| manifest.write(tmp))?;
    Ok(json!({
        "docs": corpus.features.len(),
        "total_duration": manifest.total_duration,
        "lexicon": corpus.lexicon.len(),
        "manifest": out_dir.join("manifest.json"),
    }))
}

pub fn cmd_prepare(
    manifest_path: &Path,
    orders: &[usize],
    count: usize,
    seed: u64,
    queries_out: &Path,
    refs_out: &Path,
) -> Result<serde_json::Value> {
    let (manifest, base) = Manifest::load(manifest_path)?;
    let alignments = manifest.load_alignments(&base)?;
    let qs = build_query_set(&alignments, orders, count, seed)?;
    write_atomic(queries_out, |tmp| Ok(write_queries(tmp, &qs.queries)?))?;
    write_atomic(refs_out, |tmp| Ok(write_occurrences(tmp, &qs.occurrences)?))?;
    Ok(json!({
        "queries": qs.queries.len(),
        "occurrences": qs.occurrences.len(),
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_aud_train(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    units: Option<usize>,
    iters: Option<usize>,
    seed: u64,
    hyper_subspace: Option<&Path>,
    unit_embed_dim: usize,
    out: &Path,
) -> Result<serde_json::Value> {
    let (manifest, base) = Manifest::load(manifest_path)?;
    let features = manifest.load_features(&base)?;
    let em_cfg = EmConfig {
        units: units.unwrap_or(cfg.aud.units),
        iters: iters.unwrap_or(cfg.aud.iters),
        seed,
        ..cfg.aud.clone()
    };
    let outcome = match hyper_subspace {
        None => em_train_phone_loop(&features, &em_cfg)?,
        Some(hsub_path) => {
            // Desk-scale subspace initialization: zero language embedding,
            // seeded random unit embeddings, then EM refinement.
            let hyper = load_hyper_subspace(hsub_path)?;
            let dim = features[0].dim();
            let layout = SupervectorLayout::new(dim);
            if hyper.p() != layout.supervector_len() {
                bail!(
                    "hyper-subspace supervector length {} does not match features of dim {dim} (expected {})",
                    hyper.p(),
                    layout.supervector_len()
                );
            }
            if hyper.e() != unit_embed_dim {
                bail!(
                    "hyper-subspace embedding dim {} does not match --unit-embed-dim {unit_embed_dim}",
                    hyper.e()
                );
            }
            let alpha = LanguageEmbedding(ndarray::Array1::zeros(hyper.k()));
            let subspace = build_subspace(&hyper, &alpha)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let units_params = (0..em_cfg.units)
                .map(|u| {
                    let eta = UnitEmbedding(ndarray::Array1::from_shape_fn(unit_embed_dim, |_| {
                        rng.random_range(-1.0..1.0)
                    }));
                    Ok(realize_unit(&subspace, &eta, &layout, u)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let init = PhoneLoopModel::new(
                units_params,
                ndarray::Array1::from_elem(em_cfg.units, 1.0 / em_cfg.units as f64),
            )?;
            em_train_from(init, &features, &em_cfg)?
        }
    };
    write_atomic(out, |tmp| Ok(save_phone_loop(tmp, &outcome.model)?))?;
    Ok(json!({
        "units": outcome.model.num_units(),
        "loglik_history": outcome.loglik_history,
        "model": out,
    }))
}

pub fn cmd_aud_label(
    model_path: &Path,
    manifest_path: &Path,
    out: &Path,
) -> Result<serde_json::Value> {
    let model = load_phone_loop(model_path)?;
    let (manifest, base) = Manifest::load(manifest_path)?;
    let features = manifest.load_features(&base)?;
    let transcripts = features
        .par_iter()
        .map(|doc| Ok(viterbi_label(&model, doc)?))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(out, |tmp| Ok(write_transcripts(tmp, &transcripts)?))?;
    let segments: usize = transcripts.iter().map(|t| t.segments.len()).sum();
    Ok(json!({ "docs": transcripts.len(), "segments": segments }))
}

pub fn cmd_pseudo(
    cfg: &PipelineConfig,
    transcripts_path: &Path,
    manifest_path: &Path,
    seed: u64,
    out_index: &Path,
    out_occurrences: &Path,
) -> Result<serde_json::Value> {
    let (manifest, _) = Manifest::load(manifest_path)?;
    let transcripts = load_transcripts(transcripts_path, manifest.frame_period)?;
    let pseudo_cfg = uaks_core::pseudo::PseudoConfig {
        seed,
        ..cfg.pseudo.clone()
    };
    let index = build_pretrain_index(&transcripts, &pseudo_cfg)?;
    write_atomic(out_index, |tmp_index| {
        write_atomic(out_occurrences, |tmp_occ| {
            Ok(write_pretrain_index(tmp_index, tmp_occ, &index)?)
        })
    })?;
    Ok(json!({
        "pseudo_words": index.pseudo_words.len(),
        "occurrences": index.num_occurrences(),
        "units": index.alphabet.len() - 1,
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_pretrain(
    cfg: &PipelineConfig,
    index_path: &Path,
    occurrences_path: &Path,
    manifest_path: &Path,
    seed: u64,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<serde_json::Value> {
    let index = load_pretrain_index(index_path, occurrences_path)?;
    let (manifest, base) = Manifest::load(manifest_path)?;
    let features = manifest.load_features(&base)?;
    let arch = cfg.arch.to_arch(features[0].dim())?;
    let outcome = run_pretrain(&index, &features, &cfg.loss, &cfg.pretrain, &arch, seed)?;
    write_atomic(out, |tmp| Ok(save_checkpoint(tmp, &outcome.params)?))?;
    if let Some(trace) = trace_out {
        write_atomic(trace, |tmp| Ok(write_trace(tmp, &outcome.trace)?))?;
    }
    let final_loss = outcome.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(json!({
        "steps": outcome.trace.len(),
        "final_loss": final_loss,
        "checkpoint": out,
    }))
}

/// Grapheme alphabet of a transcribed corpus: every character of every
/// aligned token plus the word-boundary token.
fn grapheme_alphabet(alignments: &[uaks_core::corpus::WordAlignment]) -> Result<Alphabet> {
    let mut set = BTreeSet::new();
    for ali in alignments {
        for e in &ali.entries {
            for ch in e.token.chars() {
                set.insert(ch.to_string());
            }
        }
    }
    set.insert(WORD_BOUNDARY.to_string());
    Ok(Alphabet::new(set)?)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    cfg: &PipelineConfig,
    init_ckpt: Option<&Path>,
    manifest_path: &Path,
    queries_path: Option<&Path>,
    refs_path: Option<&Path>,
    seed: u64,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<serde_json::Value> {
    let (manifest, base) = Manifest::load(manifest_path)?;
    let features = manifest.load_features(&base)?;
    let alignments = manifest.load_alignments(&base)?;
    let alphabet = grapheme_alphabet(&alignments)?;

    let (queries, occurrences) = match (queries_path, refs_path) {
        (Some(q), Some(r)) => (load_queries(q)?, load_occurrences(r)?),
        (None, None) => {
            // The training pool is every unigram/bigram/trigram of the
            // transcribed data.
            let qs = enumerate_ngrams(&alignments, &cfg.queries.orders)?;
            (qs.queries, qs.occurrences)
        }
        _ => bail!("--queries and --refs must be given together"),
    };

    let init = match init_ckpt {
        Some(path) => {
            let pretrained = load_checkpoint(path)?;
            transfer_for_finetune(&pretrained, &alphabet, seed)?
        }
        None => {
            let arch = cfg.arch.to_arch(features[0].dim())?;
            init_params(&alphabet, &arch, seed)?
        }
    };
    let outcome = run_finetune(
        &init,
        &queries,
        &occurrences,
        &features,
        &cfg.loss,
        &cfg.finetune,
        seed,
    )?;
    write_atomic(out, |tmp| Ok(save_checkpoint(tmp, &outcome.params)?))?;
    if let Some(trace) = trace_out {
        write_atomic(trace, |tmp| Ok(write_trace(tmp, &outcome.trace)?))?;
    }
    Ok(json!({
        "epochs": outcome.epochs_run,
        "best_val_loss": outcome.best_val_loss,
        "queries": queries.len(),
        "checkpoint": out,
    }))
}

pub fn cmd_search(
    cfg: &PipelineConfig,
    ckpt: &Path,
    queries_path: &Path,
    manifest_path: &Path,
    top_k: Option<usize>,
    out: &Path,
) -> Result<serde_json::Value> {
    let params = load_checkpoint(ckpt)?;
    let queries = load_queries(queries_path)?;
    let (manifest, base) = Manifest::load(manifest_path)?;
    let features = manifest.load_features(&base)?;
    let search_cfg = SearchConfig {
        top_k: top_k.or(cfg.search.top_k),
        beta: cfg.search.beta,
    };
    let hits = search_corpus(&params, &queries, &features, &search_cfg)?;
    write_atomic(out, |tmp| Ok(write_hits(tmp, &hits)?))?;
    Ok(json!({
        "queries": queries.len(),
        "hits": hits.num_hits(),
        "duration": hits.total_duration,
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_score(
    cfg: &PipelineConfig,
    hits_path: &Path,
    refs_path: &Path,
    duration: Option<f64>,
    beta: Option<f64>,
    threshold: Option<f64>,
    sweep: bool,
    bootstrap: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    let hits = load_hits(hits_path)?;
    let refs = load_occurrences(refs_path)?;
    let total_duration = duration.unwrap_or(hits.total_duration);
    if !(total_duration > 0.0) {
        bail!("evaluated duration must be positive; pass --duration");
    }
    let twv_cfg = TwvConfig {
        beta: beta.unwrap_or(cfg.eval.beta),
        total_duration,
        match_tolerance: cfg.eval.match_tolerance,
    };
    let mut report = serde_json::Map::new();
    let mut zeta_for_ci = threshold;
    if sweep || threshold.is_none() {
        let m = mtwv_sweep(&hits, &refs, &twv_cfg)?;
        report.insert("mtwv".into(), json!(m.twv));
        report.insert("zeta_star".into(), json!(m.threshold));
        if zeta_for_ci.is_none() {
            zeta_for_ci = Some(m.threshold);
        }
    }
    let zeta = zeta_for_ci.expect("set above");
    let result = atwv(&hits, &refs, zeta, &twv_cfg)?;
    report.insert("atwv".into(), json!(result.twv));
    report.insert("twv".into(), json!(result.twv));
    report.insert("threshold".into(), json!(zeta));
    report.insert("excluded_queries".into(), json!(result.excluded_queries));
    let per_query: serde_json::Map<String, serde_json::Value> = result
        .per_query
        .iter()
        .map(|(q, c)| {
            (
                q.clone(),
                json!({"p_miss": c.p_miss, "p_fa": c.p_fa, "n_true": c.n_true}),
            )
        })
        .collect();
    report.insert("per_query".into(), per_query.into());
    if let Some(b) = bootstrap {
        let ci = bootstrap_ci(&hits, &refs, zeta, b, seed, &twv_cfg)?;
        report.insert(
            "ci".into(),
            json!({"lower": ci.lower, "upper": ci.upper, "resamples": ci.resamples}),
        );
    }
    let value = serde_json::Value::Object(report);
    if let Some(path) = out {
        write_atomic(path, |tmp| {
            Ok(std::fs::write(tmp, serde_json::to_string_pretty(&value)?)?)
        })?;
    }
    Ok(value)
}

pub fn cmd_nmi(units_path: &Path, phones_path: &Path) -> Result<serde_json::Value> {
    let units = load_frame_labels(units_path)?;
    let phones = load_frame_labels(phones_path)?;
    let unit_docs: BTreeSet<&String> = units.keys().collect();
    let phone_docs: BTreeSet<&String> = phones.keys().collect();
    if unit_docs != phone_docs {
        bail!(
            "document sets differ: {} unit docs vs {} phone docs",
            unit_docs.len(),
            phone_docs.len()
        );
    }
    let p: Vec<Vec<String>> = phones.values().cloned().collect();
    let u: Vec<Vec<String>> = units.values().cloned().collect();
    let r = nmi(&p, &u)?;
    Ok(json!({
        "nmi": r.nmi,
        "I": r.mutual_information,
        "H_P": r.entropy_ref,
        "H_U": r.entropy_units,
    }))
}

