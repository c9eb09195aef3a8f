//! Pretraining and finetuning loops. Exactly one parameter set is mutated
//! by the optimizer; per-item gradients are computed independently and
//! merged in item order, so a run is bit-reproducible for a given seed
//! regardless of thread count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{
    backward_document, backward_query, forward_document, forward_query, init_params, score,
    score_gradients, ArchConfig, ModelGrads, ModelParams,
};
use crate::pseudo::PretrainIndex;
use crate::train::batch::{sample_batch, Batch, SampleIndex};
use crate::train::optim::{Adam, AdamConfig};
use crate::train::{
    cosine_lr, derive_seed, masked_bce, masked_dldz, DecayDecision, FinetuneSchedule, LossConfig,
    PretrainSchedule, StepDecayController,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// CSV trace: `step,lr,loss,val_loss`.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,lr,loss,val_loss").map_err(|e| Error::io(path, e))?;
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.step, r.lr, r.loss, val).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

type DocStore<'a> = BTreeMap<&'a str, &'a FeatureMatrix>;

fn doc_store(features: &[FeatureMatrix]) -> DocStore<'_> {
    features.iter().map(|f| (f.doc_id.as_str(), f)).collect()
}

fn doc_meta(features: &[FeatureMatrix]) -> Vec<(String, usize, f64)> {
    features
        .iter()
        .map(|f| (f.doc_id.clone(), f.num_frames(), f.frame_period))
        .collect()
}

fn label_downsample(arch: &ArchConfig) -> usize {
    if arch.downsample_after > 0 {
        arch.downsample_factor
    } else {
        1
    }
}

/// Objective value and gradients of one batch (Eq.-style sum over queries
/// and their M documents). `dropout_seed` enables training-mode dropout
/// with per-item derived streams.
fn batch_gradients(
    params: &ModelParams,
    index: &SampleIndex,
    batch: &Batch,
    docs: &DocStore,
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelGrads)> {
    let per_item: Vec<Result<(f64, ModelGrads)>> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(item_idx, item)| {
            let q = index.query(item.query_index);
            let qf = forward_query(params, q)?;
            let mut grads = ModelGrads::zeros_like(params);
            let mut d_embedding = ndarray::Array1::<f64>::zeros(params.arch.proj_dim);
            let mut item_loss = 0.0;
            for (doc_idx, (doc_id, labels)) in
                item.doc_ids.iter().zip(&item.labels).enumerate()
            {
                let x = docs.get(doc_id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("document {doc_id} missing from the feature store"))
                })?;
                let df = match dropout_seed {
                    Some(s) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            s,
                            item_idx as u64,
                            doc_idx as u64,
                        ));
                        forward_document(params, x, Some(&mut rng))?
                    }
                    None => forward_document(params, x, None)?,
                };
                let z = score(&df.encoding, &qf.embedding)?;
                if z.z.len() != labels.values.len() {
                    return Err(Error::dims(
                        format!("labels of {doc_id}"),
                        z.z.len(),
                        labels.values.len(),
                    ));
                }
                item_loss += masked_bce(&z.z, &labels.values, cfg);
                let dldz = masked_dldz(&z.z, &labels.values, cfg);
                let (dh, de) = score_gradients(&df.encoding, &qf.embedding, &z.z, &dldz);
                backward_document(params, &df, &dh, &mut grads);
                d_embedding += &de;
            }
            backward_query(params, &qf, &d_embedding, &mut grads);
            Ok((item_loss, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total = ModelGrads::zeros_like(params);
    for r in per_item {
        let (l, g) = r?;
        total_loss += l;
        total.accumulate(&g);
    }
    Ok((total_loss, total))
}

/// Mean per-pair objective over fixed batches, forward only (eval mode).
pub fn eval_loss_mean(
    params: &ModelParams,
    index: &SampleIndex,
    batches: &[Batch],
    docs: &[FeatureMatrix],
    cfg: &LossConfig,
) -> Result<f64> {
    let store = doc_store(docs);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for batch in batches {
        let per_item: Vec<Result<f64>> = batch
            .items
            .par_iter()
            .map(|item| {
                let q = index.query(item.query_index);
                let qf = forward_query(params, q)?;
                let mut item_loss = 0.0;
                for (doc_id, labels) in item.doc_ids.iter().zip(&item.labels) {
                    let x = store.get(doc_id.as_str()).ok_or_else(|| {
                        Error::invalid(format!("document {doc_id} missing from the feature store"))
                    })?;
                    let df = forward_document(params, x, None)?;
                    let z = score(&df.encoding, &qf.embedding)?;
                    item_loss += masked_bce(&z.z, &labels.values, cfg);
                }
                Ok(item_loss)
            })
            .collect();
        for r in per_item {
            total += r?;
        }
        pairs += batch.num_pairs();
    }
    if pairs == 0 {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Adam optimization of the batch objective over pseudo-queries under the
/// cosine schedule. Deterministic under `seed`.
pub fn pretrain(
    index: &PretrainIndex,
    features: &[FeatureMatrix],
    cfg: &LossConfig,
    sched: &PretrainSchedule,
    arch: &ArchConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    sched.validate()?;
    if index.pseudo_words.is_empty() {
        return Err(Error::invalid("pretrain index is empty"));
    }
    let sample_index = SampleIndex::new(index.queries(), &index.occurrences(), doc_meta(features))?;
    let store = doc_store(features);
    let mut params = init_params(&index.alphabet, arch, seed)?;
    let mut adam = Adam::new(&params, AdamConfig::default());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBA7C4, 0));
    let downsample = label_downsample(arch);
    let l_queries = sched.queries_per_step(cfg.m);
    let mut trace = Vec::with_capacity(sched.total_steps);
    for step in 0..sched.total_steps {
        // Rates are evaluated at step+1 so the loop ends exactly at the
        // final rate and never multiplies a batch by the zero warmup rate.
        let lr = cosine_lr(step + 1, sched)?;
        let batch = sample_batch(&sample_index, cfg, l_queries, downsample, &mut batch_rng)?;
        let (loss, mut grads) = batch_gradients(
            &params,
            &sample_index,
            &batch,
            &store,
            cfg,
            Some(derive_seed(seed, 0xD0, step as u64)),
        )?;
        adam.step(&mut params, &mut grads, lr);
        trace.push(TraceRow {
            step: step + 1,
            lr,
            loss,
            val_loss: None,
        });
        if (step + 1) % 50 == 0 || step + 1 == sched.total_steps {
            log::info!("pretrain step {}/{}: loss {loss:.4}", step + 1, sched.total_steps);
        }
    }
    Ok(PretrainOutcome { params, trace })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Finetunes (or trains from scratch) on transcribed queries with the
/// validation-driven step decay: 10% of the queries are held out, the rate
/// halves after `halve_patience` stagnant epochs and training stops after
/// `stop_patience`; the best-validation parameters are returned.
pub fn finetune(
    init: &ModelParams,
    queries: &[crate::corpus::QueryText],
    occurrences: &[crate::corpus::Occurrence],
    features: &[FeatureMatrix],
    cfg: &LossConfig,
    sched: &FinetuneSchedule,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    sched.validate()?;
    if queries.len() < 10 {
        return Err(Error::invalid(format!(
            "finetuning needs at least 10 queries so the validation split is non-empty, got {}",
            queries.len()
        )));
    }
    // Seeded validation split; validation queries leave the training sampler.
    let mut order: Vec<usize> = (0..queries.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5C11F, 0));
        order.shuffle(&mut rng);
    }
    let n_val = ((queries.len() as f64 * sched.validation_fraction).round() as usize).max(1);
    let (val_ids, train_ids) = order.split_at(n_val);
    let train_queries: Vec<_> = train_ids.iter().map(|&i| queries[i].clone()).collect();
    let val_queries: Vec<_> = val_ids.iter().map(|&i| queries[i].clone()).collect();

    let metas = doc_meta(features);
    let train_index = SampleIndex::new(train_queries, occurrences, metas.clone())?;
    let val_index = SampleIndex::new(val_queries, occurrences, metas)?;
    let store = doc_store(features);
    let downsample = label_downsample(&init.arch);
    let l_queries = sched.queries_per_step(cfg.m);
    let steps_per_epoch = train_index.num_queries().div_ceil(l_queries).max(1);

    // Fixed validation batches: every validation query exactly once,
    // documents drawn from a dedicated stream so epochs stay comparable.
    let val_batches: Vec<Batch> = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7A1, 0));
        let mut items = Vec::with_capacity(val_index.num_queries());
        for qi in 0..val_index.num_queries() {
            items.push(val_index.sample_item_for(qi, cfg, downsample, &mut rng)?);
        }
        vec![Batch { items }]
    };

    let mut params = init.clone();
    let mut adam = Adam::new(&params, AdamConfig::default());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF17E, 0));
    let mut controller = StepDecayController::new(sched.halve_patience, sched.stop_patience);
    let mut lr = sched.init_lr;
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut trace = Vec::new();
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..sched.max_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        for step_in_epoch in 0..steps_per_epoch {
            let batch = sample_batch(&train_index, cfg, l_queries, downsample, &mut batch_rng)?;
            epoch_pairs += batch.num_pairs();
            let (loss, mut grads) = batch_gradients(
                &params,
                &train_index,
                &batch,
                &store,
                cfg,
                Some(derive_seed(seed, 0xD1, (epoch * steps_per_epoch + step_in_epoch) as u64)),
            )?;
            adam.step(&mut params, &mut grads, lr);
            epoch_loss += loss;
            global_step += 1;
        }
        let val_loss = eval_loss_mean(&params, &val_index, &val_batches, features, cfg)?;
        epochs_run = epoch + 1;
        trace.push(TraceRow {
            step: global_step,
            lr,
            loss: epoch_loss / epoch_pairs.max(1) as f64,
            val_loss: Some(val_loss),
        });
        log::info!(
            "finetune epoch {epochs_run}: train {:.4}, val {val_loss:.4}, lr {lr:.6}",
            epoch_loss / epoch_pairs.max(1) as f64
        );
        match controller.observe(val_loss) {
            DecayDecision::Improved => {
                best_val = val_loss;
                best_params = params.clone();
            }
            DecayDecision::Continue => {}
            DecayDecision::Halve => lr *= 0.5,
            DecayDecision::Stop => break,
        }
    }
    Ok(FinetuneOutcome {
        params: best_params,
        trace,
        best_val_loss: best_val,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_query_set, synth_corpus, Alphabet, SynthConfig,
    };

    fn tiny_world() -> (crate::corpus::SynthCorpus, crate::corpus::QuerySet) {
        let corpus = synth_corpus(&SynthConfig {
            lexicon_size: 8,
            word_len: (3, 4),
            n_phones: 6,
            frames_per_phone: 3,
            n_docs: 8,
            doc_len: 6,
            noise_sigma: 0.1,
            dim: 5,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap();
        let queries = build_query_set(&corpus.alignments, &[1, 2], 12, 3).unwrap();
        (corpus, queries)
    }

    fn grapheme_alphabet(corpus: &crate::corpus::SynthCorpus) -> Alphabet {
        let mut set = std::collections::BTreeSet::new();
        for w in &corpus.lexicon {
            for ch in w.word.chars() {
                set.insert(ch.to_string());
            }
        }
        set.insert(crate::corpus::WORD_BOUNDARY.to_string());
        Alphabet::new(set).unwrap()
    }

    fn tiny_arch(dim: usize) -> ArchConfig {
        ArchConfig {
            feature_dim: dim,
            embed_dim: 6,
            query_hidden: 6,
            query_layers: 1,
            doc_hidden: 8,
            doc_layers: 2,
            proj_dim: 8,
            dropout: 0.0,
            downsample_after: 1,
            downsample_factor: 2,
        }
    }

    #[test]
    fn single_example_step_decreases_loss_across_seeds() {
        let (corpus, qs) = tiny_world();
        let alphabet = grapheme_alphabet(&corpus);
        let metas: Vec<_> = corpus
            .features
            .iter()
            .map(|f| (f.doc_id.clone(), f.num_frames(), f.frame_period))
            .collect();
        let cfg = LossConfig {
            m: 2,
            ..LossConfig::default()
        };
        let index =
            SampleIndex::new(qs.queries.clone(), &qs.occurrences, metas).unwrap();
        let store = doc_store(&corpus.features);
        for seed in 0..20u64 {
            let params = init_params(&alphabet, &tiny_arch(5), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&index, &cfg, 1, 2, &mut rng).unwrap();
            let (before, mut grads) =
                batch_gradients(&params, &index, &batch, &store, &cfg, None).unwrap();
            assert!(before > 0.0, "seed {seed}: initial loss must be positive");
            let mut stepped = params.clone();
            let mut adam = Adam::new(&stepped, AdamConfig::default());
            adam.step(&mut stepped, &mut grads, 1e-3);
            let (after, _) =
                batch_gradients(&stepped, &index, &batch, &store, &cfg, None).unwrap();
            assert!(
                after < before,
                "seed {seed}: loss rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn finetune_controller_and_determinism() {
        let (corpus, qs) = tiny_world();
        let alphabet = grapheme_alphabet(&corpus);
        let init = init_params(&alphabet, &tiny_arch(5), 1).unwrap();
        let cfg = LossConfig {
            m: 2,
            l_batch: 4,
            ..LossConfig::default()
        };
        let sched = FinetuneSchedule {
            batch: 8,
            max_epochs: 3,
            ..FinetuneSchedule::default()
        };
        let a = finetune(&init, &qs.queries, &qs.occurrences, &corpus.features, &cfg, &sched, 5)
            .unwrap();
        let b = finetune(&init, &qs.queries, &qs.occurrences, &corpus.features, &cfg, &sched, 5)
            .unwrap();
        assert_eq!(a.params, b.params, "same seed must reproduce the run");
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.epochs_run, 3);
        assert!(a.trace.iter().all(|r| r.val_loss.is_some()));
    }

    #[test]
    fn finetune_rejects_tiny_query_sets() {
        let (corpus, qs) = tiny_world();
        let alphabet = grapheme_alphabet(&corpus);
        let init = init_params(&alphabet, &tiny_arch(5), 1).unwrap();
        let few: Vec<_> = qs.queries.iter().take(5).cloned().collect();
        let err = finetune(
            &init,
            &few,
            &qs.occurrences,
            &corpus.features,
            &LossConfig::default(),
            &FinetuneSchedule::default(),
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("10"), "{err}");
    }

    #[test]
    fn trace_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(
            &path,
            &[
                TraceRow {
                    step: 1,
                    lr: 0.5,
                    loss: 2.0,
                    val_loss: None,
                },
                TraceRow {
                    step: 2,
                    lr: 0.25,
                    loss: 1.0,
                    val_loss: Some(1.5),
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,lr,loss,val_loss\n1,0.5,2,\n2,0.25,1,1.5\n");
    }
}
