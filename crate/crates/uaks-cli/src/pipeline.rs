//! Stage-sequential pipeline with artifact provenance: every stage stamps
//! its outputs with the config hash and the input/output file hashes, so
//! re-runs skip up-to-date stages and tampered intermediates are caught.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands;
use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Prepare,
    AudTrain,
    AudLabel,
    Pseudo,
    Pretrain,
    Finetune,
    Search,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Prepare,
        Stage::AudTrain,
        Stage::AudLabel,
        Stage::Pseudo,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Search,
        Stage::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Prepare => "prepare",
            Stage::AudTrain => "aud-train",
            Stage::AudLabel => "aud-label",
            Stage::Pseudo => "pseudo",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Search => "search",
            Stage::Score => "score",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hash_config(cfg: &PipelineConfig, seed: u64) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(cfg.normalized()?.as_bytes());
    hasher.update(seed.to_le_bytes());
    Ok(hex(&hasher.finalize()))
}

struct Paths {
    manifest: PathBuf,
    queries: PathBuf,
    refs: PathBuf,
    hmm: PathBuf,
    transcripts: PathBuf,
    index: PathBuf,
    index_occ: PathBuf,
    pretrain_ckpt: PathBuf,
    pretrain_trace: PathBuf,
    model_ckpt: PathBuf,
    finetune_trace: PathBuf,
    hits: PathBuf,
    report: PathBuf,
}

impl Paths {
    fn new(out_dir: &Path) -> Self {
        Paths {
            manifest: out_dir.join("manifest.json"),
            queries: out_dir.join("queries.tsv"),
            refs: out_dir.join("refs.tsv"),
            hmm: out_dir.join("aud.hmm"),
            transcripts: out_dir.join("units.tsv"),
            index: out_dir.join("pseudo.tsv"),
            index_occ: out_dir.join("pseudo_occ.tsv"),
            pretrain_ckpt: out_dir.join("pretrain.ckpt"),
            pretrain_trace: out_dir.join("pretrain_trace.csv"),
            model_ckpt: out_dir.join("model.ckpt"),
            finetune_trace: out_dir.join("finetune_trace.csv"),
            hits: out_dir.join("hits.tsv"),
            report: out_dir.join("report.json"),
        }
    }

    fn inputs(&self, stage: Stage) -> Vec<&Path> {
        match stage {
            Stage::Synth => vec![],
            Stage::Prepare => vec![&self.manifest],
            Stage::AudTrain => vec![&self.manifest],
            Stage::AudLabel => vec![&self.manifest, &self.hmm],
            Stage::Pseudo => vec![&self.manifest, &self.transcripts],
            Stage::Pretrain => vec![&self.manifest, &self.index, &self.index_occ],
            Stage::Finetune => vec![&self.manifest, &self.pretrain_ckpt],
            Stage::Search => vec![&self.manifest, &self.model_ckpt, &self.queries],
            Stage::Score => vec![&self.hits, &self.refs],
        }
    }

    fn outputs(&self, stage: Stage) -> Vec<&Path> {
        match stage {
            Stage::Synth => vec![&self.manifest],
            Stage::Prepare => vec![&self.queries, &self.refs],
            Stage::AudTrain => vec![&self.hmm],
            Stage::AudLabel => vec![&self.transcripts],
            Stage::Pseudo => vec![&self.index, &self.index_occ],
            Stage::Pretrain => vec![&self.pretrain_ckpt, &self.pretrain_trace],
            Stage::Finetune => vec![&self.model_ckpt, &self.finetune_trace],
            Stage::Search => vec![&self.hits],
            Stage::Score => vec![&self.report],
        }
    }
}

fn stamp_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.stamp.json", stage.name()))
}

/// Skip / run / tamper decision for one stage.
fn stage_status(
    out_dir: &Path,
    paths: &Paths,
    stage: Stage,
    config_hash: &str,
    force: bool,
) -> Result<bool> {
    let spath = stamp_path(out_dir, stage);
    if !spath.is_file() {
        return Ok(false);
    }
    let stamp: Stamp = serde_json::from_str(&std::fs::read_to_string(&spath)?)
        .with_context(|| format!("unreadable stamp {}", spath.display()))?;
    if stamp.config_hash != config_hash {
        if force {
            return Ok(false);
        }
        bail!(
            "stage {stage}: existing artifacts were produced under a different config \
             (hash {} vs {config_hash}); re-run with --force to rebuild",
            stamp.config_hash
        );
    }
    for input in paths.inputs(stage) {
        let key = input.display().to_string();
        match stamp.inputs.get(&key) {
            Some(recorded) if input.is_file() && *recorded == sha256_file(input)? => {}
            _ => return Ok(false), // upstream changed or missing: rebuild
        }
    }
    for output in paths.outputs(stage) {
        let key = output.display().to_string();
        let recorded = match stamp.outputs.get(&key) {
            Some(r) => r,
            None => return Ok(false),
        };
        if !output.is_file() {
            return Ok(false);
        }
        let current = sha256_file(output)?;
        if current != *recorded {
            if force {
                return Ok(false);
            }
            bail!(
                "stage {stage}: artifact {} does not match its stamp (tampered or \
                 partially rebuilt); re-run with --force to rebuild",
                output.display()
            );
        }
    }
    Ok(true)
}

fn write_stamp(out_dir: &Path, paths: &Paths, stage: Stage, config_hash: &str) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for input in paths.inputs(stage) {
        inputs.insert(input.display().to_string(), sha256_file(input)?);
    }
    let mut outputs = BTreeMap::new();
    for output in paths.outputs(stage) {
        outputs.insert(output.display().to_string(), sha256_file(output)?);
    }
    let stamp = Stamp {
        stage: stage.name().to_string(),
        config_hash: config_hash.to_string(),
        inputs,
        outputs,
    };
    std::fs::write(
        stamp_path(out_dir, stage),
        serde_json::to_string_pretty(&stamp)?,
    )?;
    Ok(())
}

/// Runs the requested stages in order, skipping up-to-date ones.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    seed: u64,
    out_dir: &Path,
    stages: &[Stage],
    force: bool,
) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out_dir)?;
    let config_hash = hash_config(cfg, seed)?;
    let paths = Paths::new(out_dir);
    let mut selected: Vec<Stage> = if stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        stages.to_vec()
    };
    selected.sort();
    selected.dedup();

    let mut report = serde_json::Map::new();
    for stage in selected {
        for input in paths.inputs(stage) {
            if !input.is_file() {
                bail!(
                    "stage {stage}: missing upstream artifact {}; run the earlier stages first",
                    input.display()
                );
            }
        }
        if stage_status(out_dir, &paths, stage, &config_hash, force)? {
            log::info!("stage {stage}: up to date, skipping");
            report.insert(stage.name().to_string(), serde_json::json!("skipped"));
            continue;
        }
        log::info!("stage {stage}: running");
        let summary = match stage {
            Stage::Synth => commands::cmd_synth(cfg, seed, out_dir)?,
            Stage::Prepare => commands::cmd_prepare(
                &paths.manifest,
                &cfg.queries.orders,
                cfg.queries.count,
                seed.wrapping_add(1),
                &paths.queries,
                &paths.refs,
            )?,
            Stage::AudTrain => commands::cmd_aud_train(
                cfg,
                &paths.manifest,
                None,
                None,
                seed,
                None,
                0,
                &paths.hmm,
            )?,
            Stage::AudLabel => {
                commands::cmd_aud_label(&paths.hmm, &paths.manifest, &paths.transcripts)?
            }
            Stage::Pseudo => commands::cmd_pseudo(
                cfg,
                &paths.transcripts,
                &paths.manifest,
                seed,
                &paths.index,
                &paths.index_occ,
            )?,
            Stage::Pretrain => commands::cmd_pretrain(
                cfg,
                &paths.index,
                &paths.index_occ,
                &paths.manifest,
                seed,
                &paths.pretrain_ckpt,
                Some(&paths.pretrain_trace),
            )?,
            Stage::Finetune => commands::cmd_finetune(
                cfg,
                Some(&paths.pretrain_ckpt),
                &paths.manifest,
                None,
                None,
                seed,
                &paths.model_ckpt,
                Some(&paths.finetune_trace),
            )?,
            Stage::Search => commands::cmd_search(
                cfg,
                &paths.model_ckpt,
                &paths.queries,
                &paths.manifest,
                None,
                &paths.hits,
            )?,
            Stage::Score => commands::cmd_score(
                cfg,
                &paths.hits,
                &paths.refs,
                None,
                None,
                None,
                true,
                None,
                seed,
                Some(&paths.report),
            )?,
        };
        write_stamp(out_dir, &paths, stage, &config_hash)?;
        report.insert(stage.name().to_string(), summary);
    }
    Ok(serde_json::Value::Object(report))
}
