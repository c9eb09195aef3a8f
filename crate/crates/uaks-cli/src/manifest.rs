//! Corpus manifest: document ids, feature container paths and optional
//! alignment references, plus corpus-level frame period and duration.
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use uaks_core::corpus::{load_alignments, load_feature_matrix, FeatureMatrix, WordAlignment};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    pub doc_id: String,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignments: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frame_period: f64,
    pub total_duration: f64,
    pub docs: Vec<ManifestDoc>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("malformed manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut seen = BTreeSet::new();
        for doc in &manifest.docs {
            if !seen.insert(&doc.doc_id) {
                bail!("duplicate doc id {} in {}", doc.doc_id, path.display());
            }
            let feat = base.join(&doc.features);
            if !feat.is_file() {
                bail!("manifest references missing feature file {}", feat.display());
            }
            if let Some(ali) = &doc.alignments {
                let ali = base.join(ali);
                if !ali.is_file() {
                    bail!("manifest references missing alignment file {}", ali.display());
                }
            }
        }
        Ok((manifest, base))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(())
    }

    /// Loads every feature matrix, checking ids and frame periods.
    pub fn load_features(&self, base: &Path) -> Result<Vec<FeatureMatrix>> {
        let loaded: Vec<Result<FeatureMatrix>> = self
            .docs
            .par_iter()
            .map(|doc| {
                let m = load_feature_matrix(&base.join(&doc.features))?;
                if m.doc_id != doc.doc_id {
                    bail!(
                        "feature file {} carries doc id {}, manifest says {}",
                        doc.features.display(),
                        m.doc_id,
                        doc.doc_id
                    );
                }
                if (m.frame_period - self.frame_period).abs() > 1e-9 {
                    bail!(
                        "document {} has frame period {}, manifest says {}",
                        doc.doc_id,
                        m.frame_period,
                        self.frame_period
                    );
                }
                Ok(m)
            })
            .collect();
        loaded.into_iter().collect()
    }

    /// Loads the alignments referenced by the manifest, restricted to the
    /// manifest's documents.
    pub fn load_alignments(&self, base: &Path) -> Result<Vec<WordAlignment>> {
        let files: BTreeSet<PathBuf> = self
            .docs
            .iter()
            .filter_map(|d| d.alignments.as_ref().map(|p| base.join(p)))
            .collect();
        if files.is_empty() {
            bail!("manifest has no alignment references");
        }
        let wanted: BTreeSet<&str> = self.docs.iter().map(|d| d.doc_id.as_str()).collect();
        let mut out = Vec::new();
        for file in files {
            for ali in load_alignments(&file)? {
                if wanted.contains(ali.doc_id.as_str()) {
                    out.push(ali);
                }
            }
        }
        out.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Ok(out)
    }
}

/// Builds a manifest for features written under `dir`, one file per doc.
pub fn manifest_for_features(
    features: &[FeatureMatrix],
    feature_files: &[PathBuf],
    alignments: Option<&Path>,
) -> Manifest {
    let total_duration = features.iter().map(|f| f.duration()).sum();
    Manifest {
        frame_period: features.first().map(|f| f.frame_period).unwrap_or(0.01),
        total_duration,
        docs: features
            .iter()
            .zip(feature_files)
            .map(|(f, path)| ManifestDoc {
                doc_id: f.doc_id.clone(),
                features: path.clone(),
                alignments: alignments.map(Path::to_path_buf),
            })
            .collect(),
    }
}
