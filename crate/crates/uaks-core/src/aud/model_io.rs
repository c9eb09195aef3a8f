//! Phone-loop model container: `UAKS-HMM v1` header, JSON shape metadata,
//! then all unit parameters and loop weights as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::hmm::{GmmState, HmmUnitParams, PhoneLoopModel, GAUSSIANS_PER_STATE, STATES_PER_UNIT};
use crate::error::{Error, Result};

const HMM_MAGIC: &[u8] = b"UAKS-HMM v1\n";

#[derive(Serialize, Deserialize)]
struct HmmMeta {
    units: usize,
    dim: usize,
    states: usize,
    gaussians: usize,
}

pub fn save_phone_loop(path: &Path, model: &PhoneLoopModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let meta = HmmMeta {
        units: model.num_units(),
        dim: model.dim,
        states: STATES_PER_UNIT,
        gaussians: GAUSSIANS_PER_STATE,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| Error::format("hmm metadata", e.to_string()))?;
    w.write_all(HMM_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&meta_json).map_err(|e| Error::io(path, e))?;
    let mut write_f64 = |v: f64| w.write_all(&v.to_le_bytes());
    for unit in &model.units {
        for st in &unit.states {
            for v in st.means.iter() {
                write_f64(*v).map_err(|e| Error::io(path, e))?;
            }
            for v in st.vars.iter() {
                write_f64(*v).map_err(|e| Error::io(path, e))?;
            }
            for v in st.weights.iter() {
                write_f64(*v).map_err(|e| Error::io(path, e))?;
            }
        }
        for v in &unit.self_loop {
            write_f64(*v).map_err(|e| Error::io(path, e))?;
        }
    }
    for v in model.loop_weights.iter() {
        write_f64(*v).map_err(|e| Error::io(path, e))?;
    }
    drop(write_f64);
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_phone_loop(path: &Path) -> Result<PhoneLoopModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = vec![0u8; HMM_MAGIC.len()];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != HMM_MAGIC {
        return Err(Error::format(
            "hmm header",
            format!("{} is not a UAKS-HMM v1 file", path.display()),
        ));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json).map_err(|e| Error::io(path, e))?;
    let meta: HmmMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::format("hmm metadata", e.to_string()))?;
    if meta.states != STATES_PER_UNIT || meta.gaussians != GAUSSIANS_PER_STATE {
        return Err(Error::format(
            "hmm metadata",
            format!(
                "unsupported topology {}x{} (expected {STATES_PER_UNIT}x{GAUSSIANS_PER_STATE})",
                meta.states, meta.gaussians
            ),
        ));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let per_state = 2 * GAUSSIANS_PER_STATE * meta.dim + GAUSSIANS_PER_STATE;
    let per_unit = STATES_PER_UNIT * per_state + STATES_PER_UNIT;
    let want = (meta.units * per_unit + meta.units) * 8;
    if payload.len() != want {
        return Err(Error::format(
            "hmm payload",
            format!("expected {want} bytes, found {}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut next = || values.next().expect("sized above");
    let units = (0..meta.units)
        .map(|unit_id| {
            let states = (0..STATES_PER_UNIT)
                .map(|_| {
                    let means = Array2::from_shape_fn((GAUSSIANS_PER_STATE, meta.dim), |_| next());
                    let vars = Array2::from_shape_fn((GAUSSIANS_PER_STATE, meta.dim), |_| next());
                    let weights = Array1::from_shape_fn(GAUSSIANS_PER_STATE, |_| next());
                    GmmState {
                        means,
                        vars,
                        weights,
                    }
                })
                .collect();
            let self_loop = (0..STATES_PER_UNIT).map(|_| next()).collect();
            HmmUnitParams {
                unit_id,
                states,
                self_loop,
            }
        })
        .collect();
    let loop_weights = Array1::from_shape_fn(meta.units, |_| next());
    PhoneLoopModel::new(units, loop_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aud::em::{em_train_phone_loop, EmConfig};
    use crate::corpus::{synth_corpus, SynthConfig};

    #[test]
    fn phone_loop_round_trip() {
        let corpus = synth_corpus(&SynthConfig {
            lexicon_size: 4,
            word_len: (3, 3),
            n_phones: 4,
            frames_per_phone: 3,
            n_docs: 3,
            doc_len: 4,
            noise_sigma: 0.2,
            dim: 4,
            seed: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let out = em_train_phone_loop(
            &corpus.features,
            &EmConfig {
                units: 3,
                iters: 2,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hmm");
        save_phone_loop(&path, &out.model).unwrap();
        let back = load_phone_loop(&path).unwrap();
        assert_eq!(out.model, back);
    }
}
