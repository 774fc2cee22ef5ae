//! Checkpoint directories: parameters, optimizer moments, vocabulary and a
//! JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use autograd::{archive, AdamW, DType, ParamStore, Real};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::text::Vocabulary;

pub const MODEL_FILE: &str = "model.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PretrainConfig,
    pub step: u64,
    pub optim_step: u64,
    pub seed: u64,
    pub vocab_sha256: String,
    pub config_sha256: String,
    pub dtype: DType,
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

/// Writes JSON atomically (temp file, then rename).
pub fn write_json<V: Serialize>(value: &V, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n").map_err(Error::file(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::file(path))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    /// First and second moments keyed by parameter name, if saved.
    pub moments: Option<BTreeMap<String, (Vec<T>, Vec<T>)>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn save(
        dir: &Path,
        config: &PretrainConfig,
        step: u64,
        vocab: &Vocabulary,
        params: &ParamStore<T>,
        optim: Option<&AdamW<T>>,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
        archive::save(params, &dir.join(MODEL_FILE)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(opt) = optim {
            let mut m = ParamStore::new();
            for (name, first, second) in opt.moments() {
                let shape = params.get(name).map(|p| p.shape.clone()).unwrap_or_else(|| vec![first.len()]);
                m.insert(format!("m.{name}"), &shape, first.to_vec());
                m.insert(format!("v.{name}"), &shape, second.to_vec());
            }
            archive::save(&m, &dir.join(OPTIM_FILE)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        vocab.save(&dir.join(VOCAB_FILE))?;
        let manifest = Manifest {
            config: config.clone(),
            step,
            optim_step: optim.map_or(0, |o| o.step_count()),
            seed: config.seed,
            vocab_sha256: vocab.hash(),
            config_sha256: config_hash(config),
            dtype: T::DTYPE,
        };
        write_json(&manifest, &dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(Error::file(&manifest_path))?)?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {:?} values, requested {:?}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.hash() != manifest.vocab_sha256 {
            return Err(Error::Checkpoint("vocabulary does not match manifest hash".into()));
        }
        if config_hash(&manifest.config) != manifest.config_sha256 {
            return Err(Error::Checkpoint("config does not match manifest hash".into()));
        }
        let model_path = dir.join(MODEL_FILE);
        if !model_path.exists() {
            return Err(Error::File {
                path: model_path,
                source: std::io::ErrorKind::NotFound.into(),
            });
        }
        let params = archive::load(&model_path).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optim_path = dir.join(OPTIM_FILE);
        let moments = if optim_path.exists() {
            let store: ParamStore<T> = archive::load(&optim_path).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let mut out: BTreeMap<String, (Vec<T>, Vec<T>)> = BTreeMap::new();
            for (name, t) in store.iter() {
                let (slot, key) = match name.split_once('.') {
                    Some(("m", k)) => (0, k),
                    Some(("v", k)) => (1, k),
                    _ => return Err(Error::Checkpoint(format!("unexpected optimizer tensor {name}"))),
                };
                let e = out.entry(key.to_string()).or_default();
                if slot == 0 {
                    e.0 = t.data.clone();
                } else {
                    e.1 = t.data.clone();
                }
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            manifest,
            vocab,
            params,
            moments,
        })
    }
}
