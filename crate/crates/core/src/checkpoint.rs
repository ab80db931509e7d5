//! Checkpoint container: magic `MMKW`, u32 LE format version, u64 LE length
//! of a JSON manifest, the manifest, then every tensor as f64 LE values in
//! manifest order.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::Lexicon;
use crate::error::{Error, Result};
use crate::model::{KwsModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"MMKW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub vocab: Vec<String>,
    pub lexicon: String,
    /// Free-form record of how the weights were produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// A model with the vocabulary and lexicon it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: KwsModel<S>,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub provenance: serde_json::Value,
}

fn shape_diff(expected: &[TensorEntry], found: &[TensorEntry]) -> Option<String> {
    let mut out = String::new();
    let max = expected.len().max(found.len());
    for i in 0..max {
        match (expected.get(i), found.get(i)) {
            (Some(e), Some(f)) if e.name == f.name && e.shape == f.shape => {}
            (e, f) => {
                let show = |t: Option<&TensorEntry>| t.map(|t| format!("{} {:?}", t.name, t.shape)).unwrap_or("-".into());
                let _ = writeln!(out, "  expected {}, found {}", show(e), show(f));
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

fn entries<S: Scalar>(model: &KwsModel<S>) -> Vec<TensorEntry> {
    model
        .store
        .iter()
        .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), frozen: p.frozen })
        .collect()
}

impl<S: Scalar> Checkpoint<S> {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.model.config.clone(),
            config_hash: self.model.config.hash(),
            tensors: entries(&self.model),
            vocab: self.vocab.tokens().to_vec(),
            lexicon: self.lexicon.to_tsv(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for (_, p) in self.model.store.iter() {
            for v in p.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::BadHeader("checkpoint"))?;
        if &magic != MAGIC {
            return Err(Error::BadHeader("checkpoint"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Version { kind: "checkpoint", version });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut manifest = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut manifest)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)?;

        let mut model = KwsModel::<S>::new(manifest.config.clone(), 0)?;
        if let Some(diff) = shape_diff(&entries(&model), &manifest.tensors) {
            return Err(Error::ShapeMismatch(diff));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
            let n: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
            model.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
            model.store.set_frozen(id, entry.frozen);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Invalid(format!("{} trailing bytes after checkpoint tensors", rest.len())));
        }
        let vocab = Vocabulary::parse(&(manifest.vocab.join("\n") + "\n"))?;
        let lexicon = Lexicon::parse(&manifest.lexicon)?;
        Ok(Self { model, vocab, lexicon, provenance: manifest.provenance })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Refuses a config whose architecture differs from the stored one,
    /// listing the tensors whose shapes would change.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if *config == self.model.config {
            return Ok(());
        }
        let fresh = KwsModel::<S>::new(config.clone(), 0)?;
        let detail = shape_diff(&entries(&fresh), &entries(&self.model))
            .map(|d| format!("\n{d}"))
            .unwrap_or_default();
        Err(Error::ConfigConflict(format!(
            "checkpoint config {} differs from requested {}{detail}",
            self.model.config.hash(),
            config.hash()
        )))
    }
}
