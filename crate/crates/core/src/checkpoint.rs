//! Flat named-tensor checkpoints. A checkpoint stores the run's config
//! text, every model parameter under its traversal name, and reserved
//! "_"-prefixed entries for optimizer moments, identity banks, and the
//! data-order rng, so a resumed run continues bit-identically.

use std::fs;
use std::path::Path;

use crate::bank::IdentityBank;
use crate::error::{Error, Result};
use crate::model::SearchModel;
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Raw f64 payload. Reserved entries may bit-pack integers, so no
    /// finiteness constraint applies here.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// The effective run configuration, stored verbatim.
    pub config_text: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let numel: usize = e.shape.iter().product();
            debug_assert_eq!(numel, e.values.len());
            for &v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let name = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
        let fail = |msg: String| Error::format(name.clone(), msg);
        let mut off = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if off + n > bytes.len() {
                return Err(fail(format!("truncated at byte {off}")));
            }
            let s = &bytes[off..off + n];
            off += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(fail("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config_text = String::from_utf8(take(cfg_len)?.to_vec())
            .map_err(|_| fail("config blob is not utf-8".into()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let ename = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| fail("entry name is not utf-8".into()))?;
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            entries.push(CheckpointEntry { name: ename, shape, values });
        }
        if off != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Checkpoint { config_text, entries })
    }
}

/// Captures everything a resumed run needs.
pub fn snapshot(
    model: &mut SearchModel,
    optim: &Optimizer,
    banks: &[(usize, &IdentityBank)],
    rng: &Rng,
    config_text: &str,
) -> Checkpoint {
    let mut entries = Vec::new();
    let mut params = Vec::new();
    model.visit(&mut params);
    for (name, t) in &params {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        });
    }
    for (name, values) in optim.to_entries() {
        let shape = vec![values.len()];
        entries.push(CheckpointEntry { name, shape, values });
    }
    for (scale, bank) in banks {
        let mut values =
            vec![bank.labeled() as f64, bank.queue_len() as f64, bank.dim() as f64];
        values.extend(bank.to_values());
        let shape = vec![values.len()];
        entries.push(CheckpointEntry { name: format!("_bank.{scale}"), shape, values });
    }
    entries.push(CheckpointEntry {
        name: "_rng".to_string(),
        shape: vec![2],
        values: vec![f64::from_bits(rng.seed()), f64::from_bits(rng.state())],
    });
    Checkpoint { config_text: config_text.to_string(), entries }
}

/// Loads every model parameter from the checkpoint, by name, with shape
/// checking in both directions.
pub fn restore_model(model: &mut SearchModel, ckpt: &Checkpoint) -> Result<()> {
    let mut params = Vec::new();
    model.visit(&mut params);
    let mut used = vec![false; ckpt.entries.len()];
    for (name, t) in params.iter_mut() {
        let idx = ckpt
            .entries
            .iter()
            .position(|e| &e.name == name)
            .ok_or_else(|| {
                Error::invalid(
                    "restore_model",
                    format!("checkpoint lacks parameter {name}; architectures differ"),
                )
            })?;
        let e = &ckpt.entries[idx];
        if e.shape != t.shape() {
            return Err(Error::invalid(
                "restore_model",
                format!("{name}: checkpoint shape {:?} vs model {:?}", e.shape, t.shape()),
            ));
        }
        used[idx] = true;
        **t = Tensor::param(&e.shape, e.values.clone())?;
    }
    for (idx, e) in ckpt.entries.iter().enumerate() {
        if !used[idx] && !e.name.starts_with('_') {
            return Err(Error::invalid(
                "restore_model",
                format!("checkpoint parameter {} has no home in this model", e.name),
            ));
        }
    }
    Ok(())
}

pub fn restore_optimizer(cfg: OptimConfig, ckpt: &Checkpoint) -> Result<Optimizer> {
    let entries: Vec<(String, Vec<f64>)> = ckpt
        .entries
        .iter()
        .filter(|e| e.name.starts_with("_optim."))
        .map(|e| (e.name.clone(), e.values.clone()))
        .collect();
    Optimizer::from_entries(cfg, &entries)
}

/// Banks keyed by their re-id scale, in ascending scale order.
pub fn restore_banks(ckpt: &Checkpoint) -> Result<Vec<(usize, IdentityBank)>> {
    let mut out = Vec::new();
    for e in &ckpt.entries {
        let Some(scale) = e.name.strip_prefix("_bank.") else { continue };
        let scale: usize = scale
            .parse()
            .map_err(|_| Error::invalid("restore_banks", format!("bad bank name {}", e.name)))?;
        if e.values.len() < 3 {
            return Err(Error::invalid("restore_banks", "bank entry too short"));
        }
        let (l, q, d) = (e.values[0] as usize, e.values[1] as usize, e.values[2] as usize);
        let bank = IdentityBank::from_values(l, q, d, &e.values[3..])?;
        out.push((scale, bank));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

pub fn restore_rng(ckpt: &Checkpoint) -> Result<Rng> {
    let e = ckpt
        .get("_rng")
        .ok_or_else(|| Error::invalid("restore_rng", "checkpoint carries no rng state"))?;
    if e.values.len() != 2 {
        return Err(Error::invalid("restore_rng", "malformed rng state"));
    }
    Ok(Rng::restore(e.values[0].to_bits(), e.values[1].to_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::model::ModelConfig;
    use crate::reid::{ReidConfig, ReidSource, ReidVariant};

    fn tiny_model(seed: u64) -> SearchModel {
        let cfg = ModelConfig {
            detector: DetectorConfig {
                d_model: 8,
                n_heads: 2,
                n_points: 2,
                n_queries: 3,
                n_encoders: 1,
                n_decoders: 2,
                d_ffn: 16,
                strides: (4, 8, 16),
            },
            reid: ReidConfig {
                variant: ReidVariant::Shared,
                scales: vec![2],
                d_reid: 8,
                input_source: ReidSource::Backbone,
            },
        };
        SearchModel::init(&cfg, &mut Rng::new(seed)).unwrap()
    }

    fn full_snapshot(seed: u64) -> Checkpoint {
        let mut model = tiny_model(seed);
        let optim = Optimizer::new(OptimConfig::default()).unwrap();
        let bank = IdentityBank::new(4, 2, 8, 1.0 / 30.0, 0.5, &mut Rng::new(seed + 1)).unwrap();
        let rng = Rng::new(seed + 2);
        snapshot(&mut model, &optim, &[(2, &bank)], &rng, "steps = 5\n")
    }

    #[test]
    fn save_load_round_trips() {
        let ckpt = full_snapshot(30);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.config_text, "steps = 5\n");
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let ckpt = full_snapshot(31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'Z';
        fs::write(&bad, &magic).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));

        let mut version = bytes.clone();
        version[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&bad, &version).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn restore_reproduces_the_saved_model_exactly() {
        let ckpt = full_snapshot(32);
        let original = tiny_model(32);
        let mut other = tiny_model(99);
        let image = {
            let mut rng = Rng::new(1).fork_named("img");
            Tensor::new(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.uniform()).collect()).unwrap()
        };
        let want = original.predictions(&image).unwrap();
        assert_ne!(other.predictions(&image).unwrap(), want);
        restore_model(&mut other, &ckpt).unwrap();
        assert_eq!(other.predictions(&image).unwrap(), want);

        let banks = restore_banks(&ckpt).unwrap();
        assert_eq!(banks.len(), 1);
        assert_eq!(banks[0].0, 2);
        banks[0].1.check_invariants().unwrap();

        let rng = restore_rng(&ckpt).unwrap();
        let mut a = rng;
        let mut b = Rng::new(32 + 2);
        assert_eq!(a.next_u64(), b.next_u64());

        let _ = restore_optimizer(OptimConfig::default(), &ckpt).unwrap();
    }

    #[test]
    fn architecture_mismatch_is_descriptive() {
        let ckpt = full_snapshot(33);
        let cfg = ModelConfig {
            detector: DetectorConfig {
                d_model: 8,
                n_heads: 2,
                n_points: 2,
                n_queries: 3,
                n_encoders: 1,
                n_decoders: 2,
                d_ffn: 16,
                strides: (4, 8, 16),
            },
            reid: ReidConfig {
                variant: ReidVariant::Parallel,
                scales: vec![2],
                d_reid: 8,
                input_source: ReidSource::Backbone,
            },
        };
        let mut parallel = SearchModel::init(&cfg, &mut Rng::new(5)).unwrap();
        let err = restore_model(&mut parallel, &ckpt).unwrap_err();
        assert!(err.to_string().contains("reid"), "unexpected: {err}");
    }
}
