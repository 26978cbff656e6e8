//! Dataset file format.
//!
//! Little-endian binary: magic `SWFD`, version u32, config block
//! (agents, height, width, stride, classes as u32), sample count u32, then
//! per sample: per-agent f32 image planes, per-agent u8 label planes, the
//! u8 degradation mask of agent 0, and u16 correspondence labels for each
//! pair `0 -> j`. Round-trips are bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DatasetConfig, SceneSample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SWFD";
const VERSION: u32 = 1;

/// Exact size of one sample record in bytes.
pub fn sample_record_bytes(cfg: &DatasetConfig) -> usize {
    let plane = cfg.height * cfg.width;
    cfg.n_agents * 3 * plane * 4          // f32 images
        + cfg.n_agents * plane            // u8 labels
        + plane                           // u8 degradation mask
        + (cfg.n_agents - 1) * cfg.cells() * 2 // u16 correspondences
}

/// Exact size of a dataset file with `n_samples` records.
pub fn file_size_bytes(cfg: &DatasetConfig, n_samples: usize) -> usize {
    4 + 4 + 5 * 4 + 4 + n_samples * sample_record_bytes(cfg)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let cfg = &ds.config;
    cfg.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.n_agents, cfg.height, cfg.width, cfg.stride, cfg.num_classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    for s in &ds.samples {
        for img in &s.images {
            for &v in img {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for lab in &s.labels {
            w.write_all(lab)?;
        }
        w.write_all(&s.degradation)?;
        for corr in s.corr_raw() {
            for &v in corr {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated: wanted {n} more bytes"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn u16_vec(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.bytes(n * 2)?;
        Ok(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut c = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let magic = c.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let config = DatasetConfig {
        n_agents: c.u32()? as usize,
        height: c.u32()? as usize,
        width: c.u32()? as usize,
        stride: c.u32()? as usize,
        num_classes: c.u32()? as usize,
    };
    config.validate().map_err(|e| Error::Format {
        offset: 8,
        message: format!("invalid config block: {e}"),
    })?;
    let n_samples = c.u32()? as usize;
    let plane = config.height * config.width;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut images = Vec::with_capacity(config.n_agents);
        for _ in 0..config.n_agents {
            images.push(c.f32_vec(3 * plane)?);
        }
        let mut labels = Vec::with_capacity(config.n_agents);
        for _ in 0..config.n_agents {
            labels.push(c.bytes(plane)?);
        }
        let degradation = c.bytes(plane)?;
        let mut corr = Vec::with_capacity(config.n_agents - 1);
        for _ in 1..config.n_agents {
            corr.push(c.u16_vec(config.cells())?);
        }
        samples.push(SceneSample::new(i as u64, images, labels, degradation, corr));
    }
    Ok(Dataset { config, samples })
}
