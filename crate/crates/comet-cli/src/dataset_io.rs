//! Stage dataset files: a JSON header followed by the sample payload as
//! row-major little-endian 64-bit floats.
//!
//! Layout: 8-byte magic, u32-LE header length, header JSON, payload.
//! The payload holds, for every training pair then every evaluation pair:
//! `x_a` (steps × d_raw), `x_b` (steps × d_raw), then the ground-truth
//! script as exact integer-valued floats. Everything is deterministic, so
//! regenerating with the same config reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use comet_core::synthgen::{PairSample, StageDataset};
use comet_core::Mat;

use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"CMTDATA1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    version: u32,
    stage: usize,
    mediator: String,
    partner: String,
    pool: Vec<usize>,
    steps: usize,
    d_raw: usize,
    seed: u64,
    n_train: usize,
    n_eval: usize,
    /// Hash of the data-shaping config fields; training refuses mismatched
    /// datasets.
    data_hash: String,
}

/// Canonical location of one stage's dataset inside an output directory.
pub fn dataset_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{stage}.data"))
}

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_script(buf: &mut Vec<u8>, script: &[usize]) {
    for &c in script {
        buf.extend_from_slice(&(c as f64).to_le_bytes());
    }
}

/// Serializes a stage dataset to `path`.
pub fn save(ds: &StageDataset, data_hash: &str, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        version: VERSION,
        stage: ds.stage,
        mediator: ds.mediator.clone(),
        partner: ds.partner.clone(),
        pool: ds.pool.clone(),
        steps: ds.steps,
        d_raw: ds.d_raw,
        seed: ds.seed,
        n_train: ds.train.len(),
        n_eval: ds.eval.len(),
        data_hash: data_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for pair in ds.train.iter().chain(ds.eval.iter()) {
        push_mat(&mut buf, &pair.x_a);
        push_mat(&mut buf, &pair.x_b);
        push_script(&mut buf, &pair.script);
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> F64Reader<'a> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8;
        if self.at + need > self.bytes.len() {
            return Err(CliError::format(self.path, "payload shorter than declared"));
        }
        let out = self.bytes[self.at..self.at + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.at += need;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(CliError::format(
                self.path,
                format!("{} trailing bytes after payload", self.bytes.len() - self.at),
            ));
        }
        Ok(())
    }
}

/// Loads a stage dataset, returning it with its stamped data hash.
pub fn load(path: &Path) -> Result<(StageDataset, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::format(path, "not a dataset file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if 12 + hlen > bytes.len() {
        return Err(CliError::format(path, "header longer than file"));
    }
    let header: DatasetHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| CliError::format(path, format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(CliError::format(
            path,
            format!("format version {} (supported: {VERSION})", header.version),
        ));
    }
    if header.steps == 0 || header.d_raw == 0 {
        return Err(CliError::format(path, "zero steps or width"));
    }

    let mut r = F64Reader {
        bytes: &bytes[12 + hlen..],
        at: 0,
        path,
    };
    let read_split = |n: usize, r: &mut F64Reader<'_>| -> Result<Vec<PairSample>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let x_a = Mat::from_vec(header.steps, header.d_raw, r.take(header.steps * header.d_raw)?)
                .map_err(CliError::Core)?;
            let x_b = Mat::from_vec(header.steps, header.d_raw, r.take(header.steps * header.d_raw)?)
                .map_err(CliError::Core)?;
            if !x_a.all_finite() || !x_b.all_finite() {
                return Err(CliError::format(path, "non-finite sample values"));
            }
            let script = r
                .take(header.steps)?
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && v >= 0.0 && header.pool.contains(&(v as usize)) {
                        Ok(v as usize)
                    } else {
                        Err(CliError::format(
                            path,
                            format!("script value {v} outside the stage pool"),
                        ))
                    }
                })
                .collect::<Result<Vec<usize>>>()?;
            out.push(PairSample { x_a, x_b, script });
        }
        Ok(out)
    };
    let train = read_split(header.n_train, &mut r)?;
    let eval = read_split(header.n_eval, &mut r)?;
    r.finish()?;

    Ok((
        StageDataset {
            stage: header.stage,
            mediator: header.mediator,
            partner: header.partner,
            pool: header.pool,
            steps: header.steps,
            d_raw: header.d_raw,
            seed: header.seed,
            train,
            eval,
        },
        header.data_hash,
    ))
}
