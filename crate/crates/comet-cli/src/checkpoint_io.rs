//! Checkpoint files: the complete model state between stages.
//!
//! Layout: magic `CMTCKPT1`, u32-LE header length, JSON metadata
//! (format version, config hash, every array's path and shape), raw
//! little-endian 64-bit float payloads in the declared order, and a
//! trailing 64-bit checksum (first eight bytes of SHA-256 over everything
//! before it). A truncated or corrupted file fails the checksum before any
//! state is parsed, so loads are all-or-nothing.
//!
//! Declared payload order: parameter matrices, codebook codes / counts /
//! accumulated volumes, teacher codes (when present), then each Fisher
//! snapshot's importance and anchor matrices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use comet_core::ewc::FisherSnapshot;
use comet_core::model::Model;
use comet_core::quantizer::{TeacherSnapshot, UnifiedCodebook};
use comet_core::{Mat, ParamSet};

use crate::config::ModelSection;
use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"CMTCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatMeta {
    path: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookMeta {
    k: usize,
    k1: usize,
    d: usize,
    gamma: f64,
    eps_n: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FisherMeta {
    lambda: f64,
    mats: Vec<MatMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    seed: u64,
    /// Last completed stage.
    stage: usize,
    model: ModelSection,
    modalities: Vec<String>,
    codebook: CodebookMeta,
    /// Teacher row count, `None` before the first expansion.
    teacher_k1: Option<usize>,
    params: Vec<MatMeta>,
    fishers: Vec<FisherMeta>,
}

/// A deserialized checkpoint.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub stage: usize,
    pub config_hash: String,
}

/// Canonical location of one stage's checkpoint inside an output directory.
pub fn checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn mat_metas(params: &ParamSet) -> Vec<MatMeta> {
    params
        .paths()
        .into_iter()
        .map(|path| {
            let m = params.get(&path).expect("own path");
            MatMeta {
                rows: m.rows(),
                cols: m.cols(),
                path,
            }
        })
        .collect()
}

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_slice(buf: &mut Vec<u8>, s: &[f64]) {
    for &v in s {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_params(buf: &mut Vec<u8>, params: &ParamSet, metas: &[MatMeta]) {
    for meta in metas {
        push_mat(buf, params.get(&meta.path).expect("declared path"));
    }
}

/// Serializes the model as the checkpoint for `stage`.
pub fn save(model: &Model, stage: usize, config_hash: &str, path: &Path) -> Result<()> {
    let cb = &model.codebook;
    let header = CheckpointHeader {
        version: VERSION,
        config_hash: config_hash.to_string(),
        seed: model.seed,
        stage,
        model: ModelSection::from_core(&model.cfg),
        modalities: model.modalities.clone(),
        codebook: CodebookMeta {
            k: cb.len(),
            k1: cb.k1(),
            d: cb.dim(),
            gamma: cb.gamma(),
            eps_n: cb.eps_n(),
        },
        teacher_k1: model.teacher.as_ref().map(|t| t.len()),
        params: mat_metas(&model.params),
        fishers: model
            .fishers
            .iter()
            .map(|f| FisherMeta {
                lambda: f.lambda(),
                mats: mat_metas(f.fisher()),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);

    push_params(&mut buf, &model.params, &header.params);
    push_mat(&mut buf, cb.codes());
    push_slice(&mut buf, cb.counts());
    push_mat(&mut buf, cb.volumes());
    if let Some(t) = &model.teacher {
        push_mat(&mut buf, t.codes());
    }
    for (snap, meta) in model.fishers.iter().zip(&header.fishers) {
        for m in &meta.mats {
            push_mat(&mut buf, snap.fisher().get(&m.path).expect("declared path"));
            push_mat(&mut buf, snap.anchor().get(&m.path).expect("declared path"));
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..8]);
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> F64Reader<'a> {
    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let data = self.take(rows * cols)?;
        let m = Mat::from_vec(rows, cols, data).map_err(CliError::Core)?;
        if !m.all_finite() {
            return Err(CliError::format(self.path, "non-finite checkpoint values"));
        }
        Ok(m)
    }

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

    fn params(&mut self, metas: &[MatMeta]) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for m in metas {
            set.insert(&m.path, self.mat(m.rows, m.cols)?);
        }
        Ok(set)
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

/// Loads and verifies a checkpoint.
pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::format(path, "not a checkpoint file (bad magic)"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 8);
    let digest = Sha256::digest(body);
    if stored != &digest[..8] {
        return Err(CliError::format(
            path,
            "checksum mismatch (truncated or corrupted)",
        ));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    if 12 + hlen > body.len() {
        return Err(CliError::format(path, "header longer than file"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + hlen])
        .map_err(|e| CliError::format(path, format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(CliError::format(
            path,
            format!("format version {} (supported: {VERSION})", header.version),
        ));
    }

    let mut r = F64Reader {
        bytes: &body[12 + hlen..],
        at: 0,
        path,
    };
    let params = r.params(&header.params)?;
    let cbm = &header.codebook;
    let codes = r.mat(cbm.k, cbm.d)?;
    let counts = r.take(cbm.k)?;
    let volumes = r.mat(cbm.k, cbm.d)?;
    let codebook =
        UnifiedCodebook::from_parts(codes, counts, volumes, cbm.gamma, cbm.eps_n, cbm.k1)
            .map_err(CliError::Core)?;
    let teacher = match header.teacher_k1 {
        Some(k1) => Some(TeacherSnapshot::from_codes(r.mat(k1, cbm.d)?)),
        None => None,
    };
    let mut fishers = Vec::with_capacity(header.fishers.len());
    for fm in &header.fishers {
        let mut fisher = ParamSet::new();
        let mut anchor = ParamSet::new();
        for m in &fm.mats {
            fisher.insert(&m.path, r.mat(m.rows, m.cols)?);
            anchor.insert(&m.path, r.mat(m.rows, m.cols)?);
        }
        fishers.push(FisherSnapshot::new(fisher, anchor, fm.lambda).map_err(CliError::Core)?);
    }
    r.finish()?;

    Ok(LoadedCheckpoint {
        model: Model {
            cfg: header.model.to_core(),
            params,
            codebook,
            teacher,
            fishers,
            modalities: header.modalities,
            seed: header.seed,
        },
        stage: header.stage,
        config_hash: header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use comet_core::model::{CodebookConfig, ModelConfig};
    use comet_core::synthgen::{generate_stage_dataset, ModalityRenderer, StageSpec};
    use comet_core::trainer::{run_stage, Hyper, NullSink, StagePlan};
    use std::collections::BTreeMap;

    /// A model that has actually trained a tiny stage 1 and entered stage 2,
    /// so the checkpoint carries a teacher and one Fisher snapshot.
    fn staged_model() -> Model {
        let cfg = ModelConfig {
            d_raw: 4,
            d_sem: 3,
            d_spec: 2,
            d_ctx: 3,
            hidden: 4,
            n_experts: 2,
            k_steps: 2,
            use_specific: true,
        };
        let cbc = CodebookConfig {
            k: 5,
            gamma: 0.9,
            eps_n: 1e-3,
            init_scale: 1.0,
        };
        let mut model = Model::new(cfg, &cbc, 21).unwrap();
        let mut renderers = BTreeMap::new();
        for m in ["a", "b", "c"] {
            renderers.insert(
                m.to_string(),
                ModalityRenderer::new(m, 4, 4, 2, 0.05, 13).unwrap(),
            );
        }
        let hyper = Hyper {
            batch_pairs: 2,
            epochs: 1,
            fisher_sample: 2,
            ..Hyper::default()
        };
        for (stage, partner) in [(1, "b"), (2, "c")] {
            let spec = StageSpec {
                stage,
                mediator: "a".into(),
                partner: partner.into(),
                pool: vec![0, 1, 2, 3],
                n_train: 4,
                n_eval: 2,
                steps: 4,
                p_stay: 0.5,
            };
            let data = generate_stage_dataset(&spec, &renderers, 50 + stage as u64).unwrap();
            let plan = StagePlan {
                stage,
                mediator: "a".into(),
                partner: partner.into(),
                k2: 3,
            };
            run_stage(&mut model, &plan, &data, &hyper, &mut NullSink).unwrap();
        }
        model
    }

    fn assert_params_equal(a: &ParamSet, b: &ParamSet) {
        assert_eq!(a.paths(), b.paths());
        for p in a.paths() {
            assert_eq!(a.get(&p).unwrap(), b.get(&p).unwrap(), "param {p}");
        }
    }

    #[test]
    fn roundtrip_restores_every_array_bit_for_bit() {
        let model = staged_model();
        assert!(model.teacher.is_some(), "fixture should carry a teacher");
        assert!(!model.fishers.is_empty(), "fixture should carry a Fisher");
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 2);
        save(&model, 2, "beef", &path).unwrap();

        let back = load(&path).unwrap();
        assert_eq!(back.stage, 2);
        assert_eq!(back.config_hash, "beef");
        assert_eq!(back.model.cfg, model.cfg);
        assert_eq!(back.model.seed, model.seed);
        assert_eq!(back.model.modalities, model.modalities);
        assert_params_equal(&back.model.params, &model.params);
        assert_eq!(back.model.codebook.codes(), model.codebook.codes());
        assert_eq!(back.model.codebook.counts(), model.codebook.counts());
        assert_eq!(back.model.codebook.volumes(), model.codebook.volumes());
        assert_eq!(back.model.codebook.k1(), model.codebook.k1());
        assert_eq!(
            back.model.teacher.as_ref().unwrap().codes(),
            model.teacher.as_ref().unwrap().codes()
        );
        assert_eq!(back.model.fishers.len(), model.fishers.len());
        for (x, y) in back.model.fishers.iter().zip(&model.fishers) {
            assert_eq!(x.lambda(), y.lambda());
            assert_params_equal(x.fisher(), y.fisher());
            assert_params_equal(x.anchor(), y.anchor());
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let model = staged_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save(&model, 2, "beef", &p1).unwrap();
        save(&model, 2, "beef", &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_fails_the_checksum_before_any_state_is_returned() {
        let model = staged_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&model, 2, "beef", &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corruption_anywhere_fails_the_checksum() {
        let model = staged_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&model, 2, "beef", &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn unsupported_version_is_reported() {
        let model = staged_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&model, 2, "beef", &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        // Rewrite the header with a bumped version and a fresh checksum.
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header["version"] = serde_json::json!(2);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(MAGIC);
        rebuilt.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        rebuilt.extend_from_slice(&new_header);
        rebuilt.extend_from_slice(&bytes[12 + hlen..bytes.len() - 8]);
        let digest = Sha256::digest(&rebuilt);
        rebuilt.extend_from_slice(&digest[..8]);
        fs::write(&path, rebuilt).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
