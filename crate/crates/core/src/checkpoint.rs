//! Checkpoints: `manifest.json` plus a raw little-endian f32 payload.
//!
//! The payload holds the frozen base, every trainable, both AdamW moments and
//! the merge engine's running averages. Everything else needed to resume
//! (group structure, counters, RNG position) lives in the manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, GroupId, ProjectionType};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::merge::RunningAverage;
use crate::model::{hex, Model};
use crate::optim::Moments;
use crate::task::Dataset;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: GroupId,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AverageEntry {
    pub group: GroupId,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStateEntry {
    #[serde(rename = "type")]
    pub projection: ProjectionType,
    pub remaining: usize,
    pub merges_done: usize,
    pub averages: Vec<AverageEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub step: usize,
    pub rng: RngState,
    pub finished_at: Option<usize>,
    /// `f64::to_bits` of the initial full-split loss, kept exact.
    pub initial_train_loss_bits: Option<u64>,
    pub optimizer_step: usize,
    pub optimizer_keys: Vec<String>,
    pub banks: Vec<BankEntry>,
    pub merge_states: Vec<MergeStateEntry>,
    pub payload: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn moment_names(key: &str) -> (String, String) {
    (format!("adam.m.{key}"), format!("adam.v.{key}"))
}

fn average_name(projection: ProjectionType, id: GroupId) -> String {
    format!("avg.{}.{}", projection.short(), id.0)
}

/// Writes a checkpoint of `trainer` into `dir`, replacing any previous one.
pub fn save(trainer: &Trainer<f32>, config_hash: &str, dir: &Path) -> Result<Manifest> {
    let mut named: Vec<(String, &[usize], &[f32])> = Vec::new();
    let model = &trainer.model;
    for (name, t) in model.base.named_tensors() {
        named.push((name, t.shape(), t.data()));
    }
    for (name, t) in model.trainable_parameters() {
        named.push((name, t.shape(), t.data()));
    }
    let mut optimizer_keys = Vec::new();
    for (key, m) in trainer.optimizer.state.iter() {
        let (mn, vn) = moment_names(key);
        optimizer_keys.push(key.to_string());
        named.push((mn, &[], &m.m));
        named.push((vn, &[], &m.v));
    }
    let mut merge_states = Vec::new();
    for state in trainer.engine.states() {
        let mut averages = Vec::new();
        for avg in state.averages() {
            averages.push(AverageEntry {
                group: avg.group,
                count: avg.count(),
            });
            named.push((
                average_name(state.projection, avg.group),
                avg.mean().shape(),
                avg.mean().data(),
            ));
        }
        merge_states.push(MergeStateEntry {
            projection: state.projection,
            remaining: state.remaining,
            merges_done: state.merges_done,
            averages,
        });
    }

    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut payload = BufWriter::new(File::create(tmp.join(PAYLOAD_FILE))?);
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, shape, data) in named {
        let shape = if shape.is_empty() {
            vec![data.len()]
        } else {
            shape.to_vec()
        };
        for v in data {
            payload.write_all(&v.to_le_bytes())?;
        }
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += 4 * data.len() as u64;
    }
    payload.flush()?;

    let manifest = Manifest {
        format: FORMAT,
        config_hash: config_hash.to_string(),
        step: trainer.step,
        rng: RngState {
            seed: hex(&trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        finished_at: trainer.finished_at,
        initial_train_loss_bits: trainer.initial_train_loss.map(f64::to_bits),
        optimizer_step: trainer.optimizer.state.step,
        optimizer_keys,
        banks: model
            .banks()
            .iter()
            .map(|b| BankEntry {
                projection: b.projection(),
                groups: b
                    .groups()
                    .map(|g| GroupEntry {
                        id: g.id,
                        members: g.members().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
        merge_states,
        payload: PAYLOAD_FILE.into(),
        payload_bytes: offset,
        tensors,
    };
    fs::write(
        tmp.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(manifest)
}

/// Reads every payload tensor of the checkpoint in `dir`.
pub fn load_tensors(dir: &Path, manifest: &Manifest) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut bytes = Vec::new();
    File::open(dir.join(&manifest.payload))?.read_to_end(&mut bytes)?;
    if bytes.len() as u64 != manifest.payload_bytes {
        return Err(Error::Input(format!(
            "payload is {} bytes, manifest says {}",
            bytes.len(),
            manifest.payload_bytes
        )));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Input(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok(out)
}

struct Store(BTreeMap<String, Tensor<f32>>);

impl Store {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Shape {
                op: "checkpoint restore",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(t)
    }

    fn take_flat(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.take(name, &[len])?.into_data())
    }
}

fn restore_model(model: &mut Model<f32>, manifest: &Manifest, store: &mut Store) -> Result<()> {
    let base_names: Vec<(String, Vec<usize>)> = model
        .base
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut fresh = Vec::with_capacity(base_names.len());
    for (name, shape) in &base_names {
        fresh.push(store.take(name, shape)?);
    }
    let base = &mut model.base;
    let mut it = fresh.into_iter();
    let mut next = || it.next().expect("one tensor per name");
    base.token_embedding = next();
    base.position_embedding = next();
    for b in base.blocks.iter_mut() {
        for slot in [
            &mut b.ln1_gamma,
            &mut b.ln1_beta,
            &mut b.w_q,
            &mut b.w_k,
            &mut b.w_v,
            &mut b.w_o,
            &mut b.ln2_gamma,
            &mut b.ln2_beta,
            &mut b.w_1,
            &mut b.b_1,
            &mut b.w_2,
            &mut b.b_2,
        ] {
            *slot = next();
        }
    }
    base.final_gamma = next();
    base.final_beta = next();

    let cfg = model.adapter_config().clone();
    let mut banks = Vec::new();
    for entry in &manifest.banks {
        let template = model
            .bank(entry.projection)
            .ok_or_else(|| Error::Input(format!("{} is not adapted", entry.projection)))?;
        let a_shape = template.a_matrices()[0].shape().to_vec();
        let b_shape = [template.dim(), template.rank()];
        let a = (0..template.a_matrices().len())
            .map(|i| store.take(&template.a_name(i), &a_shape))
            .collect::<Result<Vec<_>>>()?;
        let groups = entry
            .groups
            .iter()
            .map(|g| {
                let b = store.take(&template.b_name(g.id), &b_shape)?;
                Ok((g.id, g.members.clone(), b))
            })
            .collect::<Result<Vec<_>>>()?;
        banks.push(AdapterBank::from_parts(&cfg, entry.projection, a, groups)?);
    }
    model.replace_banks(banks);
    let hw = model.head_w.shape().to_vec();
    let hb = model.head_b.shape().to_vec();
    model.head_w = store.take("head.w", &hw)?;
    model.head_b = store.take("head.b", &hb)?;
    Ok(())
}

impl Trainer<f32> {
    /// Rebuilds the trainer described by `config` and loads the checkpoint in `dir`.
    pub fn from_checkpoint(config: &RunConfig, dir: &Path) -> Result<Self> {
        let data: Dataset = config.task_spec().generate()?;
        Self::from_checkpoint_with_data(config, data, dir)
    }

    pub fn from_checkpoint_with_data(config: &RunConfig, data: Dataset, dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if manifest.format != FORMAT {
            return Err(Error::Input(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        if manifest.config_hash != config.hash() {
            return Err(Error::config(
                "config_hash",
                "checkpoint was written under a different configuration",
            ));
        }
        config.validate()?;
        let model = Model::<f32>::init(config.model_config(), config.adapter_config(), config.seed)?;
        let mut trainer = Trainer::new(config.plan(), model, data)?;
        let mut store = Store(load_tensors(dir, &manifest)?);
        restore_model(&mut trainer.model, &manifest, &mut store)?;

        trainer.optimizer.state.step = manifest.optimizer_step;
        for key in &manifest.optimizer_keys {
            let (mn, vn) = moment_names(key);
            let len = store
                .0
                .get(&mn)
                .map(Tensor::numel)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {mn}")))?;
            let m = store.take_flat(&mn, len)?;
            let v = store.take_flat(&vn, len)?;
            trainer.optimizer.state.insert(key.clone(), Moments { m, v });
        }

        for st in &manifest.merge_states {
            let shape = [config.model_dim, config.rank];
            let averages = st
                .averages
                .iter()
                .map(|a| {
                    let mean = store.take(&average_name(st.projection, a.group), &shape)?;
                    Ok(RunningAverage::from_parts(a.group, mean, a.count))
                })
                .collect::<Result<Vec<_>>>()?;
            trainer
                .engine
                .restore_state(st.projection, st.remaining, st.merges_done, averages)?;
        }
        if let Some(name) = store.0.keys().next() {
            return Err(Error::Input(format!("unexpected tensor {name} in checkpoint")));
        }

        let seed_bytes: Vec<u8> = (0..manifest.rng.seed.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&manifest.rng.seed[i..i + 2], 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Input("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = manifest
            .rng
            .word_pos
            .parse()
            .map_err(|e| Error::Input(format!("bad rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(manifest.rng.stream);
        rng.set_word_pos(word_pos);
        trainer.rng = rng;
        trainer.step = manifest.step;
        trainer.finished_at = manifest.finished_at;
        trainer.initial_train_loss = manifest.initial_train_loss_bits.map(f64::from_bits);
        Ok(trainer)
    }
}
