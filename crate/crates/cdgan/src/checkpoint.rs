//! Single-file checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "CDGANCKP" | u32 format version | u64 sidecar length | sidecar (TOML)
//! u32 entry count | entries: u16 name length, name, u8 dtype, u8 rank,
//!                            u64 dims[rank], raw values
//! ```
//!
//! The sidecar carries the model config, the tied-group list, the domain
//! names and, for training checkpoints, everything needed to resume bit for
//! bit: train config, iteration, RNG and sampler positions, ADAM step counts.
//! Parameter tensors are keyed `<network>/<layer>/<param>`; tied tensors are
//! stored under both owners and must agree on load. ADAM moments are keyed
//! `adam/<key of the slot's first owner>/{m,v}` and the loss history is one
//! `f64` matrix named `history`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use cdgan_core::data::BatchSampler;
use cdgan_core::losses::{LossBreakdown, Phase};
use cdgan_core::model::{ModelConfig, ModelParams, ParamId, TiedGroup};
use cdgan_core::optim::AdamMoments;
use cdgan_core::trainer::{LossRecord, RngState, TrainConfig, TrainState};
use cdgan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CDGANCKP";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const HISTORY_KEY: &str = "history";
const HISTORY_COLS: usize = 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    domains: Vec<String>,
    tied_groups: Vec<TiedGroup>,
    model: ModelConfig,
    training: Option<TrainingSidecar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingSidecar {
    iteration: u64,
    train: TrainConfig,
    // u64/u128 values travel as hex strings: TOML integers are i64.
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    sampler_seed: String,
    sampler_draws: Vec<String>,
    adam_steps: BTreeMap<String, String>,
}

/// What a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub domains: Vec<String>,
    pub params: ModelParams<f32>,
    pub training: Option<TrainingSnapshot>,
}

#[derive(Debug, Clone)]
pub struct TrainingSnapshot {
    pub train: TrainConfig,
    pub iteration: u64,
    pub moments: Vec<AdamMoments<f32>>,
    pub rng: RngState,
    pub sampler_seed: u64,
    pub sampler_draws: Vec<u64>,
    pub loss_history: Vec<LossRecord>,
}

impl Checkpoint {
    /// Rebuilds a resumable training state. Fails for model-only checkpoints.
    pub fn into_state(self) -> Result<(TrainState<f32>, TrainConfig)> {
        let t = self.training.ok_or_else(|| Error::Config("checkpoint holds no training state".into()))?;
        let state = TrainState {
            params: self.params,
            moments: t.moments,
            iteration: t.iteration,
            pair_rng: t.rng.restore(),
            sampler: BatchSampler::from_state(t.sampler_seed, t.sampler_draws),
            loss_history: t.loss_history,
        };
        Ok((state, t.train))
    }
}

/// First key of every slot, in slot order.
fn slot_keys(params: &ModelParams<f32>) -> Vec<String> {
    let mut keys: Vec<Option<String>> = vec![None; params.slot_count()];
    for (name, id) in params.named_params() {
        keys[id.0].get_or_insert(name);
    }
    keys.into_iter()
        .enumerate()
        .map(|(i, k)| k.unwrap_or_else(|| format!("slot{i}")))
        .collect()
}

pub fn save_model(path: &Path, params: &ModelParams<f32>, domains: &[String]) -> Result<()> {
    write_container(path, params, domains, None)
}

pub fn save_state(path: &Path, state: &TrainState<f32>, train: &TrainConfig, domains: &[String]) -> Result<()> {
    write_container(path, &state.params, domains, Some((state, train)))
}

fn write_container(
    path: &Path,
    params: &ModelParams<f32>,
    domains: &[String],
    training: Option<(&TrainState<f32>, &TrainConfig)>,
) -> Result<()> {
    let keys = slot_keys(params);
    let mut entries: Vec<(String, Entry<'_>)> = params
        .named_params()
        .into_iter()
        .map(|(name, id)| {
            let t = params.tensor(id);
            (name, Entry::F32(t.shape().to_vec(), t.data()))
        })
        .collect();
    let mut history = Vec::new();
    let training_sidecar = training.map(|(state, train)| {
        let mut adam_steps = BTreeMap::new();
        for (i, m) in state.moments.iter().enumerate() {
            let shape = params.tensor(ParamId(i)).shape().to_vec();
            entries.push((format!("adam/{}/m", keys[i]), Entry::F32(shape.clone(), &m.m)));
            entries.push((format!("adam/{}/v", keys[i]), Entry::F32(shape, &m.v)));
            adam_steps.insert(keys[i].clone(), hex(m.step as u128));
        }
        for r in &state.loss_history {
            history.push(r.iteration as f64);
            history.extend(breakdown_values(&r.d));
            history.extend(breakdown_values(&r.eg));
        }
        let rng = RngState::capture(&state.pair_rng);
        TrainingSidecar {
            iteration: state.iteration,
            train: train.clone(),
            rng_seed: rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
            rng_stream: hex(rng.stream as u128),
            rng_word_pos: hex(rng.word_pos),
            sampler_seed: hex(state.sampler.seed() as u128),
            sampler_draws: state.sampler.draws().iter().map(|d| hex(*d as u128)).collect(),
            adam_steps,
        }
    });
    if training.is_some() {
        let rows = history.len() / HISTORY_COLS;
        entries.push((HISTORY_KEY.into(), Entry::F64(vec![rows, HISTORY_COLS], &history)));
    }
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        domains: domains.to_vec(),
        tied_groups: params.tied_groups().to_vec(),
        model: params.config().clone(),
        training: training_sidecar,
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::Config(format!("serializing sidecar: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, entry) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = entry.shape();
        buf.push(entry.dtype());
        buf.push(shape.len() as u8);
        for d in shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match entry {
            Entry::F32(_, v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Entry::F64(_, v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

enum Entry<'a> {
    F32(Vec<usize>, &'a [f32]),
    F64(Vec<usize>, &'a [f64]),
}

impl Entry<'_> {
    fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(s, _) | Entry::F64(s, _) => s,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Entry::F32(..) => DTYPE_F32,
            Entry::F64(..) => DTYPE_F64,
        }
    }
}

enum Owned {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

fn breakdown_values(b: &LossBreakdown) -> [f64; 8] {
    [b.gan_x, b.gan_y, b.rec, b.lcl, b.cls_real, b.cls_fake, b.cyc, b.composite]
}

fn breakdown_from(phase: Phase, v: &[f64]) -> LossBreakdown {
    LossBreakdown {
        phase,
        gan_x: v[0],
        gan_y: v[1],
        rec: v[2],
        lcl: v[3],
        cls_real: v[4],
        cls_fake: v[5],
        cyc: v[6],
        composite: v[7],
    }
}

fn hex(v: u128) -> String {
    format!("{v:x}")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|s| u16::from_le_bytes(s.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let truncated = || bad("truncated file".into());

    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8) != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let side_len = r.u64().ok_or_else(truncated)? as usize;
    let side = std::str::from_utf8(r.take(side_len).ok_or_else(truncated)?)
        .map_err(|_| bad("sidecar is not UTF-8".into()))?;
    let sidecar: Sidecar = toml::from_str(side).map_err(|e| bad(format!("sidecar: {e}")))?;
    if sidecar.format_version != version {
        return Err(bad("sidecar and header disagree on the format version".into()));
    }

    let count = r.u32().ok_or_else(truncated)?;
    let mut tensors: HashMap<String, Owned> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(name_len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let dtype = r.u8().ok_or_else(truncated)?;
        let rank = r.u8().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(truncated)?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let owned = match dtype {
            DTYPE_F32 => {
                let raw = r.take(len.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
                Owned::F32(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DTYPE_F64 => {
                let raw = r.take(len.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
                Owned::F64(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            other => return Err(bad(format!("tensor {name} has unknown dtype {other}"))),
        };
        if tensors.insert(name.clone(), owned).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let model = sidecar.model;
    if sidecar.domains.len() != model.n_domains {
        return Err(bad(format!(
            "{} domain names for a {}-domain model",
            sidecar.domains.len(),
            model.n_domains
        )));
    }
    let mut f32_tensor = |name: &str| -> Option<Tensor<f32>> {
        match tensors.get(name) {
            Some(Owned::F32(shape, data)) => Tensor::from_vec(shape, data.clone()).ok(),
            _ => None,
        }
    };
    let params = ModelParams::from_named(&model, &mut f32_tensor).map_err(|e| bad(e.to_string()))?;
    if params.tied_groups() != sidecar.tied_groups.as_slice() {
        return Err(bad("tied_groups in the sidecar do not match the model config".into()));
    }
    if params.max_tied_difference() != 0.0 {
        return Err(bad("tied parameters differ".into()));
    }

    let training = match sidecar.training {
        None => None,
        Some(t) => {
            let parse = |s: &str, what: &str| {
                u128::from_str_radix(s, 16).map_err(|_| bad(format!("{what}: {s:?} is not a hex integer")))
            };
            let keys = slot_keys(&params);
            let mut moments = Vec::with_capacity(keys.len());
            for (i, key) in keys.iter().enumerate() {
                let shape = params.tensor(ParamId(i)).shape().to_vec();
                let mut get = |part: &str| match tensors.remove(&format!("adam/{key}/{part}")) {
                    Some(Owned::F32(s, d)) if s == shape => Ok(d),
                    _ => Err(bad(format!("missing or malformed ADAM moment adam/{key}/{part}"))),
                };
                let m = get("m")?;
                let v = get("v")?;
                let step = t
                    .adam_steps
                    .get(key)
                    .ok_or_else(|| bad(format!("missing ADAM step count for {key}")))?;
                moments.push(AdamMoments {
                    m,
                    v,
                    step: parse(step, "adam step")? as u64,
                });
            }
            let loss_history = match tensors.remove(HISTORY_KEY) {
                Some(Owned::F64(s, d)) if s.len() == 2 && s[1] == HISTORY_COLS => d
                    .chunks_exact(HISTORY_COLS)
                    .map(|row| LossRecord {
                        iteration: row[0] as u64,
                        d: breakdown_from(Phase::D, &row[1..9]),
                        eg: breakdown_from(Phase::EG, &row[9..17]),
                    })
                    .collect(),
                _ => return Err(bad("missing or malformed loss history".into())),
            };
            if t.rng_seed.len() != 64 {
                return Err(bad("rng seed must be 32 hex bytes".into()));
            }
            let mut seed = [0u8; 32];
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&t.rng_seed[2 * i..2 * i + 2], 16)
                    .map_err(|_| bad("rng seed is not hex".into()))?;
            }
            let sampler_draws = t
                .sampler_draws
                .iter()
                .map(|d| parse(d, "sampler draw").map(|v| v as u64))
                .collect::<Result<Vec<u64>>>()?;
            if sampler_draws.len() != model.n_domains {
                return Err(bad("sampler state does not match the domain count".into()));
            }
            Some(TrainingSnapshot {
                train: t.train,
                iteration: t.iteration,
                moments,
                rng: RngState {
                    seed,
                    stream: parse(&t.rng_stream, "rng stream")? as u64,
                    word_pos: parse(&t.rng_word_pos, "rng word position")?,
                },
                sampler_seed: parse(&t.sampler_seed, "sampler seed")? as u64,
                sampler_draws,
                loss_history,
            })
        }
    };
    Ok(Checkpoint {
        domains: sidecar.domains,
        params,
        training,
    })
}
