//! Binary training-state container.
//!
//! Layout (little-endian): magic `RUN1`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, `rank` dims as
//! `u32`, and `prod(dims)` `f64` values (one value for rank 0).

use std::fs;
use std::path::Path;

use super::train::{Adam, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::network::{ModuleSet, RichUNet, RichUNetConfig};
use crate::tensor::{seeded_rng, Rng, Tensor};
use rand::SeedableRng;

pub const MAGIC: &[u8; 4] = b"RUN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            data: vec![value],
        }
    }

    fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }

    fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                detail: format!("truncated while reading {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "bad magic, expected RUN1".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: start + 4,
                detail: "entry name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let payload = r.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

/// `u64` as two exactly representable `u32` halves, low first.
fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: f64, hi: f64) -> u64 {
    lo as u64 | (hi as u64) << 32
}

fn rng_words(rng: &Rng) -> Vec<f64> {
    let mut words: Vec<f64> = rng
        .get_seed()
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    words.extend(split_u64(rng.get_stream()));
    let pos = rng.get_word_pos();
    words.extend(split_u64(pos as u64));
    words.extend(split_u64((pos >> 64) as u64));
    words
}

fn rng_from_words(w: &[f64]) -> Result<Rng> {
    if w.len() != 14 {
        return Err(Error::Data(format!("rng state needs 14 words, got {}", w.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, &v) in seed.chunks_exact_mut(4).zip(&w[..8]) {
        chunk.copy_from_slice(&(v as u32).to_le_bytes());
    }
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(join_u64(w[8], w[9]));
    rng.set_word_pos(join_u64(w[10], w[11]) as u128 | (join_u64(w[12], w[13]) as u128) << 64);
    Ok(rng)
}

fn config_entries(net: &RichUNetConfig, train: &TrainConfig) -> Vec<Entry> {
    let m = net.modules;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        Entry::scalar("config.in_channels", net.in_channels as f64),
        Entry::scalar("config.num_classes", net.num_classes as f64),
        Entry::vector("config.stage_channels", net.stage_channels.iter().map(|&c| c as f64).collect()),
        Entry::scalar("config.heads", net.heads as f64),
        Entry::scalar("config.topk", net.topk as f64),
        Entry::scalar("config.drop_rate", net.drop_rate),
        Entry::scalar("config.patch_size", net.patch_size as f64),
        Entry::scalar("config.bottleneck_channels", net.bottleneck_channels as f64),
        Entry::scalar("config.reduction", net.reduction as f64),
        Entry::vector("config.modules", vec![flag(m.k_attention), flag(m.fusion_layer), flag(m.msagf)]),
        Entry::scalar("config.learning_rate", train.learning_rate),
        Entry::scalar("config.epochs", train.epochs as f64),
        Entry::scalar("config.batch_size", train.batch_size as f64),
        Entry::vector("config.seed", split_u64(train.seed).to_vec()),
        Entry::scalar("config.beta1", train.beta1),
        Entry::scalar("config.beta2", train.beta2),
        Entry::scalar("config.eps", train.eps),
        Entry::scalar("config.lambda", train.lambda),
        // Empty vector when unset.
        Entry::vector("config.steps", train.steps.map(|s| s as f64).into_iter().collect()),
        Entry::scalar("config.checkpoint_every", train.checkpoint_every as f64),
    ]
}

pub fn state_entries(state: &TrainState) -> Vec<Entry> {
    let mut entries = config_entries(state.net.config(), &state.config);
    entries.push(Entry::scalar("step", state.step as f64));
    entries.push(Entry::scalar("adam.t", state.optimizer.t as f64));
    entries.push(Entry::vector("rng", rng_words(&state.rng)));
    let store = state.net.store();
    for (i, (name, t)) in store.params().enumerate() {
        entries.push(Entry::tensor(format!("param.{name}"), t));
        entries.push(Entry::tensor(format!("adam.m.{name}"), &state.optimizer.m[i]));
        entries.push(Entry::tensor(format!("adam.v.{name}"), &state.optimizer.v[i]));
    }
    for (name, t) in store.buffers() {
        entries.push(Entry::tensor(format!("buffer.{name}"), t));
    }
    entries
}

pub fn encode_state(state: &TrainState) -> Vec<u8> {
    encode_entries(&state_entries(state))
}

struct Lookup(Vec<Entry>);

impl Lookup {
    fn get(&self, name: &str) -> Result<&Entry> {
        self.0
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing entry {name}")))
    }

    fn values(&self, name: &str, len: usize) -> Result<&[f64]> {
        let e = self.get(name)?;
        if e.data.len() != len {
            return Err(Error::Data(format!("entry {name} has {} values, expected {len}", e.data.len())));
        }
        Ok(&e.data)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.values(name, 1)?[0])
    }

    fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Data(format!("entry {name} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    fn tensor_into(&self, name: &str, target: &mut Tensor) -> Result<()> {
        let e = self.get(name)?;
        if e.shape != target.shape() {
            return Err(Error::Data(format!(
                "entry {name} has shape {:?}, expected {:?}",
                e.shape,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&e.data);
        Ok(())
    }
}

fn configs_from(l: &Lookup) -> Result<(RichUNetConfig, TrainConfig)> {
    let stages = l.values("config.stage_channels", 3)?;
    let modules = l.values("config.modules", 3)?;
    let seed = l.values("config.seed", 2)?;
    let steps = &l.get("config.steps")?.data;
    let net = RichUNetConfig {
        in_channels: l.count("config.in_channels")?,
        num_classes: l.count("config.num_classes")?,
        stage_channels: [stages[0] as usize, stages[1] as usize, stages[2] as usize],
        heads: l.count("config.heads")?,
        topk: l.count("config.topk")?,
        drop_rate: l.scalar("config.drop_rate")?,
        patch_size: l.count("config.patch_size")?,
        bottleneck_channels: l.count("config.bottleneck_channels")?,
        reduction: l.count("config.reduction")?,
        modules: ModuleSet {
            k_attention: modules[0] != 0.0,
            fusion_layer: modules[1] != 0.0,
            msagf: modules[2] != 0.0,
        },
    };
    let train = TrainConfig {
        learning_rate: l.scalar("config.learning_rate")?,
        epochs: l.count("config.epochs")?,
        batch_size: l.count("config.batch_size")?,
        seed: join_u64(seed[0], seed[1]),
        beta1: l.scalar("config.beta1")?,
        beta2: l.scalar("config.beta2")?,
        eps: l.scalar("config.eps")?,
        lambda: l.scalar("config.lambda")?,
        steps: steps.first().map(|&s| s as usize),
        checkpoint_every: l.count("config.checkpoint_every")?,
    };
    train.validate()?;
    Ok((net, train))
}

/// Rebuilds the full training state; nothing is returned on any error.
pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let l = Lookup(decode_entries(bytes)?);
    let (net_config, config) = configs_from(&l)?;
    // Initial values are overwritten below; the generator only fixes shapes.
    let mut net = RichUNet::build(&net_config, &mut seeded_rng(0))?;
    let mut optimizer = Adam::new(net.store());
    let store = net.store_mut();
    for (i, (name, t)) in store.params_mut().enumerate() {
        l.tensor_into(&format!("param.{name}"), t)?;
        l.tensor_into(&format!("adam.m.{name}"), &mut optimizer.m[i])?;
        l.tensor_into(&format!("adam.v.{name}"), &mut optimizer.v[i])?;
    }
    let buffer_names: Vec<String> = store.buffers().map(|(n, _)| n.to_owned()).collect();
    for name in buffer_names {
        let id = store.find_buffer(&name).unwrap();
        l.tensor_into(&format!("buffer.{name}"), store.buffer_mut(id))?;
    }
    optimizer.t = l.count("adam.t")? as u64;
    Ok(TrainState {
        net,
        optimizer,
        rng: rng_from_words(l.values("rng", 14)?)?,
        step: l.count("step")?,
        config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_state(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_state(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synth_dataset;
    use crate::harness::train::train;
    use rand::RngCore;

    fn trained_state() -> TrainState {
        let net = RichUNetConfig {
            stage_channels: [2, 4, 8],
            heads: 2,
            topk: 4,
            bottleneck_channels: 4,
            reduction: 2,
            ..RichUNetConfig::default()
        };
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            seed: u64::MAX - 3,
            steps: Some(7),
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&net, cfg).unwrap();
        let data = synth_dataset(3, 16, 16, 0).unwrap();
        train(&mut state, &data, 2, |_, _| Ok(())).unwrap();
        state
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let state = trained_state();
        let bytes = encode_state(&state);
        let mut restored = decode_state(&bytes).unwrap();
        assert_eq!(encode_state(&restored), bytes);
        assert_eq!(restored.config, state.config);
        assert_eq!(restored.rng.next_u64(), state.rng.clone().next_u64());
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = encode_state(&trained_state());
        let offset = |b: &[u8]| match decode_state(b) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {:?}", other.map(|s| s.step)),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(offset(&bad), 4);
        assert_eq!(offset(&bytes[..bytes.len() - 3]), bytes.len() - 3);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(&long), bytes.len());
    }

    #[test]
    fn u64_halves_round_trip() {
        for v in [0, 1, u64::MAX, 0xdead_beef_0000_0001] {
            let [lo, hi] = split_u64(v);
            assert_eq!(join_u64(lo, hi), v);
        }
    }
}
