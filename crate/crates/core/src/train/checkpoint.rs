//! Self-contained binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TLM1" | u32 version
//! u32 len | config text (key = value lines)
//! u32 len | state text (step, optimizer step, λ_max, loss EMA)
//! u32 record count
//! record*: u16 name len | name | u8 kind | u8 ndim | u64 dims… |
//!          [f64 scale, trit records only] | u64 payload len | payload
//! u32 CRC-32 of everything above
//! ```
//!
//! Kind 0 is fp32 (4 bytes per value), kind 1 is packed trits (2 bits each).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{Model, Variant};
use crate::reservoir::SharedFixed;
use crate::tensor::Tensor;
use crate::ternary::TernaryMatrix;
use crate::train::config::TrainConfig;
use crate::train::optim::Adam;
use crate::train::trainer::Trainer;

pub const MAGIC: &[u8; 4] = b"TLM1";
pub const VERSION: u32 = 1;
const KIND_FP32: u8 = 0;
const KIND_TRIT2: u8 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub step: usize,
    pub ema: (f64, f64),
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
            step: t.step,
            ema: t.ema,
        }
    }

    pub fn into_trainer(self, tokens: Vec<usize>) -> Result<Trainer> {
        Trainer::from_parts(
            self.config,
            self.model,
            Some(self.optimizer),
            self.step,
            self.ema,
            tokens,
        )
    }
}

enum Payload<'a> {
    Fp32(&'a Tensor<f32>),
    Trits(&'a TernaryMatrix),
}

struct Writer {
    buf: Vec<u8>,
    records: u32,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn record(&mut self, name: &str, payload: Payload) {
        self.records += 1;
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        match payload {
            Payload::Fp32(t) => {
                self.buf.push(KIND_FP32);
                self.buf.push(t.shape().len() as u8);
                t.shape().iter().for_each(|&d| self.u64(d as u64));
                self.u64(4 * t.numel() as u64);
                for v in t.data() {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Trits(m) => {
                self.buf.push(KIND_TRIT2);
                self.buf.push(2);
                self.u64(m.rows() as u64);
                self.u64(m.cols() as u64);
                self.buf.extend_from_slice(&m.scale().to_le_bytes());
                self.u64(m.packed().len() as u64);
                self.buf.extend_from_slice(m.packed());
            }
        }
    }
}

fn state_text(c: &Checkpoint) -> String {
    let lambda = c.model.shared().map_or(0.0, |s| s.lambda_max());
    format!(
        "step = {}\nadam_step = {}\nlambda_max = {}\nema_sum = {}\nema_weight = {}\n",
        c.step, c.optimizer.step, lambda, c.ema.0, c.ema.1
    )
}

pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::new(),
        records: 0,
    };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.text(&c.config.to_text());
    w.text(&state_text(c));
    let count_at = w.buf.len();
    w.u32(0);
    let store = &c.model.params;
    for (id, p) in store.iter() {
        w.record(&format!("param/{}", p.name), Payload::Fp32(&p.latent));
        if let (Some(m), Some(v)) = (&c.optimizer.m[id.index()], &c.optimizer.v[id.index()]) {
            w.record(&format!("adam_m/{}", p.name), Payload::Fp32(m));
            w.record(&format!("adam_v/{}", p.name), Payload::Fp32(v));
        }
    }
    if let Some(s) = c.model.shared() {
        for (name, m) in s.matrices() {
            w.record(&format!("shared/{name}"), Payload::Trits(m));
        }
    }
    let records = w.records;
    w.buf[count_at..count_at + 4].copy_from_slice(&records.to_le_bytes());
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Atomic save: write a sibling temp file, then rename over `path`.
pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(c))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Checkpoint(what.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("text block is not UTF-8"))
    }
}

enum Record {
    Fp32(Tensor<f32>),
    Trits(TernaryMatrix),
}

fn read_record(r: &mut Reader) -> Result<(String, Record)> {
    let n = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(n)?)
        .map_err(|_| corrupt("record name is not UTF-8"))?
        .to_string();
    let kind = r.u8()?;
    let ndim = r.u8()? as usize;
    let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let record = match kind {
        KIND_FP32 => {
            let len = r.len()?;
            let numel: usize = dims.iter().product();
            if len != 4 * numel {
                return Err(corrupt(format!("{name}: payload of {len} bytes for {numel} values")));
            }
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Record::Fp32(Tensor::new(dims, data)?)
        }
        KIND_TRIT2 => {
            if ndim != 2 {
                return Err(corrupt(format!("{name}: trit records are matrices")));
            }
            let scale = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let len = r.len()?;
            let packed = r.take(len)?.to_vec();
            Record::Trits(TernaryMatrix::from_packed(dims[0], dims[1], packed, scale)?)
        }
        k => return Err(corrupt(format!("{name}: unknown record kind {k}"))),
    };
    Ok((name, record))
}

fn parse_state(text: &str) -> Result<HashMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| corrupt(format!("bad state line `{l}`")))
        })
        .collect()
}

fn state_value<T: std::str::FromStr>(state: &HashMap<String, String>, key: &str) -> Result<T> {
    state
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(format!("missing or invalid state `{key}`")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("CRC mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let config = TrainConfig::parse(r.text()?, None)?;
    let state = parse_state(r.text()?)?;
    let count = r.u32()?;
    let mut records = HashMap::new();
    for _ in 0..count {
        let (name, rec) = read_record(&mut r)?;
        records.insert(name, rec);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes before CRC"));
    }

    let mut take_trits = |name: &str| -> Result<Arc<TernaryMatrix>> {
        match records.remove(&format!("shared/{name}")) {
            Some(Record::Trits(m)) => Ok(Arc::new(m)),
            _ => Err(corrupt(format!("missing fixed matrix {name}"))),
        }
    };
    let shared = match config.model.variant {
        Variant::Base => None,
        _ if config.model.n_layers == 0 => None,
        v => {
            let (w_c, w_r) = (take_trits("w_c")?, take_trits("w_r")?);
            let (w_f, w_g) = if v == Variant::Grc {
                (Some(take_trits("w_f")?), Some(take_trits("w_g")?))
            } else {
                (None, None)
            };
            Some(SharedFixed::from_parts(
                w_c,
                w_r,
                w_f,
                w_g,
                state_value(&state, "lambda_max")?,
            )?)
        }
    };
    let mut model = Model::<f32>::with_shared(&config.model, shared)?;
    let mut optimizer = Adam::new(&model.params);
    optimizer.step = state_value(&state, "adam_step")?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.get(id).name.clone();
        let mut fp = |prefix: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            match records.remove(&format!("{prefix}/{name}")) {
                Some(Record::Fp32(t)) if t.shape() == shape => Ok(t),
                Some(_) => Err(corrupt(format!("{prefix}/{name} has the wrong kind or shape"))),
                None => Err(corrupt(format!("missing {prefix}/{name}"))),
            }
        };
        let shape = model.params.get(id).latent.shape().to_vec();
        model.params.get_mut(id).latent = fp("param", &shape)?;
        if model.params.get(id).trainable() {
            optimizer.m[id.index()] = Some(fp("adam_m", &shape)?);
            optimizer.v[id.index()] = Some(fp("adam_v", &shape)?);
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(corrupt(format!("unexpected record {extra}")));
    }
    model.refresh_quantized()?;
    Ok(Checkpoint {
        config,
        model,
        optimizer,
        step: state_value(&state, "step")?,
        ema: (state_value(&state, "ema_sum")?, state_value(&state, "ema_weight")?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ModelConfig;

    fn trainer(variant: Variant) -> Trainer {
        let config = TrainConfig {
            model: ModelConfig {
                vocab: 16,
                ..ModelConfig::tiny(variant)
            },
            batch_size: 2,
            total_steps: 4,
            ..Default::default()
        };
        let tokens = (0..300).map(|i| (i * 5 + i / 7) % 16).collect();
        let mut t = Trainer::new(config, tokens).unwrap();
        t.train_step().unwrap();
        t
    }

    #[test]
    fn save_load_save_identical() {
        for v in Variant::ALL {
            let t = trainer(v);
            let bytes = to_bytes(&Checkpoint::from_trainer(&t));
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(to_bytes(&back), bytes, "{v}");
            assert_eq!(back.step, 1);
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = to_bytes(&Checkpoint::from_trainer(&trainer(Variant::Rc)));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"nope").is_err());
    }

    #[test]
    fn atomic_save_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = Checkpoint::from_trainer(&trainer(Variant::Grc));
        save(&c, &path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = load(&path).unwrap();
        assert_eq!(
            back.model.forward(&[1, 2, 3]).unwrap(),
            c.model.forward(&[1, 2, 3]).unwrap()
        );
    }
}
