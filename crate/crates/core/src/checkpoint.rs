//! Checkpoint files: a configuration snapshot, named counters and named f32
//! tensors, protected by a trailing CRC-32.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BRIVLCKPT"  u16 version  u64 body_len
//! body:  string config  u32 n_meta  (string key, u64 value)*
//!        u32 n_blobs  (string name, u8 rank, u64 dim*, f32 value*)*
//! u32 crc32(everything before it)
//! ```

use std::path::Path;

use brivl_tensor::{Adam, ParamSet, Tensor};

use crate::bytes::{put_string, Reader};
use crate::config::RunConfig;
use crate::contrastive::{NegativeQueue, TrainState, Trainer};
use crate::error::{Error, FormatFault, Result};
use crate::imagination::ToyGenerator;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"BRIVLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER: usize = 9 + 2 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: Vec<(String, u64)>,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<u64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Data(format!("checkpoint has no `{key}` entry")))
    }

    pub fn blob(&self, name: &str) -> Result<&Tensor<f32>> {
        self.blobs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Data(format!("checkpoint has no `{name}` tensor")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_string(&mut body, &self.config);
        body.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut body, k);
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            put_string(&mut body, name);
            body.push(t.shape().len() as u8);
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER + body.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(buf, "checkpoint");
        let magic = rd.take(9, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(rd.fault(FormatFault::BadMagic, 0, format!("expected BRIVLCKPT, found {magic:?}")));
        }
        let version = rd.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(rd.fault(
                FormatFault::Version,
                9,
                format!("version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let body_len = rd.u64("body length")? as usize;
        let want = HEADER.saturating_add(body_len).saturating_add(4);
        if buf.len() < want {
            return Err(rd.fault(
                FormatFault::Truncated,
                buf.len() as u64,
                format!("file holds {} bytes, header promises {want}", buf.len()),
            ));
        }
        if buf.len() > want {
            return Err(rd.fault(FormatFault::Corrupt, want as u64, "trailing bytes after checksum"));
        }
        let stored = u32::from_le_bytes(buf[want - 4..].try_into().unwrap());
        let actual = crc32fast::hash(&buf[..want - 4]);
        if stored != actual {
            return Err(rd.fault(
                FormatFault::Checksum,
                (want - 4) as u64,
                format!("stored CRC-32 {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut rd = Reader::new(&buf[..want - 4], "checkpoint");
        rd.take(HEADER, "header")?;
        let config = rd.string("config")?;
        let n_meta = rd.u32("meta count")?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            let k = rd.string("meta key")?;
            meta.push((k, rd.u64("meta value")?));
        }
        let n_blobs = rd.u32("tensor count")?;
        let mut blobs = Vec::new();
        for _ in 0..n_blobs {
            let at = rd.offset();
            let name = rd.string("tensor name")?;
            let rank = rd.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u64("tensor dim")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= rd.remaining()))
                .ok_or_else(|| rd.fault(FormatFault::Corrupt, at, format!("tensor `{name}` shape {shape:?}")))?;
            let raw = rd.take(4 * n, "tensor values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| rd.fault(FormatFault::Corrupt, at, e.to_string()))?;
            blobs.push((name, t));
        }
        if rd.remaining() != 0 {
            return Err(rd.fault(FormatFault::Corrupt, rd.offset(), "unparsed bytes inside the body"));
        }
        Ok(Self { config, meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

fn put_params(blobs: &mut Vec<(String, Tensor<f32>)>, prefix: &str, p: &ParamSet) {
    for param in p.iter() {
        blobs.push((format!("{prefix}/{}", param.name), param.value.clone()));
    }
}

fn take_params(ck: &Checkpoint, prefix: &str, like: &ParamSet) -> Result<ParamSet> {
    let mut out = like.clone();
    for param in out.iter_mut() {
        let t = ck.blob(&format!("{prefix}/{}", param.name))?;
        if t.shape() != param.value.shape() {
            return Err(Error::Data(format!(
                "`{prefix}/{}` has shape {:?}, the configured model expects {:?}",
                param.name,
                t.shape(),
                param.value.shape()
            )));
        }
        param.value = t.clone();
    }
    Ok(out)
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam, like: &ParamSet) {
    let (m, v) = adam.moments();
    for ((param, m), v) in like.iter().zip(m).zip(v) {
        let shape = param.value.shape();
        ck.blobs.push((
            format!("{prefix}.m/{}", param.name),
            Tensor::new(shape, m.clone()).expect("moment matches parameter"),
        ));
        ck.blobs.push((
            format!("{prefix}.v/{}", param.name),
            Tensor::new(shape, v.clone()).expect("moment matches parameter"),
        ));
    }
    ck.meta.push((format!("{prefix}.step"), adam.steps_taken()));
}

fn take_adam(ck: &Checkpoint, prefix: &str, like: &Adam, params: &ParamSet) -> Result<Adam> {
    let m = take_params(ck, &format!("{prefix}.m"), params)?;
    let v = take_params(ck, &format!("{prefix}.v"), params)?;
    let flat = |p: ParamSet| p.iter().map(|x| x.value.data().to_vec()).collect();
    Ok(Adam::from_parts(like.config, ck.meta(&format!("{prefix}.step"))?, flat(m), flat(v)))
}

fn put_queue(ck: &mut Checkpoint, name: &str, q: &NegativeQueue) {
    ck.blobs.push((
        format!("queue/{name}"),
        Tensor::new(&[q.capacity(), q.dim()], q.raw_slots().to_vec()).expect("queue slots"),
    ));
    ck.meta.push((format!("queue.{name}.len"), q.len() as u64));
    ck.meta.push((format!("queue.{name}.head"), q.head() as u64));
}

fn take_queue(ck: &Checkpoint, name: &str) -> Result<NegativeQueue> {
    let t = ck.blob(&format!("queue/{name}"))?;
    if t.shape().len() != 2 {
        return Err(Error::Data(format!("queue/{name} must be a matrix")));
    }
    NegativeQueue::from_parts(
        t.shape()[0],
        t.shape()[1],
        t.data().to_vec(),
        ck.meta(&format!("queue.{name}.len"))? as usize,
        ck.meta(&format!("queue.{name}.head"))? as usize,
    )
}

/// Snapshot of a trainer: four towers, both optimizers, both queues and the
/// step counter, under the given run configuration.
pub fn trainer_checkpoint(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    let s = &trainer.state;
    let mut ck = Checkpoint {
        config: cfg.to_text(),
        meta: vec![("kind.trainer".into(), 1), ("step".into(), s.step)],
        blobs: Vec::new(),
    };
    put_params(&mut ck.blobs, "image", &s.image);
    put_params(&mut ck.blobs, "text", &s.text);
    put_params(&mut ck.blobs, "image_m", &s.image_m);
    put_params(&mut ck.blobs, "text_m", &s.text_m);
    put_adam(&mut ck, "adam_image", &s.adam_image, &s.image);
    put_adam(&mut ck, "adam_text", &s.adam_text, &s.text);
    put_queue(&mut ck, "image", &s.queue_image);
    put_queue(&mut ck, "text", &s.queue_text);
    ck
}

/// Rebuilds the configuration and trainer stored by [`trainer_checkpoint`].
pub fn restore_trainer(ck: &Checkpoint) -> Result<(RunConfig, Trainer)> {
    if ck.meta("kind.trainer").is_err() {
        return Err(Error::Data("checkpoint does not hold a trained model".into()));
    }
    let cfg = RunConfig::parse(&ck.config)?;
    let fresh = Trainer::new(&cfg.encoder, &cfg.trainer)?;
    let f = &fresh.state;
    let state = TrainState {
        step: ck.meta("step")?,
        image: take_params(ck, "image", &f.image)?,
        text: take_params(ck, "text", &f.text)?,
        image_m: take_params(ck, "image_m", &f.image)?,
        text_m: take_params(ck, "text_m", &f.text)?,
        adam_image: take_adam(ck, "adam_image", &f.adam_image, &f.image)?,
        adam_text: take_adam(ck, "adam_text", &f.adam_text, &f.text)?,
        queue_image: take_queue(ck, "image")?,
        queue_text: take_queue(ck, "text")?,
    };
    let trainer = Trainer::from_state(&cfg.encoder, &cfg.trainer, state)?;
    Ok((cfg, trainer))
}

pub fn generator_checkpoint(cfg: &RunConfig, generator: &ToyGenerator) -> Checkpoint {
    let mut ck = Checkpoint {
        config: cfg.to_text(),
        meta: vec![("kind.generator".into(), 1)],
        blobs: Vec::new(),
    };
    put_params(&mut ck.blobs, "generator", generator.params());
    ck
}

pub fn restore_generator(ck: &Checkpoint) -> Result<(RunConfig, ToyGenerator)> {
    if ck.meta("kind.generator").is_err() {
        return Err(Error::Data("checkpoint does not hold a generator".into()));
    }
    let cfg = RunConfig::parse(&ck.config)?;
    let fresh = ToyGenerator::new(&cfg.generator, cfg.encoder.image_size)?;
    let params = take_params(ck, "generator", fresh.params())?;
    let gen = ToyGenerator::from_params(&cfg.generator, cfg.encoder.image_size, params)?;
    Ok((cfg, gen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "seed = 3\n".into(),
            meta: vec![("step".into(), 42)],
            blobs: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    fn fault(r: Result<Checkpoint>) -> FormatFault {
        match r {
            Err(Error::Format { fault, .. }) => fault,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        for ((_, a), (_, b)) in back.blobs.iter().zip(&ck.blobs) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn each_corruption_has_its_own_fault() {
        let bytes = sample().encode();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert_eq!(fault(Checkpoint::decode(&m)), FormatFault::BadMagic);
        let mut v = bytes.clone();
        v[9] = 9;
        assert_eq!(fault(Checkpoint::decode(&v)), FormatFault::Version);
        assert_eq!(fault(Checkpoint::decode(&bytes[..bytes.len() - 10])), FormatFault::Truncated);
        assert_eq!(fault(Checkpoint::decode(&bytes[..5])), FormatFault::Truncated);
        let mut c = bytes.clone();
        c[40] ^= 0x10;
        assert_eq!(fault(Checkpoint::decode(&c)), FormatFault::Checksum);
        let mut t = bytes.clone();
        t.push(0);
        assert_eq!(fault(Checkpoint::decode(&t)), FormatFault::Corrupt);
    }

    #[test]
    fn missing_entries_are_data_errors() {
        let ck = sample();
        assert!(matches!(ck.meta("nope"), Err(Error::Data(_))));
        assert!(matches!(ck.blob("nope"), Err(Error::Data(_))));
        assert!(restore_trainer(&ck).is_err());
        assert!(restore_generator(&ck).is_err());
    }
}
