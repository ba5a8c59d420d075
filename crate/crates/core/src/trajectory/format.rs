//! The `TRJ1` container: little-endian, fixed-width step records, CRC32
//! trailer over every preceding byte.
//!
//! ```text
//! "TRJ1" | version u16 | dtype u8 | storage u8
//! d u64 | T u64 | n u64 | B u64 | batch_size u64 | eta f64
//! init_seed u64 | data_seed u64 | sampler_seed u64
//! spec_digest [32] | data_digest [32] | checkpoint_stride u64
//! setup_len u32 | setup JSON
//! θ_0 [d] | θ_T [d]
//! T × (k u64 | xi u64 | loss f64 | ‖U‖² f64 | has_coherence u8 | coherence f64 | U [d] if full)
//! checkpoints u64 | each: k u64 | θ_k [d]
//! crc32 u32
//! ```
//! Vectors use the header dtype (f64 or f32); scalars are always f64.

use super::{LogMeta, Seeds, StepRecord, StorageMode, TrainingSetup, TrajectoryLog};
use crate::error::{Error, Result};
use crate::tensor::Dtype;

pub const MAGIC: &[u8; 4] = b"TRJ1";
pub const FORMAT_VERSION: u16 = 1;

struct Writer {
    buf: Vec<u8>,
    dtype: Dtype,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vector(&mut self, v: &[f64]) {
        match self.dtype {
            Dtype::F64 => v.iter().for_each(|x| self.f64(*x)),
            Dtype::F32 => v
                .iter()
                .for_each(|x| self.buf.extend_from_slice(&(*x as f32).to_le_bytes())),
        }
    }
}

pub fn encode(log: &TrajectoryLog) -> Result<Vec<u8>> {
    let m = &log.meta;
    let full = m.storage == StorageMode::Full;
    if full && !log.has_updates() {
        return Err(Error::Format("full-storage log is missing updates".into()));
    }
    if log.theta0.len() != m.d || log.theta_t.len() != m.d || log.steps.len() != m.steps {
        return Err(Error::Format(
            "log vectors disagree with its metadata".into(),
        ));
    }
    let setup = serde_json::to_vec(&log.setup)?;
    let step_width = 41 + if full { m.d * m.dtype.width() } else { 0 };
    let mut w = Writer {
        buf: Vec::with_capacity(256 + setup.len() + m.steps * step_width + 2 * m.d * 8),
        dtype: m.dtype,
    };
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(match m.dtype {
        Dtype::F64 => 0,
        Dtype::F32 => 1,
    });
    w.u8(match m.storage {
        StorageMode::Full => 0,
        StorageMode::Replay => 1,
    });
    w.usize(m.d);
    w.usize(m.steps);
    w.usize(m.n_batches);
    w.usize(m.epochs);
    w.usize(m.batch_size);
    w.f64(m.eta);
    w.u64(m.seeds.init);
    w.u64(m.seeds.data);
    w.u64(m.seeds.sampler);
    w.buf.extend_from_slice(&m.spec_digest);
    w.buf.extend_from_slice(&m.data_digest);
    w.usize(m.checkpoint_stride);
    w.u32(u32::try_from(setup.len()).map_err(|_| Error::Format("setup block too large".into()))?);
    w.buf.extend_from_slice(&setup);
    w.vector(&log.theta0);
    w.vector(&log.theta_t);
    for s in &log.steps {
        w.usize(s.k);
        w.usize(s.xi);
        w.f64(s.loss);
        w.f64(s.update_sq_norm);
        w.u8(s.coherence.is_some() as u8);
        w.f64(s.coherence.unwrap_or(0.0));
        if full {
            let u = s.update.as_ref().expect("checked");
            if u.len() != m.d {
                return Err(Error::Format(format!(
                    "step {} update has wrong length",
                    s.k
                )));
            }
            w.vector(u);
        }
    }
    w.usize(log.checkpoints.len());
    for (k, theta) in &log.checkpoints {
        w.usize(*k);
        w.vector(theta);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count exceeds usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn digest(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32"))
    }
    fn vector(&mut self, d: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            d.checked_mul(self.dtype.width())
                .ok_or_else(|| Error::Format("vector too large".into()))?,
        )?;
        Ok(match self.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrajectoryLog> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TRJ1 magic".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Format("truncated header".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: 4,
        dtype: Dtype::F64,
    };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.dtype = match r.u8()? {
        0 => Dtype::F64,
        1 => Dtype::F32,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let storage = match r.u8()? {
        0 => StorageMode::Full,
        1 => StorageMode::Replay,
        other => return Err(Error::Format(format!("unknown storage tag {other}"))),
    };
    let d = r.usize()?;
    let steps = r.usize()?;
    let n_batches = r.usize()?;
    let epochs = r.usize()?;
    let batch_size = r.usize()?;
    let eta = r.f64()?;
    let seeds = Seeds {
        init: r.u64()?,
        data: r.u64()?,
        sampler: r.u64()?,
    };
    let spec_digest = r.digest()?;
    let data_digest = r.digest()?;
    let checkpoint_stride = r.usize()?;
    let setup_len = r.u32()? as usize;
    let setup: TrainingSetup = serde_json::from_slice(r.take(setup_len)?)
        .map_err(|e| Error::Format(format!("setup block: {e}")))?;
    let theta0 = r.vector(d)?;
    let theta_t = r.vector(d)?;
    let mut records = Vec::with_capacity(steps.min(body.len() / 41));
    for _ in 0..steps {
        let k = r.usize()?;
        let xi = r.usize()?;
        let loss = r.f64()?;
        let update_sq_norm = r.f64()?;
        let has_c = r.u8()?;
        let c = r.f64()?;
        let update = match storage {
            StorageMode::Full => Some(r.vector(d)?),
            StorageMode::Replay => None,
        };
        records.push(StepRecord {
            k,
            xi,
            loss,
            update,
            update_sq_norm,
            coherence: (has_c != 0).then_some(c),
        });
    }
    let n_ckpt = r.usize()?;
    let mut checkpoints = Vec::with_capacity(n_ckpt.min(body.len() / 8));
    for _ in 0..n_ckpt {
        let k = r.usize()?;
        checkpoints.push((k, r.vector(d)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        )));
    }
    Ok(TrajectoryLog {
        meta: LogMeta {
            d,
            steps,
            n_batches,
            epochs,
            batch_size,
            eta,
            seeds,
            spec_digest,
            data_digest,
            storage,
            dtype: r.dtype,
            checkpoint_stride,
        },
        setup,
        theta0,
        theta_t,
        steps: records,
        checkpoints,
    })
}
