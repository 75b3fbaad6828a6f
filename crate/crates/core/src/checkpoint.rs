//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian, floats as 64-bit IEEE):
//!
//! ```text
//! magic   8 bytes  "WFNCKPT\0"
//! version u32      = 1
//! count   u32      number of records
//! record* tag [u8; 4], len u64, payload[len]
//! ```
//!
//! Record tags: `META`, `FNET`/`FOPT` (flow network and its Adam state),
//! `GNET`/`GOPT` (retrieval network and its Adam state), `BUF0` (shared or
//! retrieval buffer), `BUF1` (flow-only buffer). Records are written in that
//! order; encoding the decoded value reproduces the input bytes.

use std::path::Path;

use crate::envs::{Action, EnvKind, EnvState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, Mlp, MlpSpec, OutputActivation};
use crate::replay::{Phase, ReplayBuffer, Transition};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 8] = *b"WFNCKPT\0";
pub const VERSION: u32 = 1;

/// Run bookkeeping stored alongside the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub env: EnvKind,
    pub variant: u8,
    pub phase: Phase,
    pub seed: u64,
    pub step: u64,
    pub episode: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetRecord<T> {
    pub net: Mlp<T>,
    pub adam: Option<AdamState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Meta,
    pub flow: NetRecord<T>,
    pub retrieval: NetRecord<T>,
    pub buffer: Option<ReplayBuffer<T>>,
    pub flow_buffer: Option<ReplayBuffer<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        let mut w = Writer::default();
        w.meta(&self.meta);
        records.push((*b"META", w.take()));
        w.mlp(&self.flow.net);
        records.push((*b"FNET", w.take()));
        if let Some(a) = &self.flow.adam {
            w.adam(a);
            records.push((*b"FOPT", w.take()));
        }
        w.mlp(&self.retrieval.net);
        records.push((*b"GNET", w.take()));
        if let Some(a) = &self.retrieval.adam {
            w.adam(a);
            records.push((*b"GOPT", w.take()));
        }
        if let Some(b) = &self.buffer {
            w.buffer(b, self.meta.env);
            records.push((*b"BUF0", w.take()));
        }
        if let Some(b) = &self.flow_buffer {
            w.buffer(b, self.meta.env);
            records.push((*b"BUF1", w.take()));
        }

        let mut out = Writer::default();
        out.bytes(&MAGIC);
        out.u32(VERSION);
        out.u32(records.len() as u32);
        for (tag, payload) in records {
            out.bytes(&tag);
            out.u64(payload.len() as u64);
            out.bytes(&payload);
        }
        out.take()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let (mut meta, mut fnet, mut fopt, mut gnet, mut gopt, mut buf0, mut buf1) =
            (None, None, None, None, None, None, None);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let mut p = Reader::new(r.take(len)?);
            match &tag {
                b"META" => meta = Some(p.meta()?),
                b"FNET" => fnet = Some(p.mlp()?),
                b"FOPT" => fopt = Some(p.adam()?),
                b"GNET" => gnet = Some(p.mlp()?),
                b"GOPT" => gopt = Some(p.adam()?),
                b"BUF0" => buf0 = Some(p.buffer()?),
                b"BUF1" => buf1 = Some(p.buffer()?),
                other => {
                    return Err(Error::Format(format!(
                        "unknown record tag {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            p.finish()?;
        }
        r.finish()?;
        let missing = |what: &str| Error::Format(format!("missing {what} record"));
        let meta: Meta = meta.ok_or_else(|| missing("META"))?;
        for (env, _) in buf0.iter().chain(buf1.iter()) {
            if *env != meta.env {
                return Err(Error::Format("buffer layout differs from checkpoint env".into()));
            }
        }
        Ok(Self {
            meta,
            flow: NetRecord {
                net: fnet.ok_or_else(|| missing("FNET"))?,
                adam: fopt,
            },
            retrieval: NetRecord {
                net: gnet.ok_or_else(|| missing("GNET"))?,
                adam: gopt,
            },
            buffer: buf0.map(|b| b.1),
            flow_buffer: buf1.map(|b| b.1),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn take(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn real<T: Scalar>(&mut self, v: T) {
        self.bytes(&v.as_f64().to_le_bytes());
    }

    fn reals<T: Scalar>(&mut self, vs: &[T]) {
        vs.iter().for_each(|&v| self.real(v));
    }

    fn meta(&mut self, m: &Meta) {
        self.u8(m.env.code());
        self.u8(m.variant);
        self.u8(m.phase.code());
        self.u64(m.seed);
        self.u64(m.step);
        self.u64(m.episode);
    }

    fn mlp<T: Scalar>(&mut self, net: &Mlp<T>) {
        let spec = net.spec();
        self.u32(spec.input_dim as u32);
        self.u32(spec.output_dim as u32);
        self.u8(spec.activation.code());
        self.u8(match spec.output_activation {
            OutputActivation::Identity => 0,
        });
        self.u32(spec.hidden_dims.len() as u32);
        spec.hidden_dims.iter().for_each(|&h| self.u32(h as u32));
        self.u64(net.params().len() as u64);
        self.reals(net.params());
    }

    fn adam<T: Scalar>(&mut self, a: &AdamState<T>) {
        self.real(a.beta1);
        self.real(a.beta2);
        self.real(a.eps);
        self.u64(a.t);
        self.u64(a.m.len() as u64);
        self.reals(&a.m);
        self.reals(&a.v);
    }

    fn buffer<T: Scalar>(&mut self, b: &ReplayBuffer<T>, env: EnvKind) {
        self.u8(env.code());
        self.u32(env.state_dim() as u32);
        self.u64(b.capacity() as u64);
        self.u64(b.total_pushed());
        self.u64(b.len() as u64);
        for t in b.iter() {
            self.u8(t.phase.code());
            self.u8(u8::from(t.terminal));
            self.u64(t.episode_id);
            self.real(t.r);
            self.reals(&t.s_prev.values);
            self.reals(t.a_prev.as_slice());
            self.reals(&t.s.values);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn real<T: Scalar>(&mut self) -> Result<T> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        Ok(T::of(v))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("truncated: {n} reals do not fit")));
        }
        (0..n).map(|_| self.real()).collect()
    }

    fn env(&mut self) -> Result<EnvKind> {
        let c = self.u8()?;
        EnvKind::from_code(c).ok_or_else(|| Error::Format(format!("unknown env code {c}")))
    }

    fn phase(&mut self) -> Result<Phase> {
        let c = self.u8()?;
        Phase::from_code(c).ok_or_else(|| Error::Format(format!("unknown phase code {c}")))
    }

    fn meta(&mut self) -> Result<Meta> {
        Ok(Meta {
            env: self.env()?,
            variant: self.u8()?,
            phase: self.phase()?,
            seed: self.u64()?,
            step: self.u64()?,
            episode: self.u64()?,
        })
    }

    fn mlp<T: Scalar>(&mut self) -> Result<Mlp<T>> {
        let input = self.u32()? as usize;
        let output = self.u32()? as usize;
        let act = self.u8()?;
        let act = Activation::from_code(act).ok_or_else(|| Error::Format(format!("unknown activation {act}")))?;
        if self.u8()? != 0 {
            return Err(Error::Format("unknown output activation".into()));
        }
        let n_hidden = self.u32()? as usize;
        if n_hidden > self.buf.len() {
            return Err(Error::Format("implausible hidden layer count".into()));
        }
        let hidden = (0..n_hidden).map(|_| self.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(input, hidden, output, act).map_err(|e| Error::Format(e.to_string()))?;
        let n = self.u64()? as usize;
        if n != spec.param_count() {
            return Err(Error::Format(format!(
                "parameter count {n} does not match shape ({})",
                spec.param_count()
            )));
        }
        let params = self.reals(n)?;
        Mlp::from_params(spec, params).map_err(|e| Error::Format(e.to_string()))
    }

    fn adam<T: Scalar>(&mut self) -> Result<AdamState<T>> {
        let beta1 = self.real()?;
        let beta2 = self.real()?;
        let eps = self.real()?;
        let t = self.u64()?;
        let n = self.u64()? as usize;
        let m = self.reals(n)?;
        let v = self.reals(n)?;
        Ok(AdamState {
            m,
            v,
            t,
            beta1,
            beta2,
            eps,
        })
    }

    fn buffer<T: Scalar>(&mut self) -> Result<(EnvKind, ReplayBuffer<T>)> {
        let env = self.env()?;
        let dim = self.u32()? as usize;
        if dim != env.state_dim() {
            return Err(Error::Format(format!("state dim {dim} does not match {}", env.name())));
        }
        let capacity = self.u64()? as usize;
        let pushed = self.u64()?;
        let len = self.u64()? as usize;
        let record = 1 + 1 + 8 + 8 * (1 + 2 * dim + ACTION_DIM);
        if len.saturating_mul(record) > self.buf.len() - self.pos {
            return Err(Error::Format("buffer record truncated".into()));
        }
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let phase = self.phase()?;
            let terminal = match self.u8()? {
                0 => false,
                1 => true,
                c => return Err(Error::Format(format!("bad terminal flag {c}"))),
            };
            let episode_id = self.u64()?;
            let r = self.real()?;
            let s_prev = EnvState { kind: env, values: self.reals(dim)? };
            let a = self.reals::<T>(ACTION_DIM)?;
            let s = EnvState { kind: env, values: self.reals(dim)? };
            items.push(Transition {
                s_prev,
                a_prev: Action([a[0], a[1]]),
                r,
                s,
                terminal,
                episode_id,
                phase,
            });
        }
        Ok((env, ReplayBuffer::from_parts(capacity, items, pushed)?))
    }
}
