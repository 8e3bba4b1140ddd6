//! Self-describing binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SDPT" | version: u32 | section*
//! section = tag: [u8; 4] | payload length: u64 | payload
//! ```
//!
//! Sections appear in the order `ARCH PARM BNRS NORM META [BNST]`:
//!
//! * `ARCH` network description (channels, input size, stem, blocks, head,
//!   batch-norm momentum and epsilon as f64).
//! * `PARM` parameter count, then per tensor: name (u16 length + UTF-8),
//!   rank (u8), dims (u32 each), values (f32).
//! * `BNRS` running statistics per batch-norm layer: presence flag (u8),
//!   channel count (u32), means then variances (f32).
//! * `NORM` presence flag, channel count, means then standard deviations.
//! * `META` seed (u64), completed epochs (u32), training mode (string).
//! * `BNST` optional instance statistics store: calibration batch count
//!   (u32), seed (u64), baseline stats, then per instance its id, first
//!   overridden layer (u32) and stats.
//!
//! Stats lists are a u32 count followed by `channels: u32, mean[], var[]`.

use std::fs;
use std::path::Path;

use crate::bn_store::{InstanceBNStore, StatsOverride};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::layers::{BlockSpec, ChannelStats, HeadSpec, LayerStack, NetworkSpec, StemSpec};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"SDPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    pub mode: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stack: LayerStack,
    pub norm: Option<Normalization>,
    pub meta: CheckpointMeta,
    pub store: Option<InstanceBNStore>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn stats(&mut self, st: &ChannelStats) {
        self.u32(st.channels());
        self.f32s(&st.mean);
        self.f32s(&st.var);
    }
    fn stats_list(&mut self, list: &[ChannelStats]) {
        self.u32(list.len());
        for st in list {
            self.stats(st);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.buf.extend_from_slice(tag);
        self.u64(body.buf.len() as u64);
        self.buf.extend(body.buf);
    }
}

fn writer() -> Writer {
    Writer { buf: Vec::new() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format(format!("{msg} at byte {}", self.pos))
    }
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of data reading {n} bytes")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(
            n.checked_mul(4)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("invalid flag {v}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }
    fn stats(&mut self) -> Result<ChannelStats> {
        let c = self.u32()?;
        let mean = self.f32s(c)?;
        let var = self.f32s(c)?;
        ChannelStats::new(mean, var).map_err(|e| self.err(e))
    }
    fn stats_list(&mut self) -> Result<Vec<ChannelStats>> {
        let n = self.u32()?;
        (0..n).map(|_| self.stats()).collect()
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let found = self.array::<4>()?;
        if &found != tag {
            return Err(self.err(format!(
                "expected section {} but found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&found)
            )));
        }
        let len = self.u64()? as usize;
        let start = self.pos;
        let body = self.bytes(len)?;
        Ok(Reader {
            buf: &self.buf[..start + body.len()],
            pos: start,
        })
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes in section"));
        }
        Ok(())
    }
}

fn write_spec(w: &mut Writer, spec: &NetworkSpec) {
    w.u32(spec.in_channels);
    w.u32(spec.input_hw.0);
    w.u32(spec.input_hw.1);
    match spec.stem {
        Some(s) => {
            w.u8(1);
            w.u32(s.out_channels);
            w.u32(s.kernel);
        }
        None => w.u8(0),
    }
    w.u32(spec.blocks.len());
    for b in &spec.blocks {
        w.u8(match b {
            BlockSpec::Residual { .. } => 0,
            BlockSpec::Plain { .. } => 1,
        });
        w.u32(b.in_channels());
        w.u32(b.out_channels());
        w.u32(b.stride());
    }
    match spec.head {
        Some(h) => {
            w.u8(1);
            w.u8(h.pre_activation as u8);
            w.u32(h.classes);
        }
        None => w.u8(0),
    }
    w.f64(spec.bn_momentum);
    w.f64(spec.bn_eps);
}

fn read_spec(r: &mut Reader<'_>) -> Result<NetworkSpec> {
    let in_channels = r.u32()?;
    let input_hw = (r.u32()?, r.u32()?);
    let stem = if r.flag()? {
        Some(StemSpec {
            out_channels: r.u32()?,
            kernel: r.u32()?,
        })
    } else {
        None
    };
    let n = r.u32()?;
    let mut blocks = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let kind = r.u8()?;
        let (in_channels, out_channels, stride) = (r.u32()?, r.u32()?, r.u32()?);
        blocks.push(match kind {
            0 => BlockSpec::Residual {
                in_channels,
                out_channels,
                stride,
            },
            1 => BlockSpec::Plain {
                in_channels,
                out_channels,
                stride,
            },
            k => return Err(r.err(format!("unknown block kind {k}"))),
        });
    }
    let head = if r.flag()? {
        Some(HeadSpec {
            pre_activation: r.flag()?,
            classes: r.u32()?,
        })
    } else {
        None
    };
    let spec = NetworkSpec {
        in_channels,
        input_hw,
        stem,
        blocks,
        head,
        bn_momentum: r.f64()?,
        bn_eps: r.f64()?,
    };
    spec.validate().map_err(|e| r.err(e))?;
    Ok(spec)
}

impl Checkpoint {
    pub fn new(stack: LayerStack, norm: Option<Normalization>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            stack,
            norm,
            meta,
            store: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = writer();
        out.buf.extend_from_slice(MAGIC);
        out.u32(VERSION as usize);

        let mut arch = writer();
        write_spec(&mut arch, self.stack.spec());
        out.section(b"ARCH", arch);

        let mut parm = writer();
        let params = self.stack.params();
        parm.u32(params.len());
        for (name, dims, p) in &params {
            parm.str(name);
            parm.u8(dims.len() as u8);
            for d in dims {
                parm.u32(*d);
            }
            parm.f32s(&p.value);
        }
        out.section(b"PARM", parm);

        let mut bnrs = writer();
        let bns = self.stack.batch_norms();
        bnrs.u32(bns.len());
        for bn in bns {
            match &bn.running {
                Some(st) => {
                    bnrs.u8(1);
                    bnrs.stats(st);
                }
                None => {
                    bnrs.u8(0);
                    bnrs.u32(bn.channels());
                }
            }
        }
        out.section(b"BNRS", bnrs);

        let mut norm = writer();
        match &self.norm {
            Some(n) => {
                norm.u8(1);
                norm.u32(n.mean.len());
                norm.f32s(&n.mean);
                norm.f32s(&n.std);
            }
            None => norm.u8(0),
        }
        out.section(b"NORM", norm);

        let mut meta = writer();
        meta.u64(self.meta.seed);
        meta.u32(self.meta.epoch as usize);
        meta.str(&self.meta.mode);
        out.section(b"META", meta);

        if let Some(store) = &self.store {
            let mut st = writer();
            st.u32(store.batches as usize);
            st.u64(store.seed);
            st.stats_list(&store.baseline);
            st.u32(store.overrides.len());
            for (id, o) in &store.overrides {
                st.str(id);
                st.u32(o.first_layer);
                st.stats_list(&o.stats);
            }
            out.section(b"BNST", st);
        }
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.array::<4>()? != *MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }

        let mut arch = r.section(b"ARCH")?;
        let spec = read_spec(&mut arch)?;
        arch.done()?;
        // parameters are overwritten below; the seed only shapes the allocation
        let mut stack = LayerStack::new(spec, &mut Rng::new(0))?;

        let mut parm = r.section(b"PARM")?;
        let count = parm.u32()?;
        let expected: Vec<(String, Vec<usize>)> =
            stack.params().into_iter().map(|(n, d, _)| (n, d)).collect();
        if count != expected.len() {
            return Err(parm.err(format!(
                "{count} parameter tensors, architecture has {}",
                expected.len()
            )));
        }
        for ((name, dims), p) in expected.iter().zip(stack.params_mut()) {
            let got = parm.str()?;
            let rank = parm.u8()? as usize;
            let got_dims = (0..rank).map(|_| parm.u32()).collect::<Result<Vec<_>>>()?;
            if &got != name || &got_dims != dims {
                return Err(parm.err(format!(
                    "parameter {got} {got_dims:?} does not match {name} {dims:?}"
                )));
            }
            p.value = parm.f32s(p.len())?;
        }
        parm.done()?;

        let mut bnrs = r.section(b"BNRS")?;
        let count = bnrs.u32()?;
        let mut bns = stack.batch_norms_mut();
        if count != bns.len() {
            return Err(bnrs.err(format!(
                "{count} batch norm layers, architecture has {}",
                bns.len()
            )));
        }
        for bn in bns.iter_mut() {
            let present = bnrs.flag()?;
            let st = if present {
                Some(bnrs.stats()?)
            } else {
                bnrs.u32()?;
                None
            };
            if let Some(st) = &st {
                if st.channels() != bn.channels() {
                    return Err(bnrs.err("running statistics channel count mismatch"));
                }
            }
            bn.running = st;
        }
        bnrs.done()?;

        let mut nr = r.section(b"NORM")?;
        let norm = if nr.flag()? {
            let c = nr.u32()?;
            let mean = nr.f32s(c)?;
            let std = nr.f32s(c)?;
            Some(Normalization::new(mean, std).map_err(|e| nr.err(e))?)
        } else {
            None
        };
        nr.done()?;

        let mut mt = r.section(b"META")?;
        let meta = CheckpointMeta {
            seed: mt.u64()?,
            epoch: mt.u32()? as u32,
            mode: mt.str()?,
        };
        mt.done()?;

        let store = if r.pos < bytes.len() {
            let mut st = r.section(b"BNST")?;
            let batches = st.u32()? as u32;
            let seed = st.u64()?;
            let baseline = st.stats_list()?;
            let layout = stack.spec().bn_layout();
            if baseline.len() != layout.len()
                || baseline
                    .iter()
                    .zip(&layout)
                    .any(|(s, l)| s.channels() != l.channels)
            {
                return Err(st.err("instance store does not match the architecture"));
            }
            let mut store = InstanceBNStore::new(baseline, batches, seed);
            let n = st.u32()?;
            for _ in 0..n {
                let id = st.str()?;
                let first_layer = st.u32()?;
                let stats = st.stats_list()?;
                if first_layer + stats.len() != layout.len() {
                    return Err(st.err(format!("override for {id} covers the wrong layers")));
                }
                store
                    .overrides
                    .insert(id, StatsOverride { first_layer, stats });
            }
            st.done()?;
            Some(store)
        } else {
            None
        };
        r.done()?;
        Ok(Checkpoint {
            stack,
            norm,
            meta,
            store,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Serialized sizes without and with the instance store.
    pub fn sizes(&self) -> (usize, usize) {
        let with = self.to_bytes().len();
        let without = Checkpoint {
            store: None,
            ..self.clone()
        }
        .to_bytes()
        .len();
        (without, with)
    }
}
