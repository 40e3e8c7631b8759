//! Append-only key/value traces, one file per linear layer.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header (31 bytes)
//!   magic      [u8; 8]  "DUALKV01"
//!   version    u32
//!   layer_id   u8
//!   dtype      u8       0 = f32, 1 = f16
//!   d_in       u32
//!   d_out      u32
//!   slots      u64      T
//!   flags      u8       bit 0: partial trace
//! records (T times)
//!   meta       16 bytes (step u32, index_in_batch u16, task u8, class u8, sample_or_position u64)
//!   key        d_in  x dtype
//!   value      d_out x dtype
//! ```
//!
//! The writer stamps the partial flag and `T = 0` on open and only rewrites
//! them on [`TraceWriter::finalize`], so an interrupted run leaves a file that
//! readers recognise as incomplete.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use half::f16;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"DUALKV01";
pub const TRACE_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 31;
pub const META_LEN: usize = 16;
const FLAG_PARTIAL: u8 = 1;
const SLOTS_OFFSET: u64 = 22;
const FLAGS_OFFSET: u64 = 30;

/// Class byte used by language-model slots.
pub const LM_CLASS: u8 = 255;

/// Provenance of one recorded training datapoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SlotMeta {
    pub step: u32,
    pub index_in_batch: u16,
    pub task: u8,
    /// Class label for images, [`LM_CLASS`] for language-model tokens.
    pub class_or_reserved: u8,
    /// Dataset sample id, or absolute corpus position for language models.
    pub sample_or_position: u64,
}

impl SlotMeta {
    pub fn encode(&self) -> [u8; META_LEN] {
        let mut out = [0u8; META_LEN];
        out[0..4].copy_from_slice(&self.step.to_le_bytes());
        out[4..6].copy_from_slice(&self.index_in_batch.to_le_bytes());
        out[6] = self.task;
        out[7] = self.class_or_reserved;
        out[8..16].copy_from_slice(&self.sample_or_position.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> SlotMeta {
        SlotMeta {
            step: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            index_in_batch: u16::from_le_bytes(b[4..6].try_into().unwrap()),
            task: b[6],
            class_or_reserved: b[7],
            sample_or_position: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }

    pub fn is_language_model(&self) -> bool {
        self.class_or_reserved == LM_CLASS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            other => Err(Error::Config(format!("unknown dtype {other:?}, expected f32 or f16"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub layer_id: u8,
    pub dtype: Dtype,
    pub d_in: usize,
    pub d_out: usize,
    pub slots: u64,
    pub partial: bool,
}

impl TraceHeader {
    pub fn record_len(&self) -> usize {
        record_len(self.d_in, self.d_out, self.dtype)
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..8].copy_from_slice(TRACE_MAGIC);
        out[8..12].copy_from_slice(&self.version.to_le_bytes());
        out[12] = self.layer_id;
        out[13] = self.dtype.code();
        out[14..18].copy_from_slice(&(self.d_in as u32).to_le_bytes());
        out[18..22].copy_from_slice(&(self.d_out as u32).to_le_bytes());
        out[22..30].copy_from_slice(&self.slots.to_le_bytes());
        out[30] = if self.partial { FLAG_PARTIAL } else { 0 };
        out
    }
}

pub fn record_len(d_in: usize, d_out: usize, dtype: Dtype) -> usize {
    META_LEN + (d_in + d_out) * dtype.bytes()
}

/// Expected size in bytes of a finalized trace.
pub fn trace_file_size(d_in: usize, d_out: usize, dtype: Dtype, slots: u64) -> u64 {
    HEADER_LEN + slots * record_len(d_in, d_out, dtype) as u64
}

/// `<run>/<layer_id>.dualkv`
pub fn trace_path(run_dir: &Path, layer_id: u8) -> PathBuf {
    run_dir.join(format!("{layer_id}.dualkv"))
}

fn storage(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Storage {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Callback for [`KvMemory::scan`]: slot index, metadata, key, value.
pub type SlotVisitor<'a> = dyn FnMut(usize, &SlotMeta, &[f32], &[f32]) -> Result<()> + 'a;

/// Read-only access to a recorded key/value memory.
pub trait KvMemory {
    fn layer_id(&self) -> u8;
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visits every slot in recorded order.
    fn scan(&self, visit: &mut SlotVisitor<'_>) -> Result<()>;

    /// True when the file was never finalized; such memories must not be
    /// used for verification.
    fn is_partial(&self) -> bool {
        false
    }

    /// Random access to one slot.
    fn slot(&self, t: usize) -> Result<(SlotMeta, Vec<f32>, Vec<f32>)>;

    fn metas(&self) -> Result<Vec<SlotMeta>> {
        let mut out = Vec::with_capacity(self.len());
        self.scan(&mut |_, m, _, _| {
            out.push(*m);
            Ok(())
        })?;
        Ok(out)
    }
}

/// Destination for slots produced during training.
pub trait TraceSink {
    fn append(&mut self, meta: &SlotMeta, key: &[f32], value: &[f32]) -> Result<()>;
}

impl TraceSink for TraceWriter {
    fn append(&mut self, meta: &SlotMeta, key: &[f32], value: &[f32]) -> Result<()> {
        self.append_slot(meta, key, value)
    }
}

impl TraceSink for InMemoryTrace {
    fn append(&mut self, meta: &SlotMeta, key: &[f32], value: &[f32]) -> Result<()> {
        self.push(*meta, key, value)
    }
}

/// Streaming writer for one layer's trace.
#[derive(Debug)]
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: TraceHeader,
    count: u64,
    last_step: Option<u32>,
    buf: Vec<u8>,
}

pub fn open_writer(path: &Path, layer_id: u8, d_in: usize, d_out: usize, dtype: Dtype) -> Result<TraceWriter> {
    TraceWriter::create(path, layer_id, d_in, d_out, dtype)
}

impl TraceWriter {
    pub fn create(path: &Path, layer_id: u8, d_in: usize, d_out: usize, dtype: Dtype) -> Result<Self> {
        let file = File::create(path).map_err(|e| storage(path, 0, format!("cannot create trace: {e}")))?;
        let header = TraceHeader {
            version: TRACE_VERSION,
            layer_id,
            dtype,
            d_in,
            d_out,
            slots: 0,
            partial: true,
        };
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&header.encode())
            .map_err(|e| storage(path, 0, format!("cannot write header: {e}")))?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            out,
            header,
            count: 0,
            last_step: None,
            buf: Vec::with_capacity(record_len(d_in, d_out, dtype)),
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn slots_written(&self) -> u64 {
        self.count
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append_slot(&mut self, meta: &SlotMeta, key: &[f32], value: &[f32]) -> Result<()> {
        if key.len() != self.header.d_in || value.len() != self.header.d_out {
            return Err(Error::contract(format!(
                "slot shape ({}, {}) does not match trace ({}, {})",
                key.len(),
                value.len(),
                self.header.d_in,
                self.header.d_out
            )));
        }
        if let Some(last) = self.last_step {
            if meta.step < last {
                return Err(Error::contract(format!("step regressed from {last} to {}", meta.step)));
            }
        }
        self.buf.clear();
        self.buf.extend_from_slice(&meta.encode());
        for part in [key, value] {
            for &v in part {
                if !v.is_finite() {
                    return Err(Error::contract("non-finite trace entry"));
                }
                match self.header.dtype {
                    Dtype::F32 => self.buf.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F16 => {
                        let h = f16::from_f32(v);
                        if !h.is_finite() {
                            return Err(Error::contract(format!("value {v} overflows f16")));
                        }
                        self.buf.extend_from_slice(&h.to_le_bytes());
                    }
                }
            }
        }
        let offset = HEADER_LEN + self.count * self.buf.len() as u64;
        self.out
            .write_all(&self.buf)
            .map_err(|e| storage(&self.path, offset, format!("write failed: {e}")))?;
        self.count += 1;
        self.last_step = Some(meta.step);
        Ok(())
    }

    /// Flushes records, writes the final slot count and clears the partial flag.
    pub fn finalize(mut self) -> Result<TraceHeader> {
        let path = self.path.clone();
        self.out
            .flush()
            .map_err(|e| storage(&path, 0, format!("flush failed: {e}")))?;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(SLOTS_OFFSET))
            .and_then(|_| file.write_all(&self.count.to_le_bytes()))
            .and_then(|_| file.seek(SeekFrom::Start(FLAGS_OFFSET)))
            .and_then(|_| file.write_all(&[0u8]))
            .and_then(|_| file.sync_all())
            .map_err(|e| storage(&path, SLOTS_OFFSET, format!("cannot finalize header: {e}")))?;
        self.header.slots = self.count;
        self.header.partial = false;
        Ok(self.header)
    }
}

/// Random-access and streaming reader over a trace file.
#[derive(Debug)]
pub struct TraceReader {
    path: PathBuf,
    file: File,
    header: TraceHeader,
    slots: u64,
}

pub fn open_reader(path: &Path) -> Result<TraceReader> {
    TraceReader::open(path)
}

impl TraceReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| storage(path, 0, format!("cannot open trace: {e}")))?;
        let len = file
            .metadata()
            .map_err(|e| storage(path, 0, format!("cannot stat trace: {e}")))?
            .len();
        let mut raw = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut raw)
            .map_err(|_| storage(path, len, "file shorter than the trace header"))?;
        if &raw[0..8] != TRACE_MAGIC {
            return Err(storage(path, 0, "bad magic"));
        }
        let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
        if version != TRACE_VERSION {
            return Err(storage(path, 8, format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(raw[13]).ok_or_else(|| storage(path, 13, format!("unknown dtype {}", raw[13])))?;
        let header = TraceHeader {
            version,
            layer_id: raw[12],
            dtype,
            d_in: u32::from_le_bytes(raw[14..18].try_into().unwrap()) as usize,
            d_out: u32::from_le_bytes(raw[18..22].try_into().unwrap()) as usize,
            slots: u64::from_le_bytes(raw[22..30].try_into().unwrap()),
            partial: raw[30] & FLAG_PARTIAL != 0,
        };
        if raw[30] & !FLAG_PARTIAL != 0 {
            return Err(storage(path, FLAGS_OFFSET, format!("unknown flags {:#04x}", raw[30])));
        }
        let rec = header.record_len() as u64;
        let body = len - HEADER_LEN;
        let slots = if header.partial {
            body / rec
        } else {
            let expect = header.slots * rec;
            if body != expect {
                let offset = HEADER_LEN + expect.min(body / rec * rec);
                return Err(storage(
                    path,
                    offset,
                    format!(
                        "length mismatch: header declares {} slots ({} bytes) but body has {body} bytes",
                        header.slots, expect
                    ),
                ));
            }
            header.slots
        };
        Ok(TraceReader {
            path: path.to_path_buf(),
            file,
            header,
            slots,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_partial(&self) -> bool {
        self.header.partial
    }

    /// Reads slot `index` as `(meta, key, value)`.
    pub fn read_slot(&self, index: usize) -> Result<(SlotMeta, Vec<f32>, Vec<f32>)> {
        if index as u64 >= self.slots {
            return Err(Error::contract(format!("slot {index} out of range (T = {})", self.slots)));
        }
        let rec = self.header.record_len();
        let offset = HEADER_LEN + index as u64 * rec as u64;
        let mut buf = vec![0u8; rec];
        self.file
            .read_exact_at(&mut buf, offset)
            .map_err(|e| storage(&self.path, offset, format!("read failed: {e}")))?;
        let mut key = vec![0.0; self.header.d_in];
        let mut value = vec![0.0; self.header.d_out];
        let meta = decode_record(&buf, self.header.dtype, &mut key, &mut value);
        Ok((meta, key, value))
    }

    /// Loads the whole trace into memory.
    pub fn load(&self) -> Result<InMemoryTrace> {
        let mut mem = InMemoryTrace::with_capacity(self.header.layer_id, self.header.d_in, self.header.d_out, self.slots as usize);
        self.scan(&mut |_, m, k, v| mem.push(*m, k, v))?;
        Ok(mem)
    }
}

fn decode_record(buf: &[u8], dtype: Dtype, key: &mut [f32], value: &mut [f32]) -> SlotMeta {
    let meta = SlotMeta::decode(&buf[..META_LEN]);
    let body = &buf[META_LEN..];
    match dtype {
        Dtype::F32 => {
            let (kb, vb) = body.split_at(key.len() * 4);
            for (dst, src) in key.iter_mut().zip(kb.chunks_exact(4)) {
                *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
            }
            for (dst, src) in value.iter_mut().zip(vb.chunks_exact(4)) {
                *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
            }
        }
        Dtype::F16 => {
            let (kb, vb) = body.split_at(key.len() * 2);
            for (dst, src) in key.iter_mut().zip(kb.chunks_exact(2)) {
                *dst = f16::from_le_bytes([src[0], src[1]]).to_f32();
            }
            for (dst, src) in value.iter_mut().zip(vb.chunks_exact(2)) {
                *dst = f16::from_le_bytes([src[0], src[1]]).to_f32();
            }
        }
    }
    meta
}

impl KvMemory for TraceReader {
    fn layer_id(&self) -> u8 {
        self.header.layer_id
    }

    fn d_in(&self) -> usize {
        self.header.d_in
    }

    fn d_out(&self) -> usize {
        self.header.d_out
    }

    fn len(&self) -> usize {
        self.slots as usize
    }

    fn is_partial(&self) -> bool {
        self.header.partial
    }

    fn slot(&self, t: usize) -> Result<(SlotMeta, Vec<f32>, Vec<f32>)> {
        self.read_slot(t)
    }

    fn scan(&self, visit: &mut SlotVisitor<'_>) -> Result<()> {
        let rec = self.header.record_len();
        let mut file = self
            .file
            .try_clone()
            .map_err(|e| storage(&self.path, 0, format!("cannot reopen trace: {e}")))?;
        file.seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| storage(&self.path, HEADER_LEN, format!("seek failed: {e}")))?;
        let mut reader = BufReader::with_capacity(4 << 20, file);
        let mut buf = vec![0u8; rec];
        let mut key = vec![0.0f32; self.header.d_in];
        let mut value = vec![0.0f32; self.header.d_out];
        for t in 0..self.slots as usize {
            let offset = HEADER_LEN + (t * rec) as u64;
            reader
                .read_exact(&mut buf)
                .map_err(|e| storage(&self.path, offset, format!("read failed: {e}")))?;
            let meta = decode_record(&buf, self.header.dtype, &mut key, &mut value);
            visit(t, &meta, &key, &value)?;
        }
        Ok(())
    }
}

/// A key/value memory held in RAM: keys and values stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InMemoryTrace {
    pub layer_id: u8,
    d_in: usize,
    d_out: usize,
    metas: Vec<SlotMeta>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl InMemoryTrace {
    pub fn new(layer_id: u8, d_in: usize, d_out: usize) -> Self {
        Self::with_capacity(layer_id, d_in, d_out, 0)
    }

    pub fn with_capacity(layer_id: u8, d_in: usize, d_out: usize, slots: usize) -> Self {
        InMemoryTrace {
            layer_id,
            d_in,
            d_out,
            metas: Vec::with_capacity(slots),
            keys: Vec::with_capacity(slots * d_in),
            values: Vec::with_capacity(slots * d_out),
        }
    }

    pub fn push(&mut self, meta: SlotMeta, key: &[f32], value: &[f32]) -> Result<()> {
        if key.len() != self.d_in || value.len() != self.d_out {
            return Err(Error::contract(format!(
                "slot shape ({}, {}) does not match memory ({}, {})",
                key.len(),
                value.len(),
                self.d_in,
                self.d_out
            )));
        }
        self.metas.push(meta);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }

    pub fn key(&self, t: usize) -> &[f32] {
        &self.keys[t * self.d_in..(t + 1) * self.d_in]
    }

    pub fn value(&self, t: usize) -> &[f32] {
        &self.values[t * self.d_out..(t + 1) * self.d_out]
    }

    pub fn meta(&self, t: usize) -> &SlotMeta {
        &self.metas[t]
    }

    /// Copy with slots visited in the given order.
    pub fn permuted(&self, order: &[usize]) -> Result<InMemoryTrace> {
        let mut out = InMemoryTrace::with_capacity(self.layer_id, self.d_in, self.d_out, order.len());
        for &t in order {
            out.push(self.metas[t], self.key(t), self.value(t))?;
        }
        Ok(out)
    }

    /// Writes the memory to a trace file.
    pub fn write_to(&self, path: &Path, dtype: Dtype) -> Result<TraceHeader> {
        let mut w = open_writer(path, self.layer_id, self.d_in, self.d_out, dtype)?;
        for t in 0..self.metas.len() {
            w.append_slot(&self.metas[t], self.key(t), self.value(t))?;
        }
        w.finalize()
    }
}

impl KvMemory for InMemoryTrace {
    fn layer_id(&self) -> u8 {
        self.layer_id
    }

    fn d_in(&self) -> usize {
        self.d_in
    }

    fn d_out(&self) -> usize {
        self.d_out
    }

    fn len(&self) -> usize {
        self.metas.len()
    }

    fn slot(&self, t: usize) -> Result<(SlotMeta, Vec<f32>, Vec<f32>)> {
        if t >= self.metas.len() {
            return Err(Error::contract(format!("slot {t} out of range for {} slots", self.metas.len())));
        }
        Ok((self.metas[t], self.key(t).to_vec(), self.value(t).to_vec()))
    }

    fn scan(&self, visit: &mut SlotVisitor<'_>) -> Result<()> {
        for t in 0..self.metas.len() {
            visit(t, &self.metas[t], self.key(t), self.value(t))?;
        }
        Ok(())
    }

    fn metas(&self) -> Result<Vec<SlotMeta>> {
        Ok(self.metas.clone())
    }
}

/// Overwrites `bytes` at `offset`, for corruption tests and tooling.
pub fn patch_bytes(path: &Path, offset: u64, bytes: &[u8]) -> Result<()> {
    let file = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all_at(bytes, offset).map_err(|e| Error::io(path, e))
}
