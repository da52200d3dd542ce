//! Tickets (weight snapshot plus mask) and their binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] version:u32 body_len:u64
//! body:
//!   n_meta:u32   { key_len:u32 key  value_len:u32 value }*
//!   n_tensor:u32 { name_len:u32 name  dtype:u8  kind:u8  rank:u32  dims:u32*  payload }*
//!   n_mask:u32   { name_len:u32 name  rank:u32  dims:u32*  bits (packed, LSB first) }*
//! crc32(magic .. body):u32
//! ```
//!
//! Tickets use magic `LTKT` and f32 payloads; resumable checkpoints use
//! `LTCK` and f64 payloads so a resumed run continues bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelError, ModelSpec, ParamKind, ParamStore};
use crate::pruning::{Mask, PruneError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TICKET_MAGIC: [u8; 4] = *b"LTKT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LTCK";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum TicketError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed ticket: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<PruneError> for TicketError {
    fn from(e: PruneError) -> Self {
        TicketError::Malformed(e.to_string())
    }
}

impl From<ModelError> for TicketError {
    fn from(e: ModelError) -> Self {
        TicketError::Malformed(e.to_string())
    }
}

/// Provenance carried by every ticket.
#[derive(Clone, Debug, PartialEq)]
pub struct TicketMeta {
    pub source_dataset_id: String,
    pub source_optimizer: String,
    pub model_spec_hash: String,
    pub pruning_iteration: usize,
    pub remaining_fraction: f64,
    pub late_reset_k: usize,
    pub seed: u64,
    pub format_version: u32,
    /// Free-form annotations, e.g. how a mask was permuted.
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ticket<T> {
    pub spec: ModelSpec,
    /// Parameter values after `late_reset_k` optimizer steps.
    pub snapshot: ParamStore<T>,
    pub mask: Mask,
    pub meta: TicketMeta,
}

impl<T: Scalar> Ticket<T> {
    /// Checks the structural invariants: snapshot matches the spec, mask
    /// aligns with the snapshot, and the recorded remaining fraction agrees
    /// with the mask.
    pub fn validate(&self) -> Result<(), TicketError> {
        self.snapshot.check_against(&self.spec)?;
        self.mask.check_aligned(&self.snapshot)?;
        if self.meta.model_spec_hash != self.spec.topology_hash() {
            return Err(TicketError::Malformed("model_spec_hash does not match the stored spec".into()));
        }
        if self.meta.remaining_fraction != self.mask.remaining_fraction() {
            return Err(TicketError::Malformed(format!(
                "remaining_fraction {} disagrees with mask ({})",
                self.meta.remaining_fraction,
                self.mask.remaining_fraction()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Ticket<U> {
        Ticket {
            spec: self.spec.clone(),
            snapshot: self.snapshot.cast(),
            mask: self.mask.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Starting parameters for training this ticket: the snapshot with masked
    /// coordinates zeroed and batch-norm running statistics reset.
    pub fn rewound(&self) -> Result<ParamStore<T>, TicketError> {
        let mut p = self.snapshot.clone();
        self.mask.apply(&mut p)?;
        crate::model::reset_running_stats(&mut p);
        Ok(p)
    }
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::BnWeight => 2,
        ParamKind::BnBias => 3,
        ParamKind::RunningMean => 4,
        ParamKind::RunningVar => 5,
    }
}

fn kind_from_code(code: u8) -> Result<ParamKind, TicketError> {
    Ok(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::BnWeight,
        3 => ParamKind::BnBias,
        4 => ParamKind::RunningMean,
        5 => ParamKind::RunningVar,
        c => return Err(TicketError::Malformed(format!("unknown parameter kind code {c}"))),
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn dims(&mut self, shape: &[usize]) {
        self.len(shape.len());
        for &d in shape {
            self.len(d);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TicketError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TicketError::Malformed(format!("record overruns body at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TicketError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TicketError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn len(&mut self) -> Result<usize, TicketError> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String, TicketError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TicketError::Malformed("invalid UTF-8 string".into()))
    }
    fn dims(&mut self) -> Result<Vec<usize>, TicketError> {
        let rank = self.len()?;
        if rank > 8 {
            return Err(TicketError::Malformed(format!("tensor rank {rank} too large")));
        }
        (0..rank).map(|_| self.len()).collect()
    }
    fn numel(shape: &[usize]) -> Result<usize, TicketError> {
        shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| TicketError::Malformed("tensor size overflows".into()))
    }
}

fn meta_pairs<T: Scalar>(t: &Ticket<T>) -> Vec<(String, String)> {
    let m = &t.meta;
    let mut pairs = vec![
        ("source_dataset_id".to_string(), m.source_dataset_id.clone()),
        ("source_optimizer".to_string(), m.source_optimizer.clone()),
        ("model_spec_hash".to_string(), m.model_spec_hash.clone()),
        ("pruning_iteration".to_string(), m.pruning_iteration.to_string()),
        ("remaining_fraction".to_string(), format!("{:?}", m.remaining_fraction)),
        ("late_reset_k".to_string(), m.late_reset_k.to_string()),
        ("seed".to_string(), m.seed.to_string()),
        ("format_version".to_string(), m.format_version.to_string()),
        ("model_spec".to_string(), serde_json::to_string(&t.spec).expect("spec serializes")),
    ];
    pairs.extend(m.extra.iter().map(|(k, v)| (format!("x.{k}"), v.clone())));
    pairs
}

/// Serializes a ticket with the given magic and payload precision.
fn encode<T: Scalar>(t: &Ticket<T>, magic: [u8; 4], dtype: u8) -> Vec<u8> {
    let mut body = Writer(Vec::new());
    let pairs = meta_pairs(t);
    body.len(pairs.len());
    for (k, v) in &pairs {
        body.str(k);
        body.str(v);
    }
    body.len(t.snapshot.len());
    for (name, p) in t.snapshot.iter() {
        body.str(name);
        body.u8(dtype);
        body.u8(kind_code(p.kind));
        body.dims(p.tensor.shape());
        for &v in p.tensor.data() {
            if dtype == DTYPE_F32 {
                body.0.extend(v.to_f32().expect("finite").to_le_bytes());
            } else {
                body.0.extend(v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    body.len(t.mask.len());
    for (name, m) in t.mask.iter() {
        body.str(name);
        body.dims(m.shape());
        let mut packed = vec![0u8; m.len().div_ceil(8)];
        for (i, &b) in m.bits().iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        body.0.extend(packed);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.0.len() + 4);
    out.extend_from_slice(&magic);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((body.0.len() as u64).to_le_bytes());
    out.extend(body.0);
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

fn decode<T: Scalar>(bytes: &[u8], magic: [u8; 4]) -> Result<Ticket<T>, TicketError> {
    let truncated = |needed: usize| TicketError::Truncated {
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    if bytes[..4] != magic {
        return Err(TicketError::BadMagic {
            expected: magic,
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TicketError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let total = usize::try_from(body_len)
        .ok()
        .and_then(|b| b.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| TicketError::Malformed(format!("body length {body_len} too large")))?;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(TicketError::Malformed(format!("{} trailing bytes", bytes.len() - total)));
    }
    let crc_at = total - 4;
    let stored = u32::from_le_bytes(bytes[crc_at..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..crc_at]);
    if stored != computed {
        return Err(TicketError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[HEADER_LEN..crc_at],
        pos: 0,
    };
    let mut meta = BTreeMap::new();
    for _ in 0..r.len()? {
        let k = r.str()?;
        let v = r.str()?;
        if meta.insert(k.clone(), v).is_some() {
            return Err(TicketError::Malformed(format!("duplicate metadata key `{k}`")));
        }
    }
    let mut snapshot = ParamStore::new();
    for _ in 0..r.len()? {
        let name = r.str()?;
        let dtype = r.u8()?;
        let kind = kind_from_code(r.u8()?)?;
        let shape = r.dims()?;
        let n = Reader::numel(&shape)?;
        let data: Vec<T> = match dtype {
            DTYPE_F32 => r
                .take(n.checked_mul(4).ok_or_else(|| TicketError::Malformed("payload overflows".into()))?)?
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect(),
            DTYPE_F64 => r
                .take(n.checked_mul(8).ok_or_else(|| TicketError::Malformed("payload overflows".into()))?)?
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            d => return Err(TicketError::Malformed(format!("unknown dtype {d} for `{name}`"))),
        };
        if snapshot.get(&name).is_some() {
            return Err(TicketError::Malformed(format!("duplicate tensor `{name}`")));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| TicketError::Malformed(format!("`{name}`: {e}")))?;
        snapshot.insert(name, tensor, kind);
    }
    let mut layers = Vec::new();
    for _ in 0..r.len()? {
        let name = r.str()?;
        let shape = r.dims()?;
        let n = Reader::numel(&shape)?;
        let packed = r.take(n.div_ceil(8))?;
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        layers.push((name, shape, bits));
    }
    if r.pos != r.buf.len() {
        return Err(TicketError::Malformed("unparsed bytes after mask section".into()));
    }
    let mask = Mask::from_bits(layers)?;
    let ticket = Ticket {
        spec: {
            let json = take_meta(&mut meta, "model_spec")?;
            serde_json::from_str(&json).map_err(|e| TicketError::Malformed(format!("model_spec: {e}")))?
        },
        snapshot,
        mask,
        meta: parse_meta(meta)?,
    };
    ticket.validate()?;
    Ok(ticket)
}

fn take_meta(meta: &mut BTreeMap<String, String>, key: &str) -> Result<String, TicketError> {
    meta.remove(key)
        .ok_or_else(|| TicketError::Malformed(format!("missing metadata key `{key}`")))
}

fn parse_field<V: std::str::FromStr>(meta: &mut BTreeMap<String, String>, key: &str) -> Result<V, TicketError> {
    let raw = take_meta(meta, key)?;
    raw.parse()
        .map_err(|_| TicketError::Malformed(format!("metadata `{key}` has invalid value `{raw}`")))
}

fn parse_meta(mut meta: BTreeMap<String, String>) -> Result<TicketMeta, TicketError> {
    let out = TicketMeta {
        source_dataset_id: take_meta(&mut meta, "source_dataset_id")?,
        source_optimizer: take_meta(&mut meta, "source_optimizer")?,
        model_spec_hash: take_meta(&mut meta, "model_spec_hash")?,
        pruning_iteration: parse_field(&mut meta, "pruning_iteration")?,
        remaining_fraction: parse_field(&mut meta, "remaining_fraction")?,
        late_reset_k: parse_field(&mut meta, "late_reset_k")?,
        seed: parse_field(&mut meta, "seed")?,
        format_version: parse_field(&mut meta, "format_version")?,
        extra: BTreeMap::new(),
    };
    let mut extra = BTreeMap::new();
    for (k, v) in meta {
        match k.strip_prefix("x.") {
            Some(key) => {
                extra.insert(key.to_string(), v);
            }
            None => return Err(TicketError::Malformed(format!("unknown metadata key `{k}`"))),
        }
    }
    Ok(TicketMeta { extra, ..out })
}

pub fn encode_ticket<T: Scalar>(ticket: &Ticket<T>) -> Vec<u8> {
    encode(ticket, TICKET_MAGIC, DTYPE_F32)
}

pub fn decode_ticket<T: Scalar>(bytes: &[u8]) -> Result<Ticket<T>, TicketError> {
    decode(bytes, TICKET_MAGIC)
}

pub fn encode_checkpoint<T: Scalar>(ticket: &Ticket<T>) -> Vec<u8> {
    encode(ticket, CHECKPOINT_MAGIC, DTYPE_F64)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Ticket<T>, TicketError> {
    decode(bytes, CHECKPOINT_MAGIC)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TicketError> {
    let io = |source| TicketError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read_file(path: &Path) -> Result<Vec<u8>, TicketError> {
    fs::read(path).map_err(|source| TicketError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes a ticket at f32 precision. The file appears atomically.
pub fn save_ticket<T: Scalar>(ticket: &Ticket<T>, path: &Path) -> Result<(), TicketError> {
    write_atomic(path, &encode_ticket(ticket))
}

pub fn load_ticket<T: Scalar>(path: &Path) -> Result<Ticket<T>, TicketError> {
    decode_ticket(&read_file(path)?)
}

/// Writes a full-precision checkpoint used to resume generation.
pub fn save_checkpoint<T: Scalar>(ticket: &Ticket<T>, path: &Path) -> Result<(), TicketError> {
    write_atomic(path, &encode_checkpoint(ticket))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Ticket<T>, TicketError> {
    decode_checkpoint(&read_file(path)?)
}

/// Equality after rounding both snapshots to f32.
pub fn same_at_f32<T: Scalar, U: Scalar>(a: &Ticket<T>, b: &Ticket<U>) -> bool {
    let (pa, pb) = (a.snapshot.cast::<f32>(), b.snapshot.cast::<f32>());
    a.spec == b.spec && a.mask == b.mask && a.meta == b.meta && pa.same_values(&pb)
        && pa.iter().zip(pb.iter()).all(|((n1, p1), (n2, p2))| n1 == n2 && p1.kind == p2.kind)
}
