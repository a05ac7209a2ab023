//! Model file format, little-endian throughout:
//!
//! ```text
//! "BIHR" | version u16 | config_len u32 | config (TOML) | count u32 | record*
//! record = name_len u16 | name | kind u8 | ndim u8 | dim u32 * ndim | payload
//! ```
//!
//! Payloads: kind 0 holds `f64` values; kind 1 holds one `f64` scaling factor
//! per output filter followed by the sign bits packed 8 per byte (bit set for
//! +1, least significant first, unused high bits set); kind 2 is an opaque
//! byte blob prefixed by its `u32` length.

use std::io::Write;
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::autograd::{Layer, ParamKind};
use crate::bitpack::{pack, unpack, words_for, BitTensor, ScaleFactors, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const MAGIC: [u8; 4] = *b"BIHR";
pub const FORMAT_VERSION: u16 = 1;

const KIND_REAL: u8 = 0;
const KIND_BINARY: u8 = 1;
const KIND_BLOB: u8 = 2;

/// A decoded model file.
pub struct ModelFile {
    pub network: Network,
    /// Extra named byte records (e.g. optimizer state).
    pub blobs: Vec<(String, Vec<u8>)>,
}

/// Byte span of one record inside an encoded file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub kind: u8,
    pub bytes: usize,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("length exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_header(out: &mut Vec<u8>, name: &str, kind: u8, shape: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid("record name too long"))?;
    put_u16(out, len);
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.push(u8::try_from(shape.len()).map_err(|_| Error::invalid("too many dimensions"))?);
    for &d in shape {
        put_u32(out, d)?;
    }
    Ok(())
}

/// Encodes `net` and any extra blobs.
pub fn write_model(net: &Network, blobs: &[(&str, &[u8])]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    let cfg = net.config().to_toml()?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    let params = net.params();
    put_u32(&mut out, params.len() + blobs.len())?;
    for p in params {
        let shape = p.value.shape();
        if p.kind == ParamKind::BinaryWeight {
            put_header(&mut out, &p.name, KIND_BINARY, shape)?;
            for a in p.scale_factors()?.0 {
                out.extend_from_slice(&a.to_le_bytes());
            }
            let bits = pack(&p.value);
            let nbytes = bits.len().div_ceil(8);
            let bytes: Vec<u8> = bits.words().iter().flat_map(|w| w.to_le_bytes()).collect();
            out.extend_from_slice(&bytes[..nbytes]);
        } else {
            put_header(&mut out, &p.name, KIND_REAL, shape)?;
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for (name, data) in blobs {
        put_header(&mut out, name, KIND_BLOB, &[])?;
        put_u32(&mut out, data.len())?;
        out.extend_from_slice(data);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Corruption("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

struct RawRecord<'a> {
    name: String,
    kind: u8,
    shape: Vec<usize>,
    start: usize,
    reader_end: usize,
    payload: Payload<'a>,
}

enum Payload<'a> {
    Real(Vec<f64>),
    Binary(Vec<f64>, &'a [u8]),
    Blob(&'a [u8]),
}

fn read_record<'a>(r: &mut Reader<'a>) -> Result<RawRecord<'a>> {
    let start = r.pos;
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Corruption("record name is not UTF-8".into()))?
        .to_string();
    let kind = r.u8()?;
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Corruption(format!("{name}: shape overflow")))?;
    let payload = match kind {
        KIND_REAL => Payload::Real(r.f64s(n)?),
        KIND_BINARY => {
            let c_out = *shape
                .first()
                .ok_or_else(|| Error::Corruption(format!("{name}: binary record without shape")))?;
            let alpha = r.f64s(c_out)?;
            Payload::Binary(alpha, r.take(n.div_ceil(8))?)
        }
        KIND_BLOB => {
            let len = r.u32()?;
            Payload::Blob(r.take(len)?)
        }
        k => return Err(Error::Corruption(format!("{name}: unknown record kind {k}"))),
    };
    Ok(RawRecord {
        name,
        kind,
        shape,
        start,
        reader_end: r.pos,
        payload,
    })
}

fn read_header(buf: &[u8]) -> Result<(Reader<'_>, NetworkConfig, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = r.u16().map_err(|_| Error::Format("file too short for header".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = r.u32()?;
    let cfg = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = NetworkConfig::from_toml(cfg).map_err(|e| Error::Format(format!("config: {e}")))?;
    let count = r.u32()?;
    Ok((r, config, count))
}

fn unpack_bytes(shape: &[usize], bytes: &[u8]) -> Result<FloatTensor> {
    let n: usize = shape.iter().product();
    let mut padded = bytes.to_vec();
    padded.resize(words_for(n) * WORD_BITS / 8, 0xff);
    let words = padded
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    unpack(&BitTensor::from_words(shape.to_vec(), words)?)
}

/// Decodes a model file. Nothing is returned unless every record matches the
/// network described by the embedded config.
pub fn read_model(buf: &[u8]) -> Result<ModelFile> {
    let (mut r, config, count) = read_header(buf)?;
    let mut network = Network::build(&config, 0)?;
    let mut blobs = Vec::new();
    let mut assigned = 0;
    {
        let mut params = network.params_mut();
        let mut seen = vec![false; params.len()];
        for _ in 0..count {
            let rec = read_record(&mut r)?;
            if let Payload::Blob(b) = rec.payload {
                blobs.push((rec.name, b.to_vec()));
                continue;
            }
            let idx = params
                .iter()
                .position(|p| p.name == rec.name)
                .ok_or_else(|| Error::Corruption(format!("unknown parameter {}", rec.name)))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Corruption(format!("duplicate parameter {}", rec.name)));
            }
            let p = &mut params[idx];
            if p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Corruption(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            match (rec.payload, p.kind) {
                (Payload::Binary(alpha, bits), ParamKind::BinaryWeight) => {
                    let signs = unpack_bytes(&rec.shape, bits)?;
                    let plane = signs.len() / alpha.len().max(1);
                    let mut v = signs;
                    for (row, a) in v.data_mut().chunks_mut(plane).zip(&alpha) {
                        row.iter_mut().for_each(|s| *s *= a);
                    }
                    if !v.is_finite() {
                        return Err(Error::Corruption(format!("{}: non-finite values", rec.name)));
                    }
                    p.set_value(v);
                    p.set_frozen_scale(Some(ScaleFactors(alpha)));
                }
                (Payload::Real(values), kind) if kind != ParamKind::BinaryWeight => {
                    p.set_value(FloatTensor::new(rec.shape, values).map_err(|e| {
                        Error::Corruption(format!("{}: {e}", rec.name))
                    })?);
                }
                _ => {
                    return Err(Error::Corruption(format!(
                        "{}: record kind {} does not match parameter",
                        rec.name, rec.kind
                    )))
                }
            }
            assigned += 1;
        }
        if assigned != params.len() {
            let missing = params
                .iter()
                .zip(&seen)
                .find(|(_, s)| !**s)
                .map(|(p, _)| p.name.clone())
                .unwrap_or_default();
            return Err(Error::Corruption(format!("missing parameter {missing}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(ModelFile { network, blobs })
}

/// Lists every record with its encoded size in bytes.
pub fn record_sizes(buf: &[u8]) -> Result<Vec<Record>> {
    let (mut r, _, count) = read_header(buf)?;
    (0..count)
        .map(|_| {
            let rec = read_record(&mut r)?;
            Ok(Record {
                name: rec.name,
                kind: rec.kind,
                bytes: rec.reader_end - rec.start,
            })
        })
        .collect()
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", file.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &write_model(net, &[])?)
}

pub fn load(path: &Path) -> Result<Network> {
    Ok(read_model(&std::fs::read(path)?)?.network)
}
