//! Binary container for a [`ServerState`].
//!
//! Layout: magic `KSCK`, format version (u32), payload, CRC-32 of everything
//! before it. All integers and floats are little-endian; matrices are stored
//! row-major after their dimensions.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, ModelParams, Role};
use crate::server::{GateRecord, KnowledgeEntry, KnowledgeTable, Rejection, ServerState};

const MAGIC: &[u8; 4] = b"KSCK";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.len(m.nrows());
        self.len(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn string(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // Every stored element takes at least one byte.
        if v > (self.buf.len() - self.pos) as u64 * 8 + 8 {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (r, c) = (self.len()?, self.len()?);
        let n = r
            .checked_mul(c)
            .ok_or_else(|| Error::Checkpoint("matrix too large".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_row_slice(r, c, &data))
    }
    fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.len()?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(data))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn write_model(w: &mut Writer, m: &ModelParams) {
    w.u8(m.role.tag());
    w.len(m.layers().len());
    for l in m.layers() {
        w.u8(l.activation.tag());
        w.matrix(&l.weight);
        w.vector(&l.bias);
    }
}

fn read_model(r: &mut Reader) -> Result<ModelParams> {
    let role = Role::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown role".into()))?;
    let n = r.len()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let act = Activation::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown activation".into()))?;
        let weight = r.matrix()?;
        let bias = r.vector()?;
        layers.push(Dense::new(weight, bias, act)?);
    }
    ModelParams::new(role, layers)
}

fn opt_f64(w: &mut Writer, v: Option<f64>) {
    w.u8(u8::from(v.is_some()));
    w.f64(v.unwrap_or(0.0));
}

fn read_opt_f64(r: &mut Reader) -> Result<Option<f64>> {
    let some = r.bool()?;
    let v = r.f64()?;
    Ok(some.then_some(v))
}

pub fn encode_checkpoint(server: &ServerState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(server.round);
    w.u64(server.version);
    write_model(&mut w, &server.classifier);

    w.len(server.table.dim());
    w.len(server.table.classes());
    for e in server.table.entries() {
        w.u8(u8::from(e.initialized));
        w.u8(u8::from(e.last_winner.is_some()));
        w.len(e.last_winner.unwrap_or(0));
        w.vector(&e.mean);
        w.matrix(&e.cov);
    }

    w.len(server.gate_log.len());
    for g in &server.gate_log {
        w.u32(g.round);
        w.f64(g.time);
        w.len(g.client);
        w.len(g.class);
        w.f64(g.trace_k);
        opt_f64(&mut w, g.trace_r);
        w.u8(u8::from(g.gated));
        w.u8(u8::from(g.learned));
        w.u8(u8::from(g.takeover));
    }

    w.len(server.rejections.len());
    for rej in &server.rejections {
        w.u32(rej.round);
        w.f64(rej.time);
        w.len(rej.client);
        w.string(&rej.reason);
    }

    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ServerState> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let round = r.u32()?;
    let server_version = r.u64()?;
    let classifier = read_model(&mut r)?;

    let dim = r.len()?;
    let classes = r.len()?;
    let mut entries = Vec::with_capacity(classes);
    for _ in 0..classes {
        let initialized = r.bool()?;
        let has_winner = r.bool()?;
        let winner = r.len()?;
        entries.push(KnowledgeEntry {
            initialized,
            last_winner: has_winner.then_some(winner),
            mean: r.vector()?,
            cov: r.matrix()?,
        });
    }
    let table = KnowledgeTable::from_entries(dim, entries)?;

    let n = r.len()?;
    let mut gate_log = Vec::with_capacity(n);
    for _ in 0..n {
        gate_log.push(GateRecord {
            round: r.u32()?,
            time: r.f64()?,
            client: r.len()?,
            class: r.len()?,
            trace_k: r.f64()?,
            trace_r: read_opt_f64(&mut r)?,
            gated: r.bool()?,
            learned: r.bool()?,
            takeover: r.bool()?,
        });
    }

    let n = r.len()?;
    let mut rejections = Vec::with_capacity(n);
    for _ in 0..n {
        rejections.push(Rejection {
            round: r.u32()?,
            time: r.f64()?,
            client: r.len()?,
            reason: r.string()?,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(ServerState {
        classifier,
        table,
        gate_log,
        rejections,
        version: server_version,
        round,
    })
}

pub fn save_checkpoint(server: &ServerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(server)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ServerState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::init_server;
    use crate::settings::{ProtocolConfig, TrainConfig};

    fn server() -> ServerState {
        let cfg = ProtocolConfig::new(TrainConfig::default(), 3, 5);
        let mut s = init_server(&cfg, 4).unwrap();
        s.table.set(1, DVector::from_element(8, 0.5), DMatrix::identity(8, 8) * 2.0, Some(3));
        s.gate_log.push(GateRecord {
            round: 2,
            time: 1.5,
            client: 3,
            class: 1,
            trace_k: 0.1,
            trace_r: None,
            gated: true,
            learned: true,
            takeover: false,
        });
        s.rejections.push(Rejection {
            round: 2,
            time: 2.0,
            client: 0,
            reason: "degenerate generator".into(),
        });
        s.version = 7;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = server();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&s)).unwrap(), s);
        let fresh = init_server(&ProtocolConfig::new(TrainConfig::default(), 2, 2), 0).unwrap();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&fresh)).unwrap(), fresh);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut b = encode_checkpoint(&server());
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        let err = decode_checkpoint(&b).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn old_version_rejected() {
        let mut b = encode_checkpoint(&server());
        b[4..8].copy_from_slice(&0u32.to_le_bytes());
        let err = decode_checkpoint(&b).unwrap_err().to_string();
        assert!(err.contains("unsupported version"), "{err}");
    }
}
