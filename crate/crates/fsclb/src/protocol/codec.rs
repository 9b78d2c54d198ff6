//! Bit-exact binary frames.
//!
//! Every frame starts with a 21-byte little-endian header
//! `{type: u8, agent_id: u32, round: u64, l: u32, d: u32}` followed by the
//! payload as little-endian `f64`s in row-major order. On a stream each frame
//! is prefixed by its length as a 4-byte big-endian integer.

use std::io::{Read, Write};

use super::messages::*;
use crate::error::{Error, Result};
use crate::spectral::{DenseMatrix, DenseVector};

pub const HEADER_LEN: usize = 21;
pub const MAX_FRAME_LEN: usize = 1 << 28;

pub const TYPE_UPLOAD: u8 = 0x01;
pub const TYPE_DOWNLOAD: u8 = 0x02;
pub const TYPE_FEDLIN_UPLOAD: u8 = 0x03;
pub const TYPE_FEDLIN_DOWNLOAD: u8 = 0x04;
pub const TYPE_INIT: u8 = 0x10;
pub const TYPE_ACK: u8 = 0x11;
pub const TYPE_ERROR: u8 = 0x7f;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: u8,
    pub agent_id: u32,
    pub round: u64,
    pub l: u32,
    pub d: u32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn with_header(h: Header, payload_scalars: usize) -> Self {
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * payload_scalars);
        buf.push(h.kind);
        buf.extend_from_slice(&h.agent_id.to_le_bytes());
        buf.extend_from_slice(&h.round.to_le_bytes());
        buf.extend_from_slice(&h.l.to_le_bytes());
        buf.extend_from_slice(&h.d.to_le_bytes());
        Writer(buf)
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Protocol(format!(
                "truncated frame: need {end} bytes, have {}",
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let data = self.vec(rows * cols)?;
        Ok(DenseMatrix::from_row_slice(rows, cols, &data))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim(v: usize) -> u32 {
    u32::try_from(v).expect("dimension exceeds u32")
}

pub fn encode_upload(msg: &UploadMsg) -> Vec<u8> {
    let h = Header {
        kind: TYPE_UPLOAD,
        agent_id: msg.agent_id,
        round: msg.round,
        l: dim(msg.l()),
        d: dim(msg.d()),
    };
    let mut w = Writer::with_header(h, msg.scalar_count() as usize);
    w.matrix(&msg.s_loc);
    w.slice(msg.b_loc.as_slice());
    w.f64(msg.rho_loc);
    w.0
}

pub fn encode_download(msg: &DownloadMsg) -> Vec<u8> {
    let h = Header {
        kind: TYPE_DOWNLOAD,
        agent_id: msg.agent_id,
        round: msg.round,
        l: dim(msg.l()),
        d: dim(msg.d()),
    };
    let mut w = Writer::with_header(h, msg.scalar_count() as usize);
    w.matrix(&msg.s);
    w.slice(msg.theta_hat.as_slice());
    w.f64(msg.log_det);
    w.slice(&msg.hdiag);
    w.f64(msg.delta);
    w.0
}

pub fn encode_fedlin_upload(msg: &FedLinUpload) -> Vec<u8> {
    let d = msg.d();
    let h = Header {
        kind: TYPE_FEDLIN_UPLOAD,
        agent_id: msg.agent_id,
        round: msg.round,
        l: 0,
        d: dim(d),
    };
    let mut w = Writer::with_header(h, d * d + d);
    w.matrix(&msg.dv);
    w.slice(msg.db.as_slice());
    w.0
}

pub fn encode_fedlin_download(msg: &FedLinDownload) -> Vec<u8> {
    let d = msg.d();
    let h = Header {
        kind: TYPE_FEDLIN_DOWNLOAD,
        agent_id: msg.agent_id,
        round: msg.round,
        l: 0,
        d: dim(d),
    };
    let mut w = Writer::with_header(h, d * d + d + 1);
    w.matrix(&msg.v_inv);
    w.slice(msg.theta_hat.as_slice());
    w.f64(msg.log_det);
    w.0
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let bare = |kind, l, d| Header {
        kind,
        agent_id: 0,
        round: 0,
        l,
        d,
    };
    match frame {
        Frame::Upload(m) => encode_upload(m),
        Frame::Download(m) => encode_download(m),
        Frame::FedLinUpload(m) => encode_fedlin_upload(m),
        Frame::FedLinDownload(m) => encode_fedlin_download(m),
        Frame::Init(init) => {
            let mut w = Writer::with_header(bare(TYPE_INIT, dim(init.l), dim(init.d)), 2);
            w.0.push(match init.algo {
                SessionAlgo::Fsclb => 1,
                SessionAlgo::FedLin => 2,
            });
            w.f64(init.lambda);
            w.0
        }
        Frame::Ack => Writer::with_header(bare(TYPE_ACK, 0, 0), 0).0,
        Frame::Error(text) => {
            let mut w = Writer::with_header(bare(TYPE_ERROR, 0, 0), 0);
            w.0.extend_from_slice(text.as_bytes());
            w.0
        }
    }
}

/// Length of the encoded upload frame, without building it.
pub fn upload_frame_len(l: usize, d: usize) -> u64 {
    (HEADER_LEN + 8 * (l * d + d + 1)) as u64
}

pub fn download_frame_len(l: usize, d: usize) -> u64 {
    (HEADER_LEN + 8 * (l * d + d + l + 2)) as u64
}

pub fn fedlin_upload_frame_len(d: usize) -> u64 {
    (HEADER_LEN + 8 * (d * d + d)) as u64
}

pub fn fedlin_download_frame_len(d: usize) -> u64 {
    (HEADER_LEN + 8 * (d * d + d + 1)) as u64
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Protocol(format!(
            "truncated frame: {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    Ok(Header {
        kind: bytes[0],
        agent_id: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
        round: u64::from_le_bytes(bytes[5..13].try_into().unwrap()),
        l: u32::from_le_bytes(bytes[13..17].try_into().unwrap()),
        d: u32::from_le_bytes(bytes[17..21].try_into().unwrap()),
    })
}

fn checked_payload(h: &Header, bytes: &[u8], scalars: Option<usize>) -> Result<()> {
    let Some(n) = scalars else {
        return Err(Error::Protocol(format!(
            "dimensions l = {}, d = {} overflow",
            h.l, h.d
        )));
    };
    let expected = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Protocol("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::Protocol(format!(
            "truncated frame: need {expected} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Frame> {
    let h = decode_header(bytes)?;
    let (l, d) = (h.l as usize, h.d as usize);
    let ld = l.checked_mul(d);
    let dd = d.checked_mul(d);
    let mut r = Reader {
        buf: bytes,
        pos: HEADER_LEN,
    };
    let frame = match h.kind {
        TYPE_UPLOAD => {
            checked_payload(&h, bytes, ld.and_then(|x| x.checked_add(d + 1)))?;
            let s_loc = r.matrix(l, d)?;
            let b_loc = DenseVector::from_vec(r.vec(d)?);
            let rho_loc = r.f64()?;
            Frame::Upload(UploadMsg {
                agent_id: h.agent_id,
                round: h.round,
                s_loc,
                rho_loc,
                b_loc,
            })
        }
        TYPE_DOWNLOAD => {
            checked_payload(&h, bytes, ld.and_then(|x| x.checked_add(d + l + 2)))?;
            let s = r.matrix(l, d)?;
            let theta_hat = DenseVector::from_vec(r.vec(d)?);
            let log_det = r.f64()?;
            let hdiag = r.vec(l)?;
            let delta = r.f64()?;
            Frame::Download(DownloadMsg {
                agent_id: h.agent_id,
                round: h.round,
                s,
                theta_hat,
                log_det,
                hdiag,
                delta,
            })
        }
        TYPE_FEDLIN_UPLOAD => {
            checked_payload(&h, bytes, dd.and_then(|x| x.checked_add(d)))?;
            let dv = r.matrix(d, d)?;
            let db = DenseVector::from_vec(r.vec(d)?);
            Frame::FedLinUpload(FedLinUpload {
                agent_id: h.agent_id,
                round: h.round,
                dv,
                db,
            })
        }
        TYPE_FEDLIN_DOWNLOAD => {
            checked_payload(&h, bytes, dd.and_then(|x| x.checked_add(d + 1)))?;
            let v_inv = r.matrix(d, d)?;
            let theta_hat = DenseVector::from_vec(r.vec(d)?);
            let log_det = r.f64()?;
            Frame::FedLinDownload(FedLinDownload {
                agent_id: h.agent_id,
                round: h.round,
                v_inv,
                theta_hat,
                log_det,
            })
        }
        TYPE_INIT => {
            let algo = match r.take(1)?[0] {
                1 => SessionAlgo::Fsclb,
                2 => SessionAlgo::FedLin,
                other => return Err(Error::Protocol(format!("unknown session algorithm {other}"))),
            };
            let lambda = r.f64()?;
            Frame::Init(SessionInit { algo, l, d, lambda })
        }
        TYPE_ACK => Frame::Ack,
        TYPE_ERROR => {
            let text = String::from_utf8_lossy(&bytes[HEADER_LEN..]).into_owned();
            r.pos = bytes.len();
            Frame::Error(text)
        }
        other => return Err(Error::Protocol(format!("bad frame type byte {other:#04x}"))),
    };
    r.finish()?;
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    let len = u32::try_from(frame.len())
        .ok()
        .filter(|n| (*n as usize) <= MAX_FRAME_LEN)
        .ok_or_else(|| Error::Protocol(format!("frame of {} bytes is too large", frame.len())))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}
