//! The coding header and the bit-exact wire format for packets exchanged
//! between hosts and switches.
//!
//! Layout is big-endian, fixed field order:
//!
//! ```text
//! version:        u8   (always 1)
//! stream_id:      u16
//! batch_number:   u32
//! next_primitive: u8   (1=forward 2=split 3=code 4=gather 5=decode 6=deliver)
//! gen_size:       u8   (k, >= 1)
//! coeffs:         k bytes, GF(2^8) coefficient vector
//! orig_len:       u16  (pre-padding payload length; 0 unless basis packet)
//! telemetry_count:u8, then per record: switch_id u16, ingress u64, egress u64
//! payload_len:    u16, then payload bytes
//! ```
//!
//! An image is therefore `14 + k + 18 * telemetry_count + payload_len` bytes.
//! Coefficients ride in every packet, so the decoder's Gaussian elimination
//! is uniform regardless of which subset of paths survived. A basis-vector
//! packet (coeffs = e_i) is an uncoded original; there is no separate plain
//! packet type.

use thiserror::Error;

use crate::gf::CoeffVector;

/// Wire format version.
pub const WIRE_VERSION: u8 = 1;

/// Fixed bytes of an image before coefficients, telemetry and payload.
pub const FIXED_WIRE_BYTES: usize = 14;

/// Bytes added per telemetry record.
pub const TELEMETRY_RECORD_BYTES: usize = 18;

/// The coding primitive an arriving packet is subject to next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Primitive {
    Forward = 1,
    Split = 2,
    Code = 3,
    Gather = 4,
    Decode = 5,
    Deliver = 6,
}

impl Primitive {
    pub fn from_wire(value: u8) -> Option<Self> {
        match value {
            1 => Some(Self::Forward),
            2 => Some(Self::Split),
            3 => Some(Self::Code),
            4 => Some(Self::Gather),
            5 => Some(Self::Decode),
            6 => Some(Self::Deliver),
            _ => None,
        }
    }

    pub fn as_wire(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Split => "split",
            Self::Code => "code",
            Self::Gather => "gather",
            Self::Decode => "decode",
            Self::Deliver => "deliver",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "forward" => Some(Self::Forward),
            "split" => Some(Self::Split),
            "code" => Some(Self::Code),
            "gather" => Some(Self::Gather),
            "decode" => Some(Self::Decode),
            "deliver" => Some(Self::Deliver),
            _ => None,
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One in-band telemetry record stamped by a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TelemetryRecord {
    pub switch_id: u16,
    pub ingress_ts: u64,
    pub egress_ts: u64,
}

/// Per-packet coordination record carried by every coded packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingHeader {
    pub stream_id: u16,
    pub batch_number: u32,
    pub next_primitive: Primitive,
    /// Coefficient vector of this packet over the batch's originals; its
    /// length is the generation size k.
    pub coeffs: CoeffVector,
    /// Pre-padding payload length. Meaningful only for basis-vector packets.
    pub orig_len: u16,
    /// Append-only, ordered by ingress timestamp.
    pub telemetry: Vec<TelemetryRecord>,
}

impl CodingHeader {
    pub fn gen_size(&self) -> u8 {
        self.coeffs.len() as u8
    }

    /// Total wire image length for this header plus a payload of
    /// `payload_len` bytes.
    pub fn wire_len(&self, payload_len: usize) -> usize {
        FIXED_WIRE_BYTES
            + self.coeffs.len()
            + TELEMETRY_RECORD_BYTES * self.telemetry.len()
            + payload_len
    }
}

/// Wire unit: a coding header plus payload bytes. Arrival metadata (ingress
/// port, timestamps) lives outside the wire image, in switch and simulator
/// state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: CodingHeader,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn wire_len(&self) -> usize {
        self.header.wire_len(self.payload.len())
    }

    pub fn to_wire(&self) -> Result<Vec<u8>, WireError> {
        serialize(&self.header, &self.payload)
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, WireError> {
        let (header, payload) = parse(bytes)?;
        Ok(Self { header, payload })
    }
}

/// Wire encode/decode failures, naming the offending field.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("image truncated at field `{field}`")]
    Truncated { field: &'static str },
    #[error("unknown wire version {0}")]
    UnknownVersion(u8),
    #[error("undefined next_primitive value {0}")]
    UndefinedPrimitive(u8),
    #[error("invalid field `{field}`: {reason}")]
    Invalid {
        field: &'static str,
        reason: &'static str,
    },
    #[error("field `{field}` exceeds wire limits ({len} > {max})")]
    TooLong {
        field: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
}

fn check_header(header: &CodingHeader, payload_len: usize) -> Result<(), WireError> {
    if header.coeffs.is_empty() {
        return Err(WireError::Invalid {
            field: "gen_size",
            reason: "generation size must be at least 1",
        });
    }
    if header.coeffs.len() > u8::MAX as usize {
        return Err(WireError::TooLong {
            field: "coeffs",
            len: header.coeffs.len(),
            max: u8::MAX as usize,
        });
    }
    if header.coeffs.is_zero() {
        return Err(WireError::Invalid {
            field: "coeffs",
            reason: "all-zero coefficient vector",
        });
    }
    if payload_len > u16::MAX as usize {
        return Err(WireError::TooLong {
            field: "payload",
            len: payload_len,
            max: u16::MAX as usize,
        });
    }
    if header.telemetry.len() > u8::MAX as usize {
        return Err(WireError::TooLong {
            field: "telemetry",
            len: header.telemetry.len(),
            max: u8::MAX as usize,
        });
    }
    for pair in header.telemetry.windows(2) {
        if pair[1].ingress_ts < pair[0].ingress_ts {
            return Err(WireError::Invalid {
                field: "telemetry",
                reason: "records not ordered by ingress_ts",
            });
        }
    }
    Ok(())
}

/// Encodes a header and payload into its wire image.
pub fn serialize(header: &CodingHeader, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    check_header(header, payload.len())?;
    let mut out = Vec::with_capacity(header.wire_len(payload.len()));
    out.push(WIRE_VERSION);
    out.extend_from_slice(&header.stream_id.to_be_bytes());
    out.extend_from_slice(&header.batch_number.to_be_bytes());
    out.push(header.next_primitive.as_wire());
    out.push(header.gen_size());
    out.extend_from_slice(&header.coeffs.as_bytes());
    out.extend_from_slice(&header.orig_len.to_be_bytes());
    out.push(header.telemetry.len() as u8);
    for rec in &header.telemetry {
        out.extend_from_slice(&rec.switch_id.to_be_bytes());
        out.extend_from_slice(&rec.ingress_ts.to_be_bytes());
        out.extend_from_slice(&rec.egress_ts.to_be_bytes());
    }
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireError::Truncated { field });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, WireError> {
        let s = self.take(2, field)?;
        Ok(u16::from_be_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, WireError> {
        let s = self.take(4, field)?;
        Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, WireError> {
        let s = self.take(8, field)?;
        let mut b = [0u8; 8];
        b.copy_from_slice(s);
        Ok(u64::from_be_bytes(b))
    }
}

/// Parses a wire image back into header and payload. Rejects truncated and
/// over-long images; never panics on malformed input.
pub fn parse(bytes: &[u8]) -> Result<(CodingHeader, Vec<u8>), WireError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let version = cur.u8("version")?;
    if version != WIRE_VERSION {
        return Err(WireError::UnknownVersion(version));
    }
    let stream_id = cur.u16("stream_id")?;
    let batch_number = cur.u32("batch_number")?;
    let prim_raw = cur.u8("next_primitive")?;
    let next_primitive =
        Primitive::from_wire(prim_raw).ok_or(WireError::UndefinedPrimitive(prim_raw))?;
    let gen_size = cur.u8("gen_size")?;
    if gen_size == 0 {
        return Err(WireError::Invalid {
            field: "gen_size",
            reason: "generation size must be at least 1",
        });
    }
    let coeffs = CoeffVector::from_bytes(cur.take(gen_size as usize, "coeffs")?);
    if coeffs.is_zero() {
        return Err(WireError::Invalid {
            field: "coeffs",
            reason: "all-zero coefficient vector",
        });
    }
    let orig_len = cur.u16("orig_len")?;
    let telemetry_count = cur.u8("telemetry_count")?;
    let mut telemetry: Vec<TelemetryRecord> = Vec::with_capacity(telemetry_count as usize);
    for _ in 0..telemetry_count {
        let switch_id = cur.u16("telemetry")?;
        let ingress_ts = cur.u64("telemetry")?;
        let egress_ts = cur.u64("telemetry")?;
        if let Some(prev) = telemetry.last() {
            if ingress_ts < prev.ingress_ts {
                return Err(WireError::Invalid {
                    field: "telemetry",
                    reason: "records not ordered by ingress_ts",
                });
            }
        }
        telemetry.push(TelemetryRecord {
            switch_id,
            ingress_ts,
            egress_ts,
        });
    }
    let payload_len = cur.u16("payload_len")?;
    let payload = cur.take(payload_len as usize, "payload")?.to_vec();
    if cur.pos != bytes.len() {
        return Err(WireError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    Ok((
        CodingHeader {
            stream_id,
            batch_number,
            next_primitive,
            coeffs,
            orig_len,
            telemetry,
        },
        payload,
    ))
}
