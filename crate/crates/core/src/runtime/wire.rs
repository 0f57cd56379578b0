//! Binary framing.
//!
//! Every frame is a 20-byte little-endian header followed by the payload:
//!
//! | field        | type |
//! |--------------|------|
//! | version      | u8   |
//! | kind         | u8   |
//! | stream_id    | u16  |
//! | tag          | u64  |
//! | source       | u16  |
//! | dest_role    | u16  |
//! | payload_len  | u32  |
//!
//! Data payloads are tensors: rank (u8), each dim (u32), then the values as
//! f32. Control payloads are opaque bytes.

use std::io::{Read, Write};

use crate::engine::Tensor;
use crate::error::{Error, Result};

use super::message::{Message, MessageKind, Payload};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

fn wire(msg: impl Into<String>) -> Error {
    Error::Wire(msg.into())
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let dims = t.dims();
    let rank = u8::try_from(dims.len()).map_err(|_| wire("tensor rank exceeds 255"))?;
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| wire("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let (&rank, mut rest) = buf.split_first().ok_or_else(|| wire("empty tensor payload"))?;
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        if rest.len() < 4 {
            return Err(wire("truncated tensor dims"));
        }
        let (d, r) = rest.split_at(4);
        dims.push(u32::from_le_bytes(d.try_into().unwrap()) as usize);
        rest = r;
    }
    let n: usize = dims.iter().product();
    if rest.len() != n * 4 {
        return Err(wire(format!(
            "tensor body has {} bytes, shape needs {}",
            rest.len(),
            n * 4
        )));
    }
    let data = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_dims(&dims, data).map_err(|e| wire(e.to_string()))
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match (&msg.payload, msg.kind) {
        (Payload::Tensor(t), MessageKind::Data) => encode_tensor(t, &mut payload)?,
        (Payload::Bytes(b), k) if k.is_control() => payload.extend_from_slice(b),
        _ => return Err(wire("data messages carry tensors, control messages carry bytes")),
    }
    let len = u32::try_from(payload.len()).map_err(|_| wire("payload exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.push(WIRE_VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.stream_id.to_le_bytes());
    out.extend_from_slice(&msg.tag.to_le_bytes());
    out.extend_from_slice(&msg.source.to_le_bytes());
    out.extend_from_slice(&msg.dest_role.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Header {
    kind: MessageKind,
    stream_id: u16,
    tag: u64,
    source: u16,
    dest_role: u16,
    len: usize,
}

fn parse_header(h: &[u8]) -> Result<Header> {
    if h.len() < HEADER_LEN {
        return Err(wire("truncated header"));
    }
    if h[0] != WIRE_VERSION {
        return Err(wire(format!("unsupported wire version {}", h[0])));
    }
    let kind = MessageKind::from_u8(h[1]).ok_or_else(|| wire(format!("unknown kind {}", h[1])))?;
    let u16_at = |i: usize| u16::from_le_bytes([h[i], h[i + 1]]);
    Ok(Header {
        kind,
        stream_id: u16_at(2),
        tag: u64::from_le_bytes(h[4..12].try_into().unwrap()),
        source: u16_at(12),
        dest_role: u16_at(14),
        len: u32::from_le_bytes(h[16..20].try_into().unwrap()) as usize,
    })
}

fn build(h: Header, body: &[u8]) -> Result<Message> {
    let payload = if h.kind == MessageKind::Data {
        Payload::Tensor(decode_tensor(body)?)
    } else {
        Payload::Bytes(body.to_vec())
    };
    Ok(Message {
        kind: h.kind,
        stream_id: h.stream_id,
        tag: h.tag,
        source: h.source,
        dest_role: h.dest_role,
        payload,
    })
}

/// Decodes one frame from the front of `buf`. Returns the message and the
/// number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize)> {
    let h = parse_header(buf)?;
    let end = HEADER_LEN + h.len;
    if buf.len() < end {
        return Err(wire("truncated payload"));
    }
    let body = &buf[HEADER_LEN..end];
    Ok((build(h, body)?, end))
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Message> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    let h = parse_header(&head)?;
    let mut body = vec![0u8; h.len];
    r.read_exact(&mut body)?;
    build(h, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Message {
        let t = Tensor::from_dims(&[2, 3], vec![1.0, -0.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        Message::data(7, 0x0102_0304_0506_0708, 3, 0x0abc, t)
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample()).unwrap();
        assert_eq!(b[0], WIRE_VERSION);
        assert_eq!(b[1], 0);
        assert_eq!(&b[2..4], &7u16.to_le_bytes());
        assert_eq!(&b[4..12], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert_eq!(&b[12..14], &3u16.to_le_bytes());
        assert_eq!(&b[14..16], &0x0abcu16.to_le_bytes());
        let len = 1 + 2 * 4 + 6 * 4;
        assert_eq!(&b[16..20], &(len as u32).to_le_bytes());
        assert_eq!(b[20], 2);
        assert_eq!(&b[21..25], &2u32.to_le_bytes());
        assert_eq!(b.len(), HEADER_LEN + len);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = sample();
        let (back, used) = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(used, encode(&m).unwrap().len());
        assert!(back.tensor().unwrap().bit_eq(m.tensor().unwrap()));
        assert_eq!(back.tag, m.tag);
        let c = Message::control(MessageKind::Ack, 1, 2, vec![9, 8]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &c).unwrap();
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = encode(&sample()).unwrap();
        assert!(decode(&b[..10]).is_err());
        b[0] = 9;
        assert!(decode(&b).is_err());
        let mut b = encode(&sample()).unwrap();
        b.pop();
        assert!(decode(&b).is_err());
        let bad = Message {
            payload: Payload::empty(),
            ..sample()
        };
        assert!(encode(&bad).is_err());
    }
}
