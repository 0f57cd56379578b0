//! Messages exchanged between devices.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::partition::DeviceId;

/// Device id used for frames coming from the camera.
pub const CAMERA: DeviceId = 0;

/// Bits of `dest_role` that hold the input slot.
pub const SLOT_BITS: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    Data = 0,
    AlmostFull = 1,
    RoleUpdate = 2,
    Heartbeat = 3,
    Ack = 4,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MessageKind::Data,
            1 => MessageKind::AlmostFull,
            2 => MessageKind::RoleUpdate,
            3 => MessageKind::Heartbeat,
            4 => MessageKind::Ack,
            _ => return None,
        })
    }

    pub fn is_control(self) -> bool {
        self != MessageKind::Data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

impl Payload {
    pub fn empty() -> Self {
        Payload::Bytes(Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub stream_id: u16,
    pub tag: u64,
    pub source: DeviceId,
    /// Receiving task id and input slot, packed by [`pack_role`].
    pub dest_role: u16,
    pub payload: Payload,
}

pub fn pack_role(task: usize, slot: usize) -> u16 {
    ((task << SLOT_BITS) | slot) as u16
}

pub fn unpack_role(role: u16) -> (usize, usize) {
    let role = role as usize;
    (role >> SLOT_BITS, role & ((1 << SLOT_BITS) - 1))
}

impl Message {
    pub fn data(stream_id: u16, tag: u64, source: DeviceId, dest_role: u16, t: Tensor) -> Self {
        Self {
            kind: MessageKind::Data,
            stream_id,
            tag,
            source,
            dest_role,
            payload: Payload::Tensor(t),
        }
    }

    pub fn control(kind: MessageKind, stream_id: u16, source: DeviceId, body: Vec<u8>) -> Self {
        debug_assert!(kind.is_control());
        Self {
            kind,
            stream_id,
            tag: 0,
            source,
            dest_role: 0,
            payload: Payload::Bytes(body),
        }
    }

    pub fn tensor(&self) -> Option<&Tensor> {
        match &self.payload {
            Payload::Tensor(t) => Some(t),
            Payload::Bytes(_) => None,
        }
    }

    pub fn body(&self) -> &[u8] {
        match &self.payload {
            Payload::Bytes(b) => b,
            Payload::Tensor(_) => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_packing() {
        for (t, s) in [(0, 0), (3, 5), (1023, 63)] {
            assert_eq!(unpack_role(pack_role(t, s)), (t, s));
        }
    }

    #[test]
    fn kinds_roundtrip() {
        for k in 0..5 {
            assert_eq!(MessageKind::from_u8(k).unwrap() as u8, k);
        }
        assert!(MessageKind::from_u8(9).is_none());
        assert!(MessageKind::AlmostFull.is_control());
    }
}
