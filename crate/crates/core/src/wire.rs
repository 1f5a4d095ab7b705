//! Interest and Content Object messages and their bit-exact wire encoding.
//!
//! Every packet is an 8-byte fixed header followed by one top-level TLV:
//!
//! ```text
//! byte 0     version (0x01)
//! byte 1     packet type (0x00 Interest, 0x01 Content Object)
//! bytes 2-3  total packet length, big-endian
//! bytes 4-6  reserved, zero
//! byte 7     header length (8)
//! ```
//!
//! The fixed-header layout is this crate's convention; only its 8-byte size
//! is fixed by the CCNx framing the system relies on. A nameless Content
//! Object is `header ∥ T_OBJECT ∥ T_PAYLOAD ∥ payload`, exactly 16 bytes of
//! overhead. The message hash covers the body only (everything after the
//! fixed header), so per-hop header changes never affect it.

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hash::Hash256;
use crate::name::{Name, Segment};
use crate::tlv::{TlvError, TlvReader, TlvWriter, HEADER_LEN};

pub const FIXED_HEADER_LEN: usize = 8;
pub const PACKET_VERSION: u8 = 0x01;
pub const PT_INTEREST: u8 = 0x00;
pub const PT_CONTENT_OBJECT: u8 = 0x01;

pub const T_INTEREST: u16 = 0x0001;
pub const T_OBJECT: u16 = 0x0002;

pub const T_NAME: u16 = 0x0000;
pub const T_NAMESEG: u16 = 0x0001;
pub const T_PAYLOAD: u16 = 0x0001;
pub const T_KEYID: u16 = 0x0002;
pub const T_KEYID_RESTR: u16 = 0x0002;
pub const T_HASH_RESTR: u16 = 0x0003;

/// Largest payload accepted by the encoder.
pub const MAX_PAYLOAD: usize = 65_503;

/// Overhead of a nameless Content Object: fixed header plus two TLV opens.
pub const NAMELESS_OVERHEAD: usize = FIXED_HEADER_LEN + 2 * HEADER_LEN;

pub type KeyId = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated")]
    Truncated,
    #[error("length mismatch: fixed header says {header} bytes, buffer has {actual}")]
    LengthMismatch { header: usize, actual: usize },
    #[error("unknown top-level TLV type {0:#06x}")]
    UnknownType(u16),
    #[error("unsupported packet version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown packet type {0:#04x}")]
    BadPacketType(u8),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("encoded packet of {0} bytes exceeds 16-bit packet length")]
    PacketTooLarge(usize),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

impl From<TlvError> for WireError {
    fn from(e: TlvError) -> Self {
        match e {
            TlvError::Truncated => WireError::Truncated,
            TlvError::TooLong(n) => WireError::PacketTooLarge(n),
        }
    }
}

/// The `{CCNxName, KeyIdRestr, HashRestr}` tuple.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NamedAddress {
    pub name: Option<Name>,
    pub key_id_restr: Option<KeyId>,
    pub hash_restr: Option<Hash256>,
}

impl NamedAddress {
    pub fn named(name: Name) -> Self {
        NamedAddress {
            name: Some(name),
            ..Default::default()
        }
    }

    /// A nameless object reached through a routing prefix.
    pub fn hashed(prefix: Name, hash: Hash256) -> Self {
        NamedAddress {
            name: Some(prefix),
            key_id_restr: None,
            hash_restr: Some(hash),
        }
    }

    pub fn is_fetchable(&self) -> bool {
        self.name.is_some() || self.hash_restr.is_some()
    }
}

// Serialized for reports as `{name, hash}` strings.
impl Serialize for NamedAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use alloc::string::ToString;
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("NamedAddress", 2)?;
        st.serialize_field("name", &self.name.as_ref().map(|n| n.to_string()))?;
        st.serialize_field("hash", &self.hash_restr.as_ref().map(|h| h.to_string()))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for NamedAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use alloc::string::String;
        use serde::de::Error;
        #[derive(Deserialize)]
        struct Raw {
            name: Option<String>,
            hash: Option<String>,
        }
        let raw = Raw::deserialize(d)?;
        let name = raw
            .name
            .map(|n| Name::parse(&n).map_err(D::Error::custom))
            .transpose()?;
        let hash_restr = raw
            .hash
            .map(|h| Hash256::from_hex(&h).ok_or_else(|| D::Error::custom("bad hash")))
            .transpose()?;
        Ok(NamedAddress {
            name,
            key_id_restr: None,
            hash_restr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interest {
    pub address: NamedAddress,
}

impl Interest {
    pub fn new(address: NamedAddress) -> Self {
        Interest { address }
    }

    pub fn for_name(name: Name) -> Self {
        Interest::new(NamedAddress::named(name))
    }

    pub fn name(&self) -> Option<&Name> {
        self.address.name.as_ref()
    }

    pub fn encoded_len(&self) -> usize {
        interest_encoded_len(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentObject {
    pub name: Option<Name>,
    pub key_id: Option<KeyId>,
    pub payload: Arc<[u8]>,
}

impl ContentObject {
    pub fn nameless(payload: impl Into<Arc<[u8]>>) -> Self {
        ContentObject {
            name: None,
            key_id: None,
            payload: payload.into(),
        }
    }

    pub fn named(name: Name, payload: impl Into<Arc<[u8]>>) -> Self {
        ContentObject {
            name: Some(name),
            key_id: None,
            payload: payload.into(),
        }
    }

    pub fn is_nameless(&self) -> bool {
        self.name.is_none() && self.key_id.is_none()
    }

    /// Encoded size including the fixed header.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + HEADER_LEN + self.inner_prefix_len() + self.payload.len()
    }

    fn inner_prefix_len(&self) -> usize {
        self.name.as_ref().map_or(0, name_tlv_len)
            + self.key_id.map_or(0, |_| HEADER_LEN + 32)
            + HEADER_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Interest(Interest),
    Object(ContentObject),
}

impl Packet {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        match self {
            Packet::Interest(i) => encode_interest(i),
            Packet::Object(o) => encode_content_object(o),
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Packet::Interest(i) => interest_encoded_len(i),
            Packet::Object(o) => o.encoded_len(),
        }
    }
}

pub(crate) fn name_tlv_len(name: &Name) -> usize {
    HEADER_LEN
        + name
            .segments()
            .iter()
            .map(|s| HEADER_LEN + s.as_bytes().len())
            .sum::<usize>()
}

pub(crate) fn write_name(w: &mut TlvWriter, name: &Name) -> Result<(), TlvError> {
    let m = w.open(T_NAME);
    for seg in name.segments() {
        w.put(T_NAMESEG, seg.as_bytes())?;
    }
    w.close(m)
}

pub(crate) fn read_name(value: &[u8]) -> Result<Name, WireError> {
    let mut r = TlvReader::new(value);
    let mut segs = Vec::new();
    while let Some((t, v)) = r.read()? {
        if t != T_NAMESEG {
            return Err(WireError::Malformed("unexpected TLV inside name"));
        }
        segs.push(Segment::new(v).map_err(|_| WireError::Malformed("empty name segment"))?);
    }
    Ok(Name::from_segments(segs))
}

fn fixed_header(packet_type: u8, total: usize) -> Result<[u8; 8], WireError> {
    let len = u16::try_from(total).map_err(|_| WireError::PacketTooLarge(total))?;
    let l = len.to_be_bytes();
    Ok([
        PACKET_VERSION,
        packet_type,
        l[0],
        l[1],
        0,
        0,
        0,
        FIXED_HEADER_LEN as u8,
    ])
}

/// Body bytes preceding the payload: the T_OBJECT open, optional name and
/// key id, and the T_PAYLOAD open.
fn object_body_prefix(obj: &ContentObject) -> Result<Vec<u8>, WireError> {
    if obj.payload.len() > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(obj.payload.len()));
    }
    let inner_len = obj.inner_prefix_len() + obj.payload.len();
    if FIXED_HEADER_LEN + HEADER_LEN + inner_len > u16::MAX as usize {
        return Err(WireError::PacketTooLarge(
            FIXED_HEADER_LEN + HEADER_LEN + inner_len,
        ));
    }
    let mut w = TlvWriter::with_capacity(HEADER_LEN + obj.inner_prefix_len());
    w.raw(&T_OBJECT.to_be_bytes());
    w.raw(&(inner_len as u16).to_be_bytes());
    if let Some(name) = &obj.name {
        write_name(&mut w, name)?;
    }
    if let Some(k) = &obj.key_id {
        w.put(T_KEYID, k)?;
    }
    w.raw(&T_PAYLOAD.to_be_bytes());
    w.raw(&(obj.payload.len() as u16).to_be_bytes());
    Ok(w.into_inner())
}

pub fn encode_content_object(obj: &ContentObject) -> Result<Vec<u8>, WireError> {
    let prefix = object_body_prefix(obj)?;
    let total = FIXED_HEADER_LEN + prefix.len() + obj.payload.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&fixed_header(PT_CONTENT_OBJECT, total)?);
    out.extend_from_slice(&prefix);
    out.extend_from_slice(&obj.payload);
    Ok(out)
}

/// SHA-256 over the message body (everything after the fixed header).
pub fn compute_object_hash(obj: &ContentObject) -> Result<Hash256, WireError> {
    let prefix = object_body_prefix(obj)?;
    let mut h = Sha256::new();
    h.update(&prefix);
    h.update(&obj.payload);
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&h.finalize());
    Ok(Hash256(bytes))
}

fn interest_body_len(i: &Interest) -> usize {
    i.address.name.as_ref().map_or(0, name_tlv_len)
        + i.address.key_id_restr.map_or(0, |_| HEADER_LEN + 32)
        + i.address.hash_restr.map_or(0, |_| HEADER_LEN + 32)
}

fn interest_encoded_len(i: &Interest) -> usize {
    FIXED_HEADER_LEN + HEADER_LEN + interest_body_len(i)
}

pub fn encode_interest(i: &Interest) -> Result<Vec<u8>, WireError> {
    let total = interest_encoded_len(i);
    let mut w = TlvWriter::with_capacity(total);
    w.raw(&fixed_header(PT_INTEREST, total)?);
    let m = w.open(T_INTEREST);
    if let Some(name) = &i.address.name {
        write_name(&mut w, name)?;
    }
    if let Some(k) = &i.address.key_id_restr {
        w.put(T_KEYID_RESTR, k)?;
    }
    if let Some(h) = &i.address.hash_restr {
        w.put(T_HASH_RESTR, h.as_bytes())?;
    }
    w.close(m)?;
    Ok(w.into_inner())
}

fn array32(v: &[u8]) -> Result<[u8; 32], WireError> {
    v.try_into()
        .map_err(|_| WireError::Malformed("32-byte field has wrong length"))
}

pub fn decode_packet(bytes: &[u8]) -> Result<Packet, WireError> {
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if bytes[0] != PACKET_VERSION {
        return Err(WireError::BadVersion(bytes[0]));
    }
    if bytes[7] as usize != FIXED_HEADER_LEN {
        return Err(WireError::Malformed("fixed header length is not 8"));
    }
    let packet_type = bytes[1];
    if packet_type != PT_INTEREST && packet_type != PT_CONTENT_OBJECT {
        return Err(WireError::BadPacketType(packet_type));
    }
    let declared = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;

    let mut top = TlvReader::new(&bytes[FIXED_HEADER_LEN..]);
    let (typ, value) = top.read()?.ok_or(WireError::Truncated)?;
    let packet = match typ {
        T_OBJECT if packet_type == PT_CONTENT_OBJECT => Packet::Object(decode_object_body(value)?),
        T_INTEREST if packet_type == PT_INTEREST => Packet::Interest(decode_interest_body(value)?),
        T_OBJECT | T_INTEREST => {
            return Err(WireError::Malformed("TLV type disagrees with packet type"))
        }
        other => return Err(WireError::UnknownType(other)),
    };
    if declared != bytes.len() {
        return Err(WireError::LengthMismatch {
            header: declared,
            actual: bytes.len(),
        });
    }
    if !top.is_empty() {
        return Err(WireError::Malformed("trailing bytes after top-level TLV"));
    }
    Ok(packet)
}

pub fn decode_content_object(bytes: &[u8]) -> Result<ContentObject, WireError> {
    match decode_packet(bytes)? {
        Packet::Object(o) => Ok(o),
        Packet::Interest(_) => Err(WireError::Malformed("expected a Content Object")),
    }
}

pub fn decode_interest(bytes: &[u8]) -> Result<Interest, WireError> {
    match decode_packet(bytes)? {
        Packet::Interest(i) => Ok(i),
        Packet::Object(_) => Err(WireError::Malformed("expected an Interest")),
    }
}

fn decode_object_body(value: &[u8]) -> Result<ContentObject, WireError> {
    let mut r = TlvReader::new(value);
    let mut name = None;
    let mut key_id = None;
    let mut payload = None;
    let mut last = None::<u16>;
    while let Some((t, v)) = r.read()? {
        if payload.is_some() {
            return Err(WireError::Malformed("TLV after payload"));
        }
        // T_NAME (0) < T_KEYID (2); payload (1) is always last.
        match t {
            T_NAME if last.is_none() => name = Some(read_name(v)?),
            T_KEYID if last != Some(T_KEYID) => key_id = Some(array32(v)?),
            T_PAYLOAD => payload = Some(Arc::<[u8]>::from(v)),
            _ => return Err(WireError::Malformed("unexpected or repeated TLV in object")),
        }
        last = Some(t);
    }
    Ok(ContentObject {
        name,
        key_id,
        payload: payload.ok_or(WireError::Malformed("object without payload"))?,
    })
}

fn decode_interest_body(value: &[u8]) -> Result<Interest, WireError> {
    let mut r = TlvReader::new(value);
    let mut address = NamedAddress::default();
    let mut last = None::<u16>;
    while let Some((t, v)) = r.read()? {
        if last.is_some_and(|l| t <= l) {
            return Err(WireError::Malformed("interest TLVs out of order"));
        }
        match t {
            T_NAME => address.name = Some(read_name(v)?),
            T_KEYID_RESTR => address.key_id_restr = Some(array32(v)?),
            T_HASH_RESTR => address.hash_restr = Some(Hash256(array32(v)?)),
            _ => return Err(WireError::Malformed("unexpected TLV in interest")),
        }
        last = Some(t);
    }
    Ok(Interest { address })
}

/// Whether `obj` satisfies the Interest's name, KeyId and hash restrictions.
///
/// A nameless object answers an Interest whose name is only a routing prefix,
/// provided the Interest carries a hash restriction.
pub fn match_restrictions(interest: &Interest, obj: &ContentObject) -> bool {
    let a = &interest.address;
    let name_ok = match (&a.name, &obj.name) {
        (None, _) => true,
        (Some(want), Some(have)) => want == have,
        (Some(_), None) => a.hash_restr.is_some(),
    };
    let key_ok = match &a.key_id_restr {
        None => true,
        Some(k) => obj.key_id.as_ref() == Some(k),
    };
    let hash_ok = match &a.hash_restr {
        None => true,
        Some(h) => compute_object_hash(obj).is_ok_and(|got| &got == h),
    };
    name_ok && key_ok && hash_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn nameless(n: usize) -> ContentObject {
        ContentObject::nameless(vec![0xA5u8; n])
    }

    #[test]
    fn nameless_overhead_is_sixteen_bytes() {
        for n in [0usize, 1, 512, 4096, MAX_PAYLOAD] {
            let enc = encode_content_object(&nameless(n)).unwrap();
            assert_eq!(enc.len(), n + 16, "payload {n}");
            assert_eq!(nameless(n).encoded_len(), n + 16);
        }
    }

    #[test]
    fn empty_nameless_layout() {
        let enc = encode_content_object(&nameless(0)).unwrap();
        assert_eq!(
            enc,
            [
                0x01, 0x01, 0x00, 0x10, 0, 0, 0, 0x08, 0x00, 0x02, 0x00, 0x04, 0x00, 0x01, 0x00,
                0x00
            ]
        );
    }

    #[test]
    fn payload_too_large() {
        assert_eq!(
            encode_content_object(&nameless(MAX_PAYLOAD + 1)),
            Err(WireError::PayloadTooLarge(MAX_PAYLOAD + 1))
        );
    }

    #[test]
    fn truncated_mid_payload() {
        let enc = encode_content_object(&nameless(4096)).unwrap();
        assert_eq!(
            decode_content_object(&enc[..4000]),
            Err(WireError::Truncated)
        );
        assert_eq!(decode_content_object(&enc[..5]), Err(WireError::Truncated));
    }

    #[test]
    fn header_length_larger_than_buffer() {
        let mut enc = encode_content_object(&nameless(100)).unwrap();
        enc[2..4].copy_from_slice(&200u16.to_be_bytes());
        assert_eq!(
            decode_content_object(&enc),
            Err(WireError::LengthMismatch {
                header: 200,
                actual: 116
            })
        );
    }

    #[test]
    fn unknown_top_level_type() {
        let mut enc = encode_content_object(&nameless(4)).unwrap();
        enc[8..10].copy_from_slice(&0x0009u16.to_be_bytes());
        assert_eq!(decode_content_object(&enc), Err(WireError::UnknownType(9)));
    }

    #[test]
    fn hash_ignores_fixed_header() {
        let obj = nameless(64);
        let enc = encode_content_object(&obj).unwrap();
        assert_eq!(
            compute_object_hash(&obj).unwrap(),
            Hash256::digest(&enc[8..])
        );
    }

    #[test]
    fn identical_payloads_identical_hashes() {
        let a = compute_object_hash(&nameless(512)).unwrap();
        let b = compute_object_hash(&nameless(512)).unwrap();
        assert_eq!(a, b);
        let mut p = vec![0xA5u8; 512];
        p[100] ^= 1;
        assert_ne!(a, compute_object_hash(&ContentObject::nameless(p)).unwrap());
    }

    #[test]
    fn restriction_matching() {
        let ab = Name::parse("/a/b").unwrap();
        let obj = ContentObject::named(ab.clone(), vec![1, 2, 3]);
        assert!(match_restrictions(&Interest::for_name(ab.clone()), &obj));
        assert!(!match_restrictions(
            &Interest::for_name(Name::parse("/a/c").unwrap()),
            &obj
        ));

        let page = nameless(4096);
        let h = compute_object_hash(&page).unwrap();
        let prefix = Name::parse("/vm/checkpoint/ver=1/ram").unwrap();
        assert!(match_restrictions(
            &Interest::new(NamedAddress::hashed(prefix.clone(), h)),
            &page
        ));
        // A nameless object does not answer a plain name.
        assert!(!match_restrictions(&Interest::for_name(prefix), &page));

        let other = compute_object_hash(&nameless(10)).unwrap();
        let only_hash = Interest::new(NamedAddress {
            hash_restr: Some(other),
            ..Default::default()
        });
        assert!(!match_restrictions(&only_hash, &page));

        let mut keyed = obj.clone();
        keyed.key_id = Some([7; 32]);
        let mut want_key = Interest::for_name(ab);
        want_key.address.key_id_restr = Some([7; 32]);
        assert!(match_restrictions(&want_key, &keyed));
        assert!(!match_restrictions(&want_key, &obj));
        want_key.address.key_id_restr = Some([8; 32]);
        assert!(!match_restrictions(&want_key, &keyed));
    }

    fn arb_name() -> impl Strategy<Value = Name> {
        prop::collection::vec("[a-z0-9=]{1,8}", 0..5).prop_map(|segs| {
            let mut n = Name::root();
            for s in segs {
                n.push(s);
            }
            n
        })
    }

    fn arb_object() -> impl Strategy<Value = ContentObject> {
        (
            prop::option::of(arb_name()),
            prop::option::of(any::<[u8; 32]>()),
            prop::collection::vec(any::<u8>(), 0..2048),
        )
            .prop_map(|(name, key_id, payload)| ContentObject {
                name,
                key_id,
                payload: payload.into(),
            })
    }

    proptest! {
        #[test]
        fn object_round_trip(obj in arb_object()) {
            let enc = encode_content_object(&obj).unwrap();
            prop_assert_eq!(enc.len(), obj.encoded_len());
            prop_assert_eq!(decode_content_object(&enc).unwrap(), obj);
        }

        #[test]
        fn interest_round_trip(
            name in prop::option::of(arb_name()),
            key in prop::option::of(any::<[u8; 32]>()),
            hash in prop::option::of(any::<[u8; 32]>()),
        ) {
            let i = Interest::new(NamedAddress { name, key_id_restr: key, hash_restr: hash.map(Hash256) });
            let enc = encode_interest(&i).unwrap();
            prop_assert_eq!(enc.len(), Packet::Interest(i.clone()).encoded_len());
            prop_assert_eq!(decode_interest(&enc).unwrap(), i);
        }

        #[test]
        fn constant_nameless_overhead(n in 0usize..=MAX_PAYLOAD) {
            prop_assert_eq!(ContentObject::nameless(vec![0u8; n]).encoded_len(), n + 16);
        }
    }
}
