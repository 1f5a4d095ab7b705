//! Reliable Interest-driven transfer.
//!
//! [`FetchSession`] pipelines Interests under a fixed window, retransmits
//! on a fixed RTO, and delivers each requested object upward at most once.
//! Once everything is fetched the session runs the requester side of the
//! close handshake:
//!
//! ```text
//! requester                               responder
//!   (1) Interest .../ver=j/close      -->
//!                                     <--  (2) ACK
//!   (3) Interest .../ver=j/close-ack  -->  releases ver=j
//!                                     <--  (4) ACK
//! ```
//!
//! [`CloseResponder`] is the responder side. It is idempotent: repeated
//! Interests re-elicit ACKs without further effects, so lost messages are
//! recovered by ordinary retransmission.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::Hash256;
use crate::name::Name;
use crate::wire::{ContentObject, Interest, NamedAddress};
use crate::Micros;

pub const ACK_PAYLOAD: [u8; 1] = [0x01];

pub fn close_name(checkpoint: &Name) -> Name {
    checkpoint.child("close")
}

pub fn close_ack_name(checkpoint: &Name) -> Name {
    checkpoint.child("close-ack")
}

/// ACK for a close-path Interest: the Interest's name and payload `0x01`.
pub fn ack_object(name: Name) -> ContentObject {
    ContentObject::named(name, ACK_PAYLOAD.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchParams {
    pub window: usize,
    pub rto: Micros,
    pub max_retries: u32,
    /// Retries for manifest polls, which go unanswered until the producer
    /// publishes.
    pub poll_retries: u32,
}

impl FetchParams {
    /// Defaults for a path with the given one-way latency: RTO is four
    /// times the latency.
    pub fn for_latency(one_way: Micros) -> Self {
        FetchParams {
            rto: 4 * one_way.max(1),
            ..FetchParams::default()
        }
    }
}

impl Default for FetchParams {
    fn default() -> Self {
        FetchParams {
            window: 16,
            rto: 40_000,
            max_retries: 3,
            poll_retries: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Closing,
    Closed,
    Failed,
}

/// What an Interest asks for, as far as matching a response goes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FetchKey {
    Hash(Hash256),
    Name(Name),
}

impl FetchKey {
    pub fn of(address: &NamedAddress) -> Option<FetchKey> {
        match (&address.hash_restr, &address.name) {
            (Some(h), _) => Some(FetchKey::Hash(*h)),
            (None, Some(n)) => Some(FetchKey::Name(n.clone())),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// First copy of a requested object.
    New,
    /// Matches something already delivered.
    Duplicate,
    /// Matches nothing this session asked for.
    Unmatched,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportMetrics {
    pub interests_sent: u64,
    pub retransmissions: u64,
    pub interest_bytes: u64,
    pub objects_received: u64,
    pub object_bytes: u64,
    pub duplicates: u64,
    pub unmatched: u64,
}

impl TransportMetrics {
    pub fn add(&mut self, o: &TransportMetrics) {
        self.interests_sent += o.interests_sent;
        self.retransmissions += o.retransmissions;
        self.interest_bytes += o.interest_bytes;
        self.objects_received += o.objects_received;
        self.object_bytes += o.object_bytes;
        self.duplicates += o.duplicates;
        self.unmatched += o.unmatched;
    }

    pub fn wire_bytes(&self) -> u64 {
        self.interest_bytes + self.object_bytes
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    address: NamedAddress,
    attempts: u32,
    max_attempts: u32,
    deadline: Micros,
}

#[derive(Debug, Clone)]
pub struct FetchSession {
    params: FetchParams,
    state: SessionState,
    queue: VecDeque<(FetchKey, NamedAddress, u32)>,
    queued: BTreeSet<FetchKey>,
    in_flight: BTreeMap<FetchKey, InFlight>,
    received: BTreeSet<FetchKey>,
    failed: Vec<NamedAddress>,
    close: Option<(Name, Name)>,
    metrics: TransportMetrics,
}

impl FetchSession {
    pub fn new(params: FetchParams) -> Self {
        assert!(params.window > 0, "window must be positive");
        FetchSession {
            params,
            state: SessionState::Active,
            queue: VecDeque::new(),
            queued: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            received: BTreeSet::new(),
            failed: Vec::new(),
            close: None,
            metrics: TransportMetrics::default(),
        }
    }

    pub fn params(&self) -> &FetchParams {
        &self.params
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn metrics(&self) -> &TransportMetrics {
        &self.metrics
    }

    /// Queues a fetch. Returns `false` (and does nothing) if the same key is
    /// already queued, in flight, or delivered, or the address is empty.
    pub fn enqueue(&mut self, address: NamedAddress) -> bool {
        let attempts = self.params.max_retries + 1;
        self.enqueue_with(address, attempts)
    }

    /// Queues a manifest poll, retried up to `poll_retries` times.
    pub fn enqueue_poll(&mut self, address: NamedAddress) -> bool {
        let attempts = self.params.poll_retries + 1;
        self.enqueue_with(address, attempts)
    }

    fn enqueue_with(&mut self, address: NamedAddress, max_attempts: u32) -> bool {
        if self.state == SessionState::Failed {
            return false;
        }
        let Some(key) = FetchKey::of(&address) else {
            return false;
        };
        if self.received.contains(&key)
            || self.in_flight.contains_key(&key)
            || !self.queued.insert(key.clone())
        {
            return false;
        }
        self.queue.push_back((key, address, max_attempts));
        true
    }

    /// Interests due at `now`: timed-out retransmissions first, then new
    /// requests up to the window. Marks the session failed when a request
    /// runs out of attempts.
    pub fn poll_transmit(&mut self, now: Micros) -> Vec<Interest> {
        let mut out = Vec::new();
        if matches!(self.state, SessionState::Failed | SessionState::Closed) {
            return out;
        }
        let rto = self.params.rto;
        if self
            .in_flight
            .values()
            .any(|f| f.deadline <= now && f.attempts >= f.max_attempts)
        {
            self.fail();
            return out;
        }
        for f in self.in_flight.values_mut() {
            if f.deadline > now {
                continue;
            }
            f.attempts += 1;
            f.deadline = now + rto;
            self.metrics.retransmissions += 1;
            out.push(Interest::new(f.address.clone()));
        }
        while self.in_flight.len() < self.params.window {
            let Some((key, address, max_attempts)) = self.queue.pop_front() else {
                break;
            };
            self.queued.remove(&key);
            out.push(Interest::new(address.clone()));
            self.in_flight.insert(
                key,
                InFlight {
                    address,
                    attempts: 1,
                    max_attempts,
                    deadline: now + rto,
                },
            );
        }
        for i in &out {
            self.metrics.interests_sent += 1;
            self.metrics.interest_bytes += i.encoded_len() as u64;
        }
        out
    }

    fn fail(&mut self) {
        self.state = SessionState::Failed;
        self.failed = self
            .in_flight
            .values()
            .map(|f| f.address.clone())
            .chain(self.queue.iter().map(|(_, a, _)| a.clone()))
            .collect();
        self.in_flight.clear();
        self.queue.clear();
        self.queued.clear();
    }

    /// Matches a response. `hash` is the object's content hash.
    pub fn on_object(&mut self, obj: &ContentObject, hash: &Hash256) -> Delivery {
        self.metrics.objects_received += 1;
        self.metrics.object_bytes += obj.encoded_len() as u64;
        if self.state == SessionState::Failed {
            self.metrics.unmatched += 1;
            return Delivery::Unmatched;
        }
        let by_hash = FetchKey::Hash(*hash);
        let by_name = obj.name.clone().map(FetchKey::Name);
        let key = if self.in_flight.contains_key(&by_hash) {
            Some(by_hash)
        } else {
            by_name.filter(|k| self.in_flight.contains_key(k))
        };
        let Some(key) = key else {
            let seen = self.received.contains(&FetchKey::Hash(*hash))
                || obj
                    .name
                    .as_ref()
                    .is_some_and(|n| self.received.contains(&FetchKey::Name(n.clone())));
            if seen {
                self.metrics.duplicates += 1;
                return Delivery::Duplicate;
            }
            self.metrics.unmatched += 1;
            return Delivery::Unmatched;
        };
        self.in_flight.remove(&key);
        self.received.insert(key.clone());
        if let (Some((close, ack)), FetchKey::Name(n)) = (&self.close, &key) {
            if n == close {
                let ack = ack.clone();
                self.enqueue(NamedAddress::named(ack));
            } else if n == ack {
                self.state = SessionState::Closed;
            }
        }
        Delivery::New
    }

    /// Earliest retransmission deadline.
    pub fn next_deadline(&self) -> Option<Micros> {
        self.in_flight.values().map(|f| f.deadline).min()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Nothing queued or in flight.
    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.in_flight.is_empty()
    }

    pub fn has_received(&self, address: &NamedAddress) -> bool {
        FetchKey::of(address).is_some_and(|k| self.received.contains(&k))
    }

    /// Addresses still outstanding when the session failed.
    pub fn missing(&self) -> &[NamedAddress] {
        &self.failed
    }

    /// Starts the close handshake for `checkpoint`. The session must be
    /// active and idle.
    pub fn begin_close(&mut self, checkpoint: &Name) -> bool {
        if self.state != SessionState::Active || !self.is_idle() {
            return false;
        }
        let close = close_name(checkpoint);
        self.close = Some((close.clone(), close_ack_name(checkpoint)));
        self.state = SessionState::Closing;
        self.enqueue(NamedAddress::named(close))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseState {
    #[default]
    Open,
    CloseSeen,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReply {
    /// Answer with an ACK; `release` is set exactly once, on the first
    /// close-ack after a close.
    Ack {
        release: bool,
    },
    Ignore,
}

/// Responder side of the close handshake for one checkpoint version.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CloseResponder {
    state: CloseState,
}

impl CloseResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> CloseState {
        self.state
    }

    pub fn on_close(&mut self) -> CloseReply {
        if self.state == CloseState::Open {
            self.state = CloseState::CloseSeen;
        }
        CloseReply::Ack { release: false }
    }

    /// A close-ack before any close is ignored: releasing then would not be
    /// gated on the requester having finished.
    pub fn on_close_ack(&mut self) -> CloseReply {
        match self.state {
            CloseState::Open => CloseReply::Ignore,
            CloseState::CloseSeen => {
                self.state = CloseState::Released;
                CloseReply::Ack { release: true }
            }
            CloseState::Released => CloseReply::Ack { release: false },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::compute_object_hash;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    fn obj(i: u32) -> ContentObject {
        ContentObject::nameless(i.to_be_bytes().to_vec())
    }

    fn addr(o: &ContentObject) -> NamedAddress {
        NamedAddress::hashed(Name::parse("/p").unwrap(), compute_object_hash(o).unwrap())
    }

    fn params(window: usize) -> FetchParams {
        FetchParams {
            window,
            rto: 100,
            max_retries: 3,
            poll_retries: 3,
        }
    }

    #[test]
    fn lossless_ten_objects_window_four() {
        let objs: Vec<_> = (0..10).map(obj).collect();
        let mut s = FetchSession::new(params(4));
        for o in &objs {
            assert!(s.enqueue(addr(o)));
        }
        let mut now = 0;
        let mut delivered = 0;
        while !s.is_idle() {
            let sent = s.poll_transmit(now);
            assert!(s.in_flight() <= 4);
            for i in sent {
                let o = objs.iter().find(|o| addr(o) == i.address).unwrap();
                assert_eq!(
                    s.on_object(o, &compute_object_hash(o).unwrap()),
                    Delivery::New
                );
                delivered += 1;
            }
            now += 10;
        }
        assert_eq!(delivered, 10);
        assert_eq!(s.metrics().interests_sent, 10);
        assert_eq!(s.metrics().retransmissions, 0);
    }

    #[test]
    fn duplicate_enqueue_is_refused() {
        let o = obj(1);
        let mut s = FetchSession::new(params(4));
        assert!(s.enqueue(addr(&o)));
        assert!(!s.enqueue(addr(&o)));
        s.poll_transmit(0);
        assert!(!s.enqueue(addr(&o)));
        let h = compute_object_hash(&o).unwrap();
        assert_eq!(s.on_object(&o, &h), Delivery::New);
        assert!(!s.enqueue(addr(&o)));
        assert_eq!(s.on_object(&o, &h), Delivery::Duplicate);
        assert_eq!(
            s.on_object(&obj(2), &compute_object_hash(&obj(2)).unwrap()),
            Delivery::Unmatched
        );
    }

    #[test]
    fn unreachable_producer_fails_after_retries() {
        let objs: Vec<_> = (0..3).map(obj).collect();
        let mut s = FetchSession::new(params(2));
        for o in &objs {
            s.enqueue(addr(o));
        }
        let mut now = 0;
        let mut sent = 0;
        while s.state() == SessionState::Active {
            sent += s.poll_transmit(now).len();
            now = s.next_deadline().unwrap_or(now);
        }
        assert_eq!(s.state(), SessionState::Failed);
        // two in flight, each sent once plus three retries
        assert_eq!(sent, 8);
        assert_eq!(s.missing().len(), 3);
        assert!(s.poll_transmit(now + 1000).is_empty());
    }

    #[test]
    fn close_handshake_lossless() {
        let cp = Name::parse("/vm-name/checkpoint/ver=7").unwrap();
        let mut s = FetchSession::new(params(4));
        let mut r = CloseResponder::new();
        assert!(s.begin_close(&cp));
        assert_eq!(s.state(), SessionState::Closing);
        let mut trace = Vec::new();
        let mut now = 0;
        while s.state() == SessionState::Closing {
            for i in s.poll_transmit(now) {
                let name = i.name().unwrap().clone();
                trace.push(format!("interest {name}"));
                let reply = if name.last().unwrap().as_bytes() == b"close" {
                    r.on_close()
                } else {
                    r.on_close_ack()
                };
                assert!(matches!(reply, CloseReply::Ack { .. }));
                let ack = ack_object(name.clone());
                trace.push(format!("ack {name}"));
                s.on_object(&ack, &compute_object_hash(&ack).unwrap());
            }
            now += 1;
        }
        assert_eq!(s.state(), SessionState::Closed);
        assert_eq!(
            trace,
            vec![
                "interest /vm-name/checkpoint/ver=7/close",
                "ack /vm-name/checkpoint/ver=7/close",
                "interest /vm-name/checkpoint/ver=7/close-ack",
                "ack /vm-name/checkpoint/ver=7/close-ack",
            ]
        );
        assert_eq!(r.state(), CloseState::Released);
    }

    #[test]
    fn close_requires_idle_session() {
        let mut s = FetchSession::new(params(4));
        s.enqueue(addr(&obj(1)));
        assert!(!s.begin_close(&Name::parse("/v/checkpoint/ver=0").unwrap()));
        assert_eq!(s.state(), SessionState::Active);
    }

    #[test]
    fn responder_is_idempotent() {
        let mut r = CloseResponder::new();
        assert_eq!(r.on_close_ack(), CloseReply::Ignore);
        assert_eq!(r.on_close(), CloseReply::Ack { release: false });
        assert_eq!(r.on_close(), CloseReply::Ack { release: false });
        assert_eq!(r.on_close_ack(), CloseReply::Ack { release: true });
        assert_eq!(r.on_close_ack(), CloseReply::Ack { release: false });
        assert_eq!(r.on_close(), CloseReply::Ack { release: false });
        assert_eq!(r.state(), CloseState::Released);
    }

    #[test]
    fn ack_object_layout() {
        let n = Name::parse("/vm-name/checkpoint/ver=7/close").unwrap();
        let a = ack_object(n.clone());
        assert_eq!(a.name, Some(n));
        assert_eq!(&a.payload[..], &[0x01]);
    }

    proptest! {
        /// Random loss and duplication: the window is never exceeded and
        /// each object is delivered upward exactly once.
        #[test]
        fn window_bound_and_at_most_once(
            n in 1u32..30,
            window in 1usize..8,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let objs: Vec<_> = (0..n).map(obj).collect();
            let mut s = FetchSession::new(FetchParams { window, rto: 10, max_retries: 1000, poll_retries: 0 });
            for o in &objs {
                s.enqueue(addr(o));
            }
            let mut delivered = vec![0u32; n as usize];
            let mut now = 0;
            while !s.is_idle() {
                let sent = s.poll_transmit(now);
                prop_assert!(s.in_flight() <= window);
                for i in sent {
                    let idx = objs.iter().position(|o| addr(o) == i.address).unwrap();
                    let o = &objs[idx];
                    let h = compute_object_hash(o).unwrap();
                    // 0: lost, 1: delivered twice, else delivered once
                    let copies = match rng.gen_range(0..4) { 0 => 0, 1 => 2, _ => 1 };
                    for _ in 0..copies {
                        if s.on_object(o, &h) == Delivery::New {
                            delivered[idx] += 1;
                        }
                    }
                }
                now = s.next_deadline().unwrap_or(now + 1).max(now + 1);
            }
            prop_assert!(delivered.iter().all(|d| *d == 1));
        }
    }
}
