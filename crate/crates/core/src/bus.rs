// SPDX-License-Identifier: Apache-2.0

//! In-process topic bus.
//!
//! Publishing is exactly-once to every subscriber present at publish time, FIFO per
//! `(sender, topic)`. Topics can record a transcript of everything that crossed them;
//! the privacy audit reads those transcripts.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("envelope addressed to {envelope} published on {topic}")]
    TopicMismatch { topic: Topic, envelope: Topic },
    #[error("sender {sender} seq {seq} on {topic} does not follow {last}")]
    SeqRegression { topic: Topic, sender: String, seq: u64, last: u64 },
    #[error("recording disabled for {0}")]
    RecordingDisabled(Topic),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic(String);

impl Topic {
    pub fn new(name: impl Into<String>) -> Result<Self, BusError> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(BusError::InvalidTopic(name));
        }
        Ok(Self(name))
    }

    pub fn measurements(region: &str) -> Self {
        Self(format!("region/{region}/measurements"))
    }

    pub fn attestation(region: &str) -> Self {
        Self(format!("region/{region}/attestation"))
    }

    pub fn homomorphic(region: &str) -> Self {
        Self(format!("region/{region}/homomorphic"))
    }

    pub fn aggregates() -> Self {
        Self("utility/aggregates".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Topic {
    type Error = BusError;
    fn try_from(s: String) -> Result<Self, BusError> {
        Topic::new(s)
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> String {
        t.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    // attestation handshake
    Identify,
    CredOk,
    Challenge,
    Quote,
    AttestOk,
    // enclave data path
    Measurement,
    // unprotected reference path
    PlainMeasurement,
    // homomorphic rounds
    ConfigReq,
    Pubkey,
    Roster,
    Ct,
    Combined,
    Partial,
    Sum,
    // utility-facing outputs
    Aggregate,
    Billing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: Topic,
    pub sender: String,
    pub kind: MessageKind,
    pub slot: Option<u32>,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub payload: Vec<u8>,
    pub seq: u64,
}

fn ser_b64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(bytes))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    B64.decode(s).map_err(serde::de::Error::custom)
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Returned by a successful publish.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ack {
    pub seq: u64,
    pub delivered: usize,
}

#[derive(Default)]
struct TopicState {
    subscribers: Vec<Sender<Envelope>>,
    last_seq: HashMap<String, u64>,
    transcript: Option<Vec<Envelope>>,
}

#[derive(Default)]
struct Inner {
    topics: HashMap<Topic, TopicState>,
    record_all: bool,
}

/// Cheap to clone; all clones share one set of topics.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Mutex<Inner>>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bus that records every topic, including ones created later.
    pub fn recording() -> Self {
        let bus = Self::default();
        bus.lock().record_all = true;
        bus
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn enable_recording(&self, topic: &Topic) {
        let mut inner = self.lock();
        let state = inner.topics.entry(topic.clone()).or_default();
        state.transcript.get_or_insert_with(Vec::new);
    }

    pub fn publish(&self, topic: &Topic, env: Envelope) -> Result<Ack, BusError> {
        if &env.topic != topic {
            return Err(BusError::TopicMismatch { topic: topic.clone(), envelope: env.topic });
        }
        let mut inner = self.lock();
        let record_all = inner.record_all;
        let state = inner.topics.entry(topic.clone()).or_insert_with(|| TopicState {
            transcript: record_all.then(Vec::new),
            ..Default::default()
        });
        if let Some(&last) = state.last_seq.get(&env.sender) {
            if env.seq <= last {
                return Err(BusError::SeqRegression {
                    topic: topic.clone(),
                    sender: env.sender,
                    seq: env.seq,
                    last,
                });
            }
        }
        state.last_seq.insert(env.sender.clone(), env.seq);
        // Delivery happens under the lock, which is what makes per-sender order hold
        // across concurrent publishers.
        state.subscribers.retain(|tx| tx.send(env.clone()).is_ok());
        let delivered = state.subscribers.len();
        let seq = env.seq;
        if let Some(t) = state.transcript.as_mut() {
            t.push(env);
        }
        Ok(Ack { seq, delivered })
    }

    pub fn subscribe(&self, topic: &Topic) -> Subscription {
        let (tx, rx) = crossbeam_channel::unbounded();
        let mut inner = self.lock();
        let record_all = inner.record_all;
        inner
            .topics
            .entry(topic.clone())
            .or_insert_with(|| TopicState { transcript: record_all.then(Vec::new), ..Default::default() })
            .subscribers
            .push(tx);
        Subscription { topic: topic.clone(), rx }
    }

    pub fn transcript(&self, topic: &Topic) -> Result<Vec<Envelope>, BusError> {
        self.lock()
            .topics
            .get(topic)
            .and_then(|s| s.transcript.clone())
            .ok_or_else(|| BusError::RecordingDisabled(topic.clone()))
    }

    /// Transcripts of every recorded topic, grouped by topic name.
    pub fn transcripts(&self) -> Vec<(Topic, Vec<Envelope>)> {
        let inner = self.lock();
        let mut out: Vec<_> = inner
            .topics
            .iter()
            .filter_map(|(t, s)| s.transcript.clone().map(|tr| (t.clone(), tr)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// One subscriber's ordered stream.
pub struct Subscription {
    topic: Topic,
    rx: Receiver<Envelope>,
}

impl Subscription {
    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    pub fn try_next(&self) -> Option<Envelope> {
        self.rx.try_recv().ok()
    }

    /// Blocks until the next envelope; `None` once the bus is gone.
    pub fn recv(&self) -> Option<Envelope> {
        self.rx.recv().ok()
    }

    /// Everything delivered so far.
    pub fn drain(&self) -> Vec<Envelope> {
        self.rx.try_iter().collect()
    }
}

/// A named participant that stamps its own per-topic sequence numbers.
pub struct Endpoint {
    bus: Bus,
    name: String,
    seqs: HashMap<Topic, u64>,
}

impl Endpoint {
    pub fn new(bus: &Bus, name: impl Into<String>) -> Self {
        Self { bus: bus.clone(), name: name.into(), seqs: HashMap::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn send(
        &mut self,
        topic: &Topic,
        kind: MessageKind,
        slot: Option<u32>,
        payload: Vec<u8>,
    ) -> Result<Ack, BusError> {
        let seq = self.seqs.entry(topic.clone()).or_insert(0);
        *seq += 1;
        let env = Envelope { topic: topic.clone(), sender: self.name.clone(), kind, slot, payload, seq: *seq };
        self.bus.publish(topic, env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn topic() -> Topic {
        Topic::measurements("north")
    }

    fn env(sender: &str, seq: u64) -> Envelope {
        Envelope {
            topic: topic(),
            sender: sender.into(),
            kind: MessageKind::Measurement,
            slot: Some(1),
            payload: vec![seq as u8],
            seq,
        }
    }

    #[test]
    fn topic_names() {
        assert!(Topic::new("").is_err());
        assert!(Topic::new("a b").is_err());
        assert_eq!(Topic::aggregates().as_str(), "utility/aggregates");
    }

    #[test]
    fn publish_then_drain_once() {
        let bus = Bus::new();
        let sub = bus.subscribe(&topic());
        let ack = bus.publish(&topic(), env("m1", 1)).unwrap();
        assert_eq!(ack.delivered, 1);
        assert_eq!(sub.drain(), vec![env("m1", 1)]);
        assert!(sub.drain().is_empty());
    }

    #[test]
    fn fifo_per_sender() {
        let bus = Bus::new();
        let sub = bus.subscribe(&topic());
        bus.publish(&topic(), env("m1", 1)).unwrap();
        bus.publish(&topic(), env("m1", 2)).unwrap();
        let seqs: Vec<_> = sub.drain().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [1, 2]);
    }

    #[test]
    fn rejects_mismatched_topic_and_stale_seq() {
        let bus = Bus::new();
        let other = Topic::aggregates();
        assert!(matches!(bus.publish(&other, env("m1", 1)), Err(BusError::TopicMismatch { .. })));
        bus.publish(&topic(), env("m1", 5)).unwrap();
        assert!(matches!(bus.publish(&topic(), env("m1", 5)), Err(BusError::SeqRegression { .. })));
        assert!(bus.publish(&topic(), env("m2", 1)).is_ok());
    }

    #[test]
    fn only_sees_messages_after_subscription() {
        let bus = Bus::new();
        bus.publish(&topic(), env("m1", 1)).unwrap();
        let sub = bus.subscribe(&topic());
        bus.publish(&topic(), env("m1", 2)).unwrap();
        assert_eq!(sub.drain().len(), 1);
    }

    #[test]
    fn fan_out_to_two_subscribers() {
        let bus = Bus::new();
        let a = bus.subscribe(&topic());
        let b = bus.subscribe(&topic());
        for s in ["m1", "m2", "m3"] {
            bus.publish(&topic(), env(s, 1)).unwrap();
        }
        assert_eq!(a.drain(), b.drain());
    }

    #[test]
    fn many_concurrent_senders_keep_their_order() {
        let bus = Bus::new();
        let subs = [bus.subscribe(&topic()), bus.subscribe(&topic())];
        std::thread::scope(|s| {
            for k in 0..100 {
                let bus = bus.clone();
                s.spawn(move || {
                    let mut ep = Endpoint::new(&bus, format!("m{k}"));
                    for _ in 0..100 {
                        ep.send(&topic(), MessageKind::Measurement, None, vec![]).unwrap();
                    }
                });
            }
        });
        for sub in &subs {
            let got = sub.drain();
            assert_eq!(got.len(), 10_000);
            let mut last: HashMap<&str, u64> = HashMap::new();
            for e in &got {
                let prev = last.insert(e.sender.as_str(), e.seq).unwrap_or(0);
                assert_eq!(e.seq, prev + 1, "sender {} out of order", e.sender);
            }
            assert_eq!(last.len(), 100);
        }
    }

    #[test]
    fn transcripts() {
        let bus = Bus::new();
        assert_eq!(bus.transcript(&topic()), Err(BusError::RecordingDisabled(topic())));
        bus.enable_recording(&topic());
        for k in 1..=3 {
            bus.publish(&topic(), env("m1", k)).unwrap();
        }
        assert_eq!(bus.transcript(&topic()).unwrap().len(), 3);

        let rec = Bus::recording();
        let mut ep = Endpoint::new(&rec, "agg");
        ep.send(&Topic::aggregates(), MessageKind::Aggregate, Some(1), b"{}".to_vec()).unwrap();
        ep.send(&topic(), MessageKind::Measurement, Some(1), vec![1]).unwrap();
        ep.send(&topic(), MessageKind::Measurement, Some(2), vec![2]).unwrap();
        assert_eq!(rec.transcript(&Topic::aggregates()).unwrap().len(), 1);
        assert_eq!(rec.transcript(&topic()).unwrap().len(), 2);
        assert_eq!(rec.transcripts().len(), 2);
    }

    #[test]
    fn envelope_json_field_names() {
        let e = Envelope {
            topic: topic(),
            sender: "m1".into(),
            kind: MessageKind::CredOk,
            slot: None,
            payload: vec![0xde, 0xad],
            seq: 3,
        };
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["kind", "payload", "sender", "seq", "slot", "topic"]);
        assert_eq!(v["payload"], "3q0=");
        assert_eq!(v["kind"], "CRED_OK");
        assert_eq!(Envelope::from_json(&e.to_json()).unwrap(), e);
    }
}
