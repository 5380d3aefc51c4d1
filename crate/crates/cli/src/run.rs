// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use meterpriv::attestation::{AttestationService, HandshakeMessage, HandshakeState, MeterHandshake, TrustAnchors};
use meterpriv::bus::{Bus, Endpoint, Envelope, MessageKind, Subscription, Topic};
use meterpriv::channel::{EncryptedMeasurement, MeterChannel};
use meterpriv::enclave::{Enclave, EnclaveConfig};
use meterpriv::fleet::{FaultPlan, TRACE_ALGORITHM};
use meterpriv::homomorphic::{CombinedMsg, CtMsg, GroupParams, HomAggregator, HomError, PartialMsg, Producer, PubkeyMsg, RosterMsg};
use meterpriv::model::{AggregateRecord, BillingRecord, MeasurementValue, MeterId, TimeSlot};
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::keys::{derive_rng, resolve_group, KeyMaterial};
use crate::verify::verify;
use crate::{failed, Backend, BackendReport, RunConfig, RunError, RunMetadata, RunReport, SlotRecord, Timings};

/// A finished run plus the bus each backend ran on, for transcript inspection.
pub struct Simulation {
    pub report: RunReport,
    pub buses: Vec<(Backend, Bus)>,
}

pub fn simulate(config: &RunConfig) -> Result<RunReport, RunError> {
    run(config).map(|s| s.report)
}

/// Position of a run-wide slot index within its billing period.
#[derive(Clone, Copy)]
struct SlotPos {
    index: u32,
    period: u32,
    j: u32,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    keys: KeyMaterial,
    traces: BTreeMap<MeterId, Vec<MeasurementValue>>,
    faults: FaultPlan,
}

impl Ctx<'_> {
    fn positions(&self) -> impl Iterator<Item = SlotPos> {
        let t = self.cfg.fleet.t;
        (1..=self.cfg.slots).map(move |index| SlotPos { index, period: (index - 1) / t + 1, j: (index - 1) % t + 1 })
    }

    fn slot(&self, j: u32) -> TimeSlot {
        TimeSlot::new(j, self.cfg.fleet.slot_secs).expect("j >= 1")
    }

    fn reading(&self, meter: &MeterId, pos: SlotPos) -> Option<MeasurementValue> {
        if self.faults.is_faulted(meter, pos.j) {
            return None;
        }
        Some(self.traces[meter][(pos.index - 1) as usize])
    }

    fn bus(&self) -> Bus {
        if self.cfg.record_transcripts {
            Bus::recording()
        } else {
            Bus::new()
        }
    }
}

fn decode<T: DeserializeOwned>(env: &Envelope, step: &str) -> Result<T, RunError> {
    serde_json::from_slice(&env.payload).map_err(failed(format!("{step}: decoding {:?} from {}", env.kind, env.sender)))
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("protocol messages serialize")
}

/// The utility's view: everything published on `utility/aggregates`.
struct UtilitySink {
    sub: Subscription,
    records: Vec<SlotRecord>,
    billing: Vec<BillingRecord>,
}

impl UtilitySink {
    fn new(bus: &Bus) -> Self {
        Self { sub: bus.subscribe(&Topic::aggregates()), records: Vec::new(), billing: Vec::new() }
    }

    fn collect(&mut self, pos: SlotPos) -> Result<(), RunError> {
        for env in self.sub.drain() {
            match env.kind {
                MessageKind::Aggregate | MessageKind::Sum => {
                    let record: AggregateRecord = decode(&env, "utility sink")?;
                    self.records.push(SlotRecord { index: pos.index, period: pos.period, record });
                }
                MessageKind::Billing => self.billing.push(decode(&env, "utility sink")?),
                other => {
                    return Err(RunError::Protocol {
                        step: "utility sink".into(),
                        reason: format!("unexpected {other:?} on {}", Topic::aggregates().as_str()),
                    })
                }
            }
        }
        Ok(())
    }
}

pub fn run(config: &RunConfig) -> Result<Simulation, RunError> {
    config.validate()?;
    let fleet = &config.fleet;
    let ctx = Ctx {
        cfg: config,
        keys: KeyMaterial::derive(fleet, config.seed),
        traces: fleet.traces(config.slots),
        faults: fleet.fault_plan()?,
    };
    let backends = config.backend.expand();
    let group = if backends.contains(&Backend::Homomorphic) {
        Some(match &config.group {
            Some(g) => g.clone(),
            None => resolve_group(fleet, config.seed)?,
        })
    } else {
        None
    };

    let mut metadata = RunMetadata {
        trace_algorithm: TRACE_ALGORITHM.to_string(),
        seed: config.seed,
        region: fleet.region.clone(),
        n: fleet.n,
        t: fleet.t,
        slot_secs: fleet.slot_secs,
        slots: config.slots,
        v_max: fleet.v_max,
        policy: config.policy,
        enclave_measurement: None,
        footprint_bytes_per_meter: None,
        group_bits: group.as_ref().map(GroupParams::bits),
    };
    let mut reports = Vec::new();
    let mut buses = Vec::new();
    for backend in backends {
        let bus = ctx.bus();
        let report = match backend {
            Backend::Plain => run_plain(&ctx, &bus)?,
            Backend::Enclave => {
                let (report, enclave) = run_enclave(&ctx, &bus)?;
                metadata.enclave_measurement = Some(hex::encode(enclave.measurement().0));
                metadata.footprint_bytes_per_meter = Some(enclave.footprint_per_meter());
                report
            }
            Backend::Homomorphic => run_homomorphic(&ctx, &bus, group.as_ref().expect("group resolved"))?,
            Backend::All => unreachable!("expanded above"),
        };
        reports.push(report);
        buses.push((backend, bus));
    }
    let mismatches = verify(config, &ctx.traces, &ctx.faults, &reports);
    Ok(Simulation { report: RunReport { metadata, backends: reports, mismatches }, buses })
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn meter_endpoints(ctx: &Ctx, bus: &Bus) -> BTreeMap<MeterId, Endpoint> {
    ctx.keys.meters.iter().map(|m| (m.meter.clone(), Endpoint::new(bus, m.meter.to_string()))).collect()
}

/// Reference path with no protection: meters publish plaintext readings and the
/// aggregator sums whatever arrives.
fn run_plain(ctx: &Ctx, bus: &Bus) -> Result<BackendReport, RunError> {
    let started = Instant::now();
    let region = &ctx.cfg.fleet.region;
    let topic = Topic::measurements(region);
    let inbox = bus.subscribe(&topic);
    let mut sink = UtilitySink::new(bus);
    let mut meters = meter_endpoints(ctx, bus);
    let mut aggregator = Endpoint::new(bus, "aggregator");
    let mut billing: BTreeMap<MeterId, u64> = meters.keys().map(|m| (m.clone(), 0)).collect();
    let by_name: BTreeMap<String, MeterId> = meters.keys().map(|m| (m.to_string(), m.clone())).collect();
    let mut timings = Timings { setup_ms: ms_since(started), ..Timings::default() };

    for pos in ctx.positions() {
        let round = Instant::now();
        for (meter, ep) in &mut meters {
            if let Some(v) = ctx.reading(meter, pos) {
                ep.send(&topic, MessageKind::PlainMeasurement, Some(pos.j), v.wh().to_be_bytes().to_vec())?;
            }
        }
        let mut sum = 0u64;
        let mut contributing = 0u32;
        for env in inbox.drain() {
            let bytes: [u8; 8] = env.payload.as_slice().try_into().map_err(failed("plain aggregator: reading size"))?;
            let meter = by_name
                .get(&env.sender)
                .ok_or_else(|| RunError::Protocol { step: "plain aggregator".into(), reason: format!("unknown sender {}", env.sender) })?;
            let wh = u64::from_be_bytes(bytes);
            sum += wh;
            contributing += 1;
            *billing.get_mut(meter).expect("known meter") += wh;
        }
        let record = AggregateRecord { slot: ctx.slot(pos.j), sum: Some(sum), contributing, substituted: 0, flagged: false };
        aggregator.send(&Topic::aggregates(), MessageKind::Aggregate, Some(pos.j), encode(&record))?;
        timings.round_ms.push(ms_since(round));
        if pos.j == ctx.cfg.fleet.t {
            for (meter, total) in &mut billing {
                let rec = BillingRecord { meter: meter.clone(), period: pos.period, total: std::mem::take(total) };
                aggregator.send(&Topic::aggregates(), MessageKind::Billing, None, encode(&rec))?;
            }
        }
        sink.collect(pos)?;
    }
    timings.total_ms = ms_since(started);
    Ok(BackendReport {
        backend: Backend::Plain,
        records: sink.records,
        billing: sink.billing,
        flagged_by_error: Vec::new(),
        timings,
    })
}

/// Runs every meter's attestation handshake over the attestation topic: the utility
/// vouches for credentials, the enclave answers challenges, each meter verifies the
/// quote and confirms.
fn attest_all(ctx: &Ctx, bus: &Bus, enclave: &mut Enclave) -> Result<BTreeMap<MeterId, MeterChannel>, RunError> {
    let topic = Topic::attestation(&ctx.cfg.fleet.region);
    let utility_inbox = bus.subscribe(&topic);
    let enclave_inbox = bus.subscribe(&topic);
    let meter_inbox = bus.subscribe(&topic);
    let mut utility = Endpoint::new(bus, "utility");
    let mut host = Endpoint::new(bus, "enclave");
    let mut endpoints = meter_endpoints(ctx, bus);
    let anchors = TrustAnchors {
        provisioning: ctx.keys.utility.provisioning_key(),
        expected: enclave.measurement(),
        verifier: Arc::new(AttestationService::new(ctx.keys.authority.verifying_key())),
    };

    let mut sessions: BTreeMap<MeterId, (MeterHandshake, ChaCha20Rng)> = BTreeMap::new();
    for m in &ctx.keys.meters {
        let (hs, identify) = MeterHandshake::begin(m.identity.clone(), m.credential.clone(), anchors.clone());
        let rng = derive_rng("meterpriv/meter-handshake/v1", ctx.cfg.seed, &m.meter.to_bytes());
        endpoints.get_mut(&m.meter).expect("endpoint").send(&topic, identify.kind(), None, identify.to_payload())?;
        sessions.insert(m.meter.clone(), (hs, rng));
    }

    let parse = |env: &Envelope, who: &str| {
        HandshakeMessage::from_payload(env.kind, &env.payload).map_err(failed(format!("{who}: {:?} from {}", env.kind, env.sender)))
    };
    let mut channels = BTreeMap::new();
    loop {
        let mut progressed = false;
        for env in utility_inbox.drain() {
            if env.kind != MessageKind::Identify {
                continue;
            }
            progressed = true;
            let HandshakeMessage::Identify(id) = parse(&env, "utility")? else { unreachable!() };
            let meter = id.credential.meter.clone();
            let ok = ctx.keys.utility.approve(&id.credential).map_err(failed(format!("utility: IDENTIFY -> CRED_OK for {meter}")))?;
            let msg = HandshakeMessage::CredOk(ok);
            utility.send(&topic, msg.kind(), None, msg.to_payload())?;
        }
        for env in enclave_inbox.drain() {
            match parse(&env, "enclave")? {
                HandshakeMessage::Challenge(ch) => {
                    progressed = true;
                    let msg = HandshakeMessage::Quote(enclave.answer_challenge(&ch));
                    host.send(&topic, msg.kind(), None, msg.to_payload())?;
                }
                HandshakeMessage::AttestOk(ok) => {
                    progressed = true;
                    enclave
                        .accept_attestation(&ok, 0)
                        .map_err(failed(format!("enclave: ATTEST_OK from {}", ok.meter())))?;
                }
                _ => {}
            }
        }
        for env in meter_inbox.drain() {
            if !matches!(env.kind, MessageKind::CredOk | MessageKind::Quote) {
                continue;
            }
            progressed = true;
            let msg = parse(&env, "meter")?;
            let meter = msg.meter().clone();
            let (hs, rng) = sessions.get_mut(&meter).ok_or_else(|| RunError::Protocol {
                step: "meter".into(),
                reason: format!("{:?} for unknown meter {meter}", env.kind),
            })?;
            let before = hs.state();
            let transition = |to: &str| format!("meter {meter}: {before:?} --{:?}--> {to}", env.kind);
            let reply = match hs.receive(&msg).map_err(failed(transition("?")))? {
                HandshakeState::CredentialVerified => {
                    hs.challenge(rng).map_err(failed(transition("Challenged")))?
                }
                HandshakeState::QuoteVerified => {
                    let (reply, keys) = hs.confirm(rng, 0).map_err(failed(transition("KeysEstablished")))?;
                    channels.insert(meter.clone(), MeterChannel::new(meter.clone(), keys));
                    reply
                }
                s => return Err(RunError::Protocol { step: transition(&format!("{s:?}")), reason: "unexpected state".into() }),
            };
            endpoints.get_mut(&meter).expect("endpoint").send(&topic, reply.kind(), None, reply.to_payload())?;
        }
        if !progressed {
            break;
        }
    }
    if let Some((m, (hs, _))) = sessions.iter().find(|(_, (hs, _))| hs.state() != HandshakeState::KeysEstablished) {
        return Err(RunError::Protocol {
            step: format!("meter {m}: handshake stalled in {:?}", hs.state()),
            reason: "no further messages".into(),
        });
    }
    if enclave.roster_len() != sessions.len() {
        return Err(RunError::Protocol {
            step: "enclave: roster".into(),
            reason: format!("{} of {} meters attested", enclave.roster_len(), sessions.len()),
        });
    }
    Ok(channels)
}

fn run_enclave(ctx: &Ctx, bus: &Bus) -> Result<(BackendReport, Enclave), RunError> {
    let started = Instant::now();
    let fleet = &ctx.cfg.fleet;
    let config = EnclaveConfig {
        region: fleet.region.clone(),
        t: fleet.t,
        slot_secs: fleet.slot_secs,
        v_max: fleet.v_max,
        policy: ctx.cfg.policy,
    };
    let seed = derive_rng("meterpriv/enclave/v1", ctx.cfg.seed, &[]).get_seed();
    let mut enclave = Enclave::new(config, ctx.keys.authority.clone(), ctx.keys.utility.provisioning_key(), seed)
        .map_err(failed("enclave: launch"))?;
    let mut channels = attest_all(ctx, bus, &mut enclave)?;

    let topic = Topic::measurements(&fleet.region);
    let inbox = bus.subscribe(&topic);
    let mut sink = UtilitySink::new(bus);
    let mut meters = meter_endpoints(ctx, bus);
    let mut host = Endpoint::new(bus, "enclave");
    let mut timings = Timings { setup_ms: ms_since(started), ..Timings::default() };

    for pos in ctx.positions() {
        let round = Instant::now();
        for (meter, ch) in &mut channels {
            if let Some(v) = ctx.reading(meter, pos) {
                let em = ch.seal(v, pos.j).map_err(failed(format!("meter {meter}: seal slot {}", pos.index)))?;
                meters.get_mut(meter).expect("endpoint").send(&topic, MessageKind::Measurement, Some(pos.j), em.to_wire())?;
            }
        }
        for env in inbox.drain() {
            let em = EncryptedMeasurement::from_wire(&env.payload).map_err(failed(format!("enclave: frame from {}", env.sender)))?;
            enclave.ingest(&em).map_err(failed(format!("enclave: ingest slot {} from {}", pos.index, em.meter)))?;
        }
        let record = enclave.close_slot(pos.j).map_err(failed(format!("enclave: close slot {}", pos.index)))?;
        host.send(&Topic::aggregates(), MessageKind::Aggregate, Some(pos.j), encode(&record))?;
        timings.round_ms.push(ms_since(round));
        if pos.j == fleet.t {
            for rec in enclave.close_period().map_err(failed(format!("enclave: close period {}", pos.period)))? {
                host.send(&Topic::aggregates(), MessageKind::Billing, None, encode(&rec))?;
            }
        }
        sink.collect(pos)?;
    }
    timings.total_ms = ms_since(started);
    let report = BackendReport {
        backend: Backend::Enclave,
        records: sink.records,
        billing: sink.billing,
        flagged_by_error: Vec::new(),
        timings,
    };
    Ok((report, enclave))
}

fn run_homomorphic(ctx: &Ctx, bus: &Bus, params: &GroupParams) -> Result<BackendReport, RunError> {
    let started = Instant::now();
    let fleet = &ctx.cfg.fleet;
    let topic = Topic::homomorphic(&fleet.region);
    let provisioning = ctx.keys.utility.provisioning_key();
    let roster: Vec<MeterId> = ctx.keys.meters.iter().map(|m| m.meter.clone()).collect();
    let mut producers: BTreeMap<MeterId, (Producer, ChaCha20Rng)> = ctx
        .keys
        .meters
        .iter()
        .map(|m| {
            let keys = ctx.keys.producer_keys(m, params);
            let producer = Producer::new(keys, m.identity.clone(), params.clone(), provisioning);
            let rng = derive_rng("meterpriv/producer-rounds/v1", ctx.cfg.seed, &m.meter.to_bytes());
            (m.meter.clone(), (producer, rng))
        })
        .collect();
    let mut aggregator = HomAggregator::new(params.clone(), provisioning, roster, fleet.v_max);
    let agg_inbox = bus.subscribe(&topic);
    let producer_inbox = bus.subscribe(&topic);
    let mut agg_ep = Endpoint::new(bus, "aggregator");
    let mut endpoints = meter_endpoints(ctx, bus);
    let mut sink = UtilitySink::new(bus);

    let hom = |step: String| move |e: HomError| RunError::Protocol { step, reason: e.to_string() };

    // configuration phase
    agg_ep.send(&topic, MessageKind::ConfigReq, None, encode(&aggregator.config_request(&fleet.region)))?;
    for env in producer_inbox.drain() {
        if env.kind == MessageKind::ConfigReq {
            for (meter, (p, _)) in &producers {
                endpoints.get_mut(meter).expect("endpoint").send(&topic, MessageKind::Pubkey, None, encode(&p.pubkey_msg()))?;
            }
        }
    }
    for env in agg_inbox.drain() {
        if env.kind == MessageKind::Pubkey {
            let msg: PubkeyMsg = decode(&env, "aggregator: PUBKEY")?;
            aggregator.accept_pubkey(&msg).map_err(hom(format!("aggregator: PUBKEY from {}", env.sender)))?;
        }
    }
    let roster_msg = aggregator.finish_config().map_err(hom("aggregator: config -> ROSTER".into()))?;
    agg_ep.send(&topic, MessageKind::Roster, None, encode(&roster_msg))?;
    for env in producer_inbox.drain() {
        if env.kind == MessageKind::Roster {
            let msg: RosterMsg = decode(&env, "producer: ROSTER")?;
            for (meter, (p, _)) in &mut producers {
                p.on_roster(&msg).map_err(hom(format!("producer {meter}: ROSTER")))?;
            }
        }
    }
    agg_inbox.drain();
    let mut timings = Timings { setup_ms: ms_since(started), ..Timings::default() };
    let mut flagged_by_error = Vec::new();

    for pos in ctx.positions() {
        let round = Instant::now();
        let rid = pos.index;
        aggregator.open_round(rid).map_err(hom(format!("aggregator: open round {rid}")))?;
        for (meter, (p, rng)) in &mut producers {
            if let Some(v) = ctx.reading(meter, pos) {
                let ct = p.encrypt(rid, v, rng).map_err(hom(format!("producer {meter}: CT round {rid}")))?;
                endpoints.get_mut(meter).expect("endpoint").send(&topic, MessageKind::Ct, Some(pos.j), encode(&ct))?;
            }
        }
        for env in agg_inbox.drain() {
            if env.kind == MessageKind::Ct {
                let ct: CtMsg = decode(&env, "aggregator: CT")?;
                aggregator.accept_ct(&ct).map_err(hom(format!("aggregator: CT from {} round {rid}", env.sender)))?;
            }
        }
        producer_inbox.drain();
        let record = match aggregator.combine_round() {
            Ok(combined) => {
                agg_ep.send(&topic, MessageKind::Combined, Some(pos.j), encode(&combined))?;
                for env in producer_inbox.drain() {
                    if env.kind != MessageKind::Combined {
                        continue;
                    }
                    let msg: CombinedMsg = decode(&env, "producer: COMBINED")?;
                    for (meter, (p, _)) in &mut producers {
                        let part = p.partial(&msg).map_err(hom(format!("producer {meter}: PARTIAL round {rid}")))?;
                        endpoints.get_mut(meter).expect("endpoint").send(&topic, MessageKind::Partial, Some(pos.j), encode(&part))?;
                    }
                }
                for env in agg_inbox.drain() {
                    if env.kind == MessageKind::Partial {
                        let part: PartialMsg = decode(&env, "aggregator: PARTIAL")?;
                        aggregator.accept_partial(&part).map_err(hom(format!("aggregator: PARTIAL from {}", env.sender)))?;
                    }
                }
                producer_inbox.drain();
                let sum = aggregator.finish_round().map_err(hom(format!("aggregator: recover round {rid}")))?;
                AggregateRecord {
                    slot: ctx.slot(pos.j),
                    sum: Some(sum),
                    contributing: producers.len() as u32,
                    substituted: 0,
                    flagged: false,
                }
            }
            Err(HomError::MissingCiphertext(_)) => {
                let received = ctx.keys.meters.iter().filter(|m| ctx.reading(&m.meter, pos).is_some()).count();
                flagged_by_error.push(pos.index);
                AggregateRecord { slot: ctx.slot(pos.j), sum: None, contributing: received as u32, substituted: 0, flagged: true }
            }
            Err(e) => return Err(hom(format!("aggregator: combine round {rid}"))(e)),
        };
        agg_ep.send(&Topic::aggregates(), MessageKind::Sum, Some(pos.j), encode(&record))?;
        timings.round_ms.push(ms_since(round));
        sink.collect(pos)?;
    }
    timings.total_ms = ms_since(started);
    Ok(BackendReport { backend: Backend::Homomorphic, records: sink.records, billing: sink.billing, flagged_by_error, timings })
}
