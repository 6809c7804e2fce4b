//! Simulated vehicle-to-vehicle messaging: typed payloads, a lossy channel
//! with configurable drop/delay/duplication, per-receiver mailboxes with a
//! newest-wins freshness discipline, and the follow-request handshake that
//! couples platoon vehicles.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::types::{derive_rng, VehicleId, VehicleParams};

// ---------------------------------------------------------------------------
// Envelopes and payloads
// ---------------------------------------------------------------------------

/// Addressing of an envelope. Broadcasts reach every vehicle behind the
/// sender within communication range; consensus gossip reaches every vehicle
/// in range regardless of direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipient {
    Backward,
    AllInRange,
    To(VehicleId),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Periodic announcement that the sender runs the safety protocol.
    ProtocolBeacon,
    /// Coupling request to the direct predecessor.
    FollowRequest,
    /// Coupling confirmation, carrying the leader's parameters and its
    /// enforced braking limit so the new follower starts from a sound
    /// assumption. The label is strictly earlier than any protocol message
    /// of the confirming step: the snapshot predates this step's possible
    /// limit change, and a stale echo of it must not count as fresh.
    FollowConfirm {
        params: VehicleParams,
        braking_limit: f64,
        label: f64,
    },
    /// Periodic rebroadcast of the sender's physical parameters.
    ParamsBroadcast(VehicleParams),
    /// Current braking limit or unconfirmed candidate, timestamped.
    BrakingLimit { a: f64, label: f64 },
    /// Echo of a stored leader braking limit back to that leader.
    Confirmation { a: f64, label: f64 },
    /// Predicted rear position at an unavoidable collision.
    CollisionAlert { s_coll: f64 },
    /// Cancels the sender's outstanding collision alert.
    AlertWithdraw,
    /// Consensus-entity internal gossip (out of the safety contract).
    ConsensusGossip { a_dec: f64 },
}

/// Freshness lane of a payload: within one lane, a receiver only keeps the
/// newest envelope per sender. Alerts and their withdrawals share a lane so a
/// withdrawal supersedes the alert it cancels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lane {
    Beacon,
    FollowRequest,
    FollowConfirm,
    Params,
    BrakingLimit,
    Confirmation,
    Alert,
    Gossip,
}

impl Payload {
    pub fn lane(&self) -> Lane {
        match self {
            Payload::ProtocolBeacon => Lane::Beacon,
            Payload::FollowRequest => Lane::FollowRequest,
            Payload::FollowConfirm { .. } => Lane::FollowConfirm,
            Payload::ParamsBroadcast(_) => Lane::Params,
            Payload::BrakingLimit { .. } => Lane::BrakingLimit,
            Payload::Confirmation { .. } => Lane::Confirmation,
            Payload::CollisionAlert { .. } | Payload::AlertWithdraw => Lane::Alert,
            Payload::ConsensusGossip { .. } => Lane::Gossip,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::ProtocolBeacon => "beacon",
            Payload::FollowRequest => "follow_request",
            Payload::FollowConfirm { .. } => "follow_confirm",
            Payload::ParamsBroadcast(_) => "params",
            Payload::BrakingLimit { .. } => "braking_limit",
            Payload::Confirmation { .. } => "confirmation",
            Payload::CollisionAlert { .. } => "collision_alert",
            Payload::AlertWithdraw => "alert_withdraw",
            Payload::ConsensusGossip { .. } => "gossip",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub sender: VehicleId,
    /// The sender's planning-step time [s].
    pub send_time: f64,
    pub recipient: Recipient,
    pub payload: Payload,
}

// ---------------------------------------------------------------------------
// Lossy channel
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub drop_prob: f64,
    pub delay_min: u64,
    pub delay_max: u64,
    pub duplicate_prob: f64,
}

impl ChannelConfig {
    pub fn perfect() -> Self {
        Self {
            drop_prob: 0.0,
            delay_min: 0,
            delay_max: 0,
            duplicate_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob out of range: {}", self.drop_prob));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(format!("duplicate_prob out of range: {}", self.duplicate_prob));
        }
        if self.delay_min > self.delay_max {
            return Err(format!(
                "delay interval out of order: [{}, {}]",
                self.delay_min, self.delay_max
            ));
        }
        Ok(())
    }
}

/// One physical transmission attempt, for the channel trace export.
#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub seq: u64,
    pub sender: VehicleId,
    pub kind: &'static str,
    pub send_step: u64,
    /// `None` means the copy was dropped.
    pub deliver_step: Option<u64>,
}

struct PendingEnvelope {
    deliver_step: u64,
    seq: u64,
    env: Envelope,
}

/// Simulated broadcast medium. Fault decisions are drawn from a dedicated
/// seeded stream in send order, so runs are reproducible envelope-for-envelope.
pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    pending: Vec<PendingEnvelope>,
    seq: u64,
    trace: Vec<TraceRecord>,
}

impl Channel {
    pub fn new(cfg: ChannelConfig, seed: u64) -> Self {
        cfg.validate().expect("valid channel config");
        Self {
            cfg,
            rng: derive_rng(seed, 0xc4a2),
            pending: Vec::new(),
            seq: 0,
            trace: Vec::new(),
        }
    }

    fn enqueue_copy(&mut self, env: Envelope, now_step: u64) {
        let seq = self.seq;
        self.seq += 1;
        if self.rng.gen::<f64>() < self.cfg.drop_prob {
            self.trace.push(TraceRecord {
                seq,
                sender: env.sender,
                kind: env.payload.kind(),
                send_step: now_step,
                deliver_step: None,
            });
            return;
        }
        let delay = if self.cfg.delay_max > self.cfg.delay_min {
            self.rng.gen_range(self.cfg.delay_min..=self.cfg.delay_max)
        } else {
            self.cfg.delay_min
        };
        let deliver_step = now_step + delay;
        self.trace.push(TraceRecord {
            seq,
            sender: env.sender,
            kind: env.payload.kind(),
            send_step: now_step,
            deliver_step: Some(deliver_step),
        });
        self.pending.push(PendingEnvelope {
            deliver_step,
            seq,
            env,
        });
    }

    /// Submits an envelope; fault injection may drop it, delay it, or enqueue
    /// an extra copy. Content is never modified.
    pub fn send(&mut self, env: Envelope, now_step: u64) {
        let duplicate = self.rng.gen::<f64>() < self.cfg.duplicate_prob;
        self.enqueue_copy(env.clone(), now_step);
        if duplicate {
            self.enqueue_copy(env, now_step);
        }
    }

    /// Takes out everything due at `now_step`, ordered by (delivery step,
    /// send sequence).
    pub fn deliver(&mut self, now_step: u64) -> Vec<Envelope> {
        let mut due: Vec<PendingEnvelope> = Vec::new();
        let mut rest: Vec<PendingEnvelope> = Vec::new();
        for p in self.pending.drain(..) {
            if p.deliver_step <= now_step {
                due.push(p);
            } else {
                rest.push(p);
            }
        }
        self.pending = rest;
        due.sort_by_key(|p| (p.deliver_step, p.seq));
        due.into_iter().map(|p| p.env).collect()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

// ---------------------------------------------------------------------------
// Mailboxes
// ---------------------------------------------------------------------------

/// Per-receiver cache of the newest envelope per (sender, lane). Older or
/// equally-timed arrivals are discarded, which is the freshness discipline
/// the braking-limit protocol relies on; entries persist across steps until
/// superseded.
#[derive(Clone, Debug, Default)]
pub struct MailboxView {
    latest: BTreeMap<(VehicleId, Lane), Envelope>,
}

impl MailboxView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&mut self, env: Envelope) {
        let key = (env.sender, env.payload.lane());
        match self.latest.get(&key) {
            Some(existing) if existing.send_time >= env.send_time => {}
            _ => {
                self.latest.insert(key, env);
            }
        }
    }

    pub fn get(&self, sender: VehicleId, lane: Lane) -> Option<&Envelope> {
        self.latest.get(&(sender, lane))
    }

    /// Drops every cached envelope from a departed sender.
    pub fn remove_sender(&mut self, sender: VehicleId) {
        self.latest.retain(|(s, _), _| *s != sender);
    }

    pub fn braking_limit_from(&self, sender: VehicleId) -> Option<(f64, f64)> {
        match self.get(sender, Lane::BrakingLimit).map(|e| &e.payload) {
            Some(Payload::BrakingLimit { a, label }) => Some((*a, *label)),
            _ => None,
        }
    }

    pub fn confirmation_from(&self, sender: VehicleId) -> Option<(f64, f64)> {
        match self.get(sender, Lane::Confirmation).map(|e| &e.payload) {
            Some(Payload::Confirmation { a, label }) => Some((*a, *label)),
            _ => None,
        }
    }

    pub fn params_from(&self, sender: VehicleId) -> Option<VehicleParams> {
        match self.get(sender, Lane::Params).map(|e| &e.payload) {
            Some(Payload::ParamsBroadcast(p)) => Some(*p),
            Some(Payload::FollowConfirm { params, .. }) => Some(*params),
            _ => None,
        }
    }

    pub fn beacon_from(&self, sender: VehicleId) -> Option<f64> {
        self.get(sender, Lane::Beacon).map(|e| e.send_time)
    }

    pub fn gossip_from(&self, sender: VehicleId) -> Option<f64> {
        match self.get(sender, Lane::Gossip).map(|e| &e.payload) {
            Some(Payload::ConsensusGossip { a_dec }) => Some(*a_dec),
            _ => None,
        }
    }

    pub fn senders(&self) -> BTreeSet<VehicleId> {
        self.latest.keys().map(|(s, _)| *s).collect()
    }
}

/// Outstanding collision position alerted by `j`, or `+∞` when none was
/// received or the newest alert-lane message is a withdrawal.
pub fn collision_pos(mb: &MailboxView, j: VehicleId) -> f64 {
    match mb.get(j, Lane::Alert).map(|e| &e.payload) {
        Some(Payload::CollisionAlert { s_coll }) => *s_coll,
        _ => f64::INFINITY,
    }
}

// ---------------------------------------------------------------------------
// Coupling
// ---------------------------------------------------------------------------

/// Coupling relationships of one vehicle: coupled leaders ahead, coupled
/// followers behind, and bookkeeping for the request/confirm handshake.
#[derive(Clone, Debug, Default)]
pub struct CouplingState {
    pub leaders: BTreeSet<VehicleId>,
    pub followers: BTreeSet<VehicleId>,
    requested: BTreeSet<VehicleId>,
    confirmed_up_to: BTreeMap<VehicleId, f64>,
}

impl CouplingState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears every relationship with a departed vehicle.
    pub fn remove(&mut self, id: VehicleId) {
        self.leaders.remove(&id);
        self.followers.remove(&id);
        self.requested.remove(&id);
        self.confirmed_up_to.remove(&id);
    }
}

/// A leader coupling completed this step: the confirm's parameters, the
/// leader's braking limit at confirm time, and the confirm timestamp.
#[derive(Clone, Debug)]
pub struct NewLeader {
    pub id: VehicleId,
    pub params: VehicleParams,
    pub braking_limit: f64,
    pub label: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CouplingEvents {
    pub new_leaders: Vec<NewLeader>,
    pub new_followers: Vec<VehicleId>,
}

/// One coupling round: beacon out, react to the direct predecessor's beacon
/// with a follow request, confirm requests from the direct successor, and
/// complete couplings for received confirmations. Coupling is only
/// established once the confirm round-trip lands.
///
/// `my_braking_limit` and `limit_label` snapshot the enforced limit before
/// this step's consensus run; the label must predate the step's own
/// timestamp.
#[allow(clippy::too_many_arguments)]
pub fn coupling_step(
    me: VehicleId,
    now: f64,
    direct_predecessor: Option<VehicleId>,
    direct_successor: Option<VehicleId>,
    mb: &MailboxView,
    st: &mut CouplingState,
    my_params: &VehicleParams,
    my_braking_limit: f64,
    limit_label: f64,
) -> (Vec<Envelope>, CouplingEvents) {
    debug_assert!(limit_label < now);
    let mut out = Vec::new();
    let mut events = CouplingEvents::default();
    out.push(Envelope {
        sender: me,
        send_time: now,
        recipient: Recipient::Backward,
        payload: Payload::ProtocolBeacon,
    });

    // request coupling with the direct predecessor once it advertises the
    // protocol; keep requesting until the confirm arrives
    if let Some(pred) = direct_predecessor {
        if !st.leaders.contains(&pred) && mb.beacon_from(pred).is_some() {
            out.push(Envelope {
                sender: me,
                send_time: now,
                recipient: Recipient::To(pred),
                payload: Payload::FollowRequest,
            });
            st.requested.insert(pred);
        }
    }

    // confirm a fresh request from the direct successor
    if let Some(succ) = direct_successor {
        if let Some(req) = mb.get(succ, Lane::FollowRequest) {
            let already = st.confirmed_up_to.get(&succ).copied().unwrap_or(-1.0);
            if req.send_time > already {
                st.confirmed_up_to.insert(succ, req.send_time);
                if st.followers.insert(succ) {
                    events.new_followers.push(succ);
                }
                out.push(Envelope {
                    sender: me,
                    send_time: now,
                    recipient: Recipient::To(succ),
                    payload: Payload::FollowConfirm {
                        params: *my_params,
                        braking_limit: my_braking_limit,
                        label: limit_label,
                    },
                });
            }
        }
    }

    // complete couplings we requested
    let confirmers: Vec<VehicleId> = st.requested.iter().copied().collect();
    for leader in confirmers {
        if let Some(env) = mb.get(leader, Lane::FollowConfirm) {
            if let Payload::FollowConfirm {
                params,
                braking_limit,
                label,
            } = &env.payload
            {
                st.requested.remove(&leader);
                if st.leaders.insert(leader) {
                    events.new_leaders.push(NewLeader {
                        id: leader,
                        params: *params,
                        braking_limit: *braking_limit,
                        label: *label,
                    });
                }
            }
        }
    }

    (out, events)
}
