//! Safe adoption of consensus braking limits: candidates gated on follower
//! confirmations, per-leader stored limits with time-label discipline, and a
//! jerk-bounded transition phase that keeps temporarily unverifiable limit
//! changes from blocking convergence.
//!
//! The protocol tolerates dropped, delayed, duplicated, and reordered
//! messages; the only channel assumption is the newest-wins mailbox cache.

use std::collections::BTreeMap;

use crate::dynamics::HorizonError;
use crate::network::{Envelope, MailboxView, Payload, Recipient};
use crate::types::VehicleId;
use crate::verify::{verify, PrecedingInfo, VerifyCtx};

// ---------------------------------------------------------------------------
// Transition phase
// ---------------------------------------------------------------------------

/// Jerk-ramp state forcing a currently unverifiable braking-limit change to
/// become verifiable: while active, the returned input bound decreases by a
/// growing jerk each step, gently opening the gap ahead.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionState {
    pub active: bool,
    pub a_trans: f64,
    /// `-1` whenever the phase was inactive at the last bound query.
    pub counter: i64,
    /// Negative, non-increasing jerk sequence [m/s³]; the last element
    /// repeats once exhausted.
    pub jerk_seq: Vec<f64>,
}

impl TransitionState {
    pub fn new(jerk_seq: Vec<f64>) -> Self {
        assert!(!jerk_seq.is_empty());
        let mut prev = 0.0;
        for &j in &jerk_seq {
            assert!(j < 0.0, "jerk sequence must be negative");
            assert!(j <= prev, "jerk sequence must be non-increasing");
            prev = j;
        }
        Self {
            active: false,
            a_trans: 0.0,
            counter: -1,
            jerk_seq,
        }
    }

    /// `-1, -2, ..., -10` m/s³, strong enough to force eventual verification
    /// success without an abrupt first step.
    pub fn default_jerk() -> Vec<f64> {
        (1..=10).map(|k| -(k as f64)).collect()
    }
}

impl Default for TransitionState {
    fn default() -> Self {
        Self::new(Self::default_jerk())
    }
}

/// Input bound from the transition phase. Inactive: resets the ramp to the
/// acceleration applied in the previous step and poses no bound. Active:
/// advances the ramp and returns it; consecutive active calls yield strictly
/// decreasing bounds.
pub fn transition_bound(ts: &mut TransitionState, last_applied_a: f64, dt_p: f64) -> f64 {
    if !ts.active {
        ts.counter = -1;
        ts.a_trans = last_applied_a;
        f64::INFINITY
    } else {
        ts.counter += 1;
        let idx = (ts.counter as usize).min(ts.jerk_seq.len() - 1);
        ts.a_trans += dt_p * ts.jerk_seq[idx];
        ts.a_trans
    }
}

// ---------------------------------------------------------------------------
// Consensus entity
// ---------------------------------------------------------------------------

/// Black-box consensus protocol as seen by one vehicle: one braking-limit
/// suggestion per planning step, converging toward a common platoon value.
/// Entity-internal messaging rides the simulated network but is outside the
/// safety contract.
pub trait ConsensusEntity {
    /// One protocol round: read peer information from the mailbox, append
    /// outgoing entity messages, and return the suggested braking limit.
    fn step(&mut self, me: VehicleId, now: f64, mb: &MailboxView, outbox: &mut Vec<Envelope>)
        -> f64;

    /// Platoon membership changed (for example a vehicle departed).
    fn reset(&mut self);

    /// Whether the output has settled on the current target; once true and
    /// the membership is static, successive outputs are constant.
    fn converged(&self) -> bool;
}

/// Reference implementation: max-consensus toward the weakest member limit,
/// approached geometrically at a fixed rate per round, with a reset hook for
/// departures. Peers are discovered through gossip; all gossip in range is
/// trusted, so this entity is only suitable for single-platoon settings.
#[derive(Clone, Debug)]
pub struct ReferenceEntity {
    own_a_dec: f64,
    output: f64,
    target: f64,
    peers: BTreeMap<VehicleId, f64>,
    rate: f64,
    snap: f64,
}

impl ReferenceEntity {
    pub fn new(own_a_dec: f64) -> Self {
        Self {
            own_a_dec,
            output: own_a_dec,
            target: own_a_dec,
            peers: BTreeMap::new(),
            rate: 0.5,
            snap: 0.005,
        }
    }

    pub fn target(&self) -> f64 {
        self.target
    }
}

impl ConsensusEntity for ReferenceEntity {
    fn step(
        &mut self,
        me: VehicleId,
        now: f64,
        mb: &MailboxView,
        outbox: &mut Vec<Envelope>,
    ) -> f64 {
        for sender in mb.senders() {
            if sender != me {
                if let Some(a) = mb.gossip_from(sender) {
                    self.peers.insert(sender, a);
                }
            }
        }
        outbox.push(Envelope {
            sender: me,
            send_time: now,
            recipient: Recipient::AllInRange,
            payload: Payload::ConsensusGossip {
                a_dec: self.own_a_dec,
            },
        });
        self.target = self
            .peers
            .values()
            .fold(self.own_a_dec, |acc, &a| acc.max(a));
        if (self.output - self.target).abs() <= self.snap {
            self.output = self.target;
        } else {
            self.output += self.rate * (self.target - self.output);
        }
        self.output
    }

    fn reset(&mut self) {
        self.peers.clear();
        self.target = self.own_a_dec;
    }

    fn converged(&self) -> bool {
        self.output == self.target
    }
}

// ---------------------------------------------------------------------------
// Protocol state
// ---------------------------------------------------------------------------

/// Braking limit stored for one coupled leader, with the time label of the
/// leader's message it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoredLimit {
    pub a: f64,
    pub label: f64,
}

/// Per-vehicle protocol state. Mutated only by the owning vehicle's planning
/// step; all cross-vehicle interaction goes through envelopes.
#[derive(Clone, Debug)]
pub struct ConsensusState {
    /// Currently enforced braking limit; the vehicle's dynamics use it in
    /// place of the physical deceleration limit.
    pub a_min_forced: f64,
    /// Unconfirmed stronger candidate, if any. Never exceeds the enforced
    /// limit while present.
    pub a_cand: Option<f64>,
    /// Confirmations labeled before this time are ignored. Never decreases.
    pub t_accept: f64,
    pub leader_limits: BTreeMap<VehicleId, StoredLimit>,
    pub transition: TransitionState,
    /// How many in-flight candidates were discarded by non-stronger entity
    /// outputs (a convergence diagnostic, not part of the safety contract).
    pub discarded_candidates: u64,
}

impl ConsensusState {
    pub fn new(initial_limit: f64) -> Self {
        Self {
            a_min_forced: initial_limit,
            a_cand: None,
            t_accept: 0.0,
            leader_limits: BTreeMap::new(),
            transition: TransitionState::default(),
            discarded_candidates: 0,
        }
    }

    /// Registers a freshly coupled leader with the limit and label carried by
    /// its follow confirmation.
    pub fn init_leader(&mut self, id: VehicleId, a: f64, label: f64) {
        self.leader_limits.insert(id, StoredLimit { a, label });
    }

    pub fn remove_leader(&mut self, id: VehicleId) {
        self.leader_limits.remove(&id);
    }

    /// The braking limit to assume for a preceding vehicle: the stored
    /// coupled-leader limit if there is one.
    pub fn assumed_limit_for(&self, id: VehicleId) -> Option<f64> {
        self.leader_limits.get(&id).map(|s| s.a)
    }

    fn clear_candidate(&mut self, t: f64) {
        // clearing the candidate always resets the acceptance time
        self.a_cand = None;
        debug_assert!(t >= self.t_accept);
        self.t_accept = t;
    }

    fn adopt_weaker(&mut self, a_new: f64) {
        // this adoption site never strengthens the limit
        debug_assert!(a_new >= self.a_min_forced);
        self.a_min_forced = a_new;
    }

    fn adopt_confirmed(&mut self, a_conf: f64) {
        // this adoption site never weakens the limit
        debug_assert!(a_conf <= self.a_min_forced);
        self.a_min_forced = a_conf;
    }

    fn assert_invariants(&self) {
        if let Some(c) = self.a_cand {
            debug_assert!(
                c <= self.a_min_forced,
                "candidate {} above enforced limit {}",
                c,
                self.a_min_forced
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Protocol step
// ---------------------------------------------------------------------------

/// Everything one protocol step reads besides the mutable state.
pub struct ConsensusInputs<'a> {
    pub t: f64,
    /// Verification views of the preceding vehicles, with assumed limits
    /// already built from the stored leader limits (or worst case).
    pub preceding: &'a [PrecedingInfo],
    pub leaders: &'a std::collections::BTreeSet<VehicleId>,
    pub followers: &'a std::collections::BTreeSet<VehicleId>,
    pub mailbox: &'a MailboxView,
    pub coll_positions: &'a [f64],
    /// Acceleration applied in the previous planning step.
    pub last_applied_a: f64,
    /// Physical deceleration limit; entity suggestions below it cannot be
    /// realized and are clamped to it.
    pub a_dec_phys: f64,
}

pub struct ConsensusOutcome {
    /// Upper bound on this step's input, `+∞` while the transition phase is
    /// inactive.
    pub a_trans_bound: f64,
    pub outbox: Vec<Envelope>,
}

/// One full protocol step: apply the consensus entity's suggestion, process
/// leader limit changes, fold in follower confirmations, and send out
/// confirmations and the current candidate-or-limit.
pub fn safe_consensus(
    state: &mut ConsensusState,
    me: VehicleId,
    entity: &mut dyn ConsensusEntity,
    inp: &ConsensusInputs,
    ctx: &VerifyCtx,
) -> Result<ConsensusOutcome, HorizonError> {
    let t = inp.t;
    state.transition.active = false;
    let mut outbox = Vec::new();

    // Block 1: apply the consensus protocol
    let suggested = entity.step(me, t, inp.mailbox, &mut outbox);
    let a_new = suggested.max(inp.a_dec_phys);
    let a_cand_old = state.a_cand;
    if a_new < state.a_min_forced {
        // stronger limit: only follower safety is affected, wait for confirms
        state.a_cand = Some(a_new);
    } else {
        // weaker or equal limit: own safety toward the front is affected
        if state.a_cand.is_some() {
            state.discarded_candidates += 1;
        }
        state.clear_candidate(t);
        let res = verify(
            f64::NEG_INFINITY,
            a_new,
            inp.preceding,
            inp.coll_positions,
            ctx,
        )?;
        if res.safe {
            state.adopt_weaker(a_new);
        } else {
            state.transition.active = true;
        }
    }

    // Block 2: process incoming limits from coupled leaders
    for &leader in inp.leaders.iter() {
        let Some((a_l, label_l)) = inp.mailbox.braking_limit_from(leader) else {
            continue;
        };
        // the coupling handshake always seeds a stored limit; fall back to
        // the worst-case assumption if a limit arrives before it somehow
        let stored = state
            .leader_limits
            .get(&leader)
            .copied()
            .unwrap_or(StoredLimit {
                a: crate::types::VehicleParams::worst_case().a_dec,
                label: -1.0,
            });
        let mut safe = true;
        if a_l < stored.a {
            // the leader may stop earlier than assumed so far: re-verify a
            // full brake against that leader alone under its new limit
            safe = match inp.preceding.iter().find(|p| p.id == leader) {
                Some(info) => {
                    let mut view = info.clone();
                    view.a_min_assumed = a_l;
                    verify(
                        f64::NEG_INFINITY,
                        state.a_min_forced,
                        std::slice::from_ref(&view),
                        inp.coll_positions,
                        ctx,
                    )?
                    .safe
                }
                None => false,
            };
        }
        if safe {
            // a pair that verified under the old stored limit stays safe
            // under a weaker one
            #[cfg(debug_assertions)]
            if a_l > stored.a {
                if let Some(info) = inp.preceding.iter().find(|p| p.id == leader) {
                    let mut old_view = info.clone();
                    old_view.a_min_assumed = stored.a;
                    let was_safe = verify(
                        f64::NEG_INFINITY,
                        state.a_min_forced,
                        std::slice::from_ref(&old_view),
                        inp.coll_positions,
                        ctx,
                    )?
                    .safe;
                    if was_safe {
                        let mut new_view = info.clone();
                        new_view.a_min_assumed = a_l;
                        let still_safe = verify(
                            f64::NEG_INFINITY,
                            state.a_min_forced,
                            std::slice::from_ref(&new_view),
                            inp.coll_positions,
                            ctx,
                        )?
                        .safe;
                        debug_assert!(
                            still_safe,
                            "weakening the stored limit of {leader} from {} to {a_l} \
                             broke a verified-safe pair",
                            stored.a
                        );
                    }
                }
            }
            state.leader_limits.insert(
                leader,
                StoredLimit {
                    a: a_l,
                    label: label_l,
                },
            );
        } else {
            state.transition.active = true;
        }
    }

    // Block 3: process follower confirmations
    if state.a_cand.is_some() {
        let mut all_confirmed = true;
        let mut confirmed = Vec::new();
        for &f in inp.followers.iter() {
            match inp.mailbox.confirmation_from(f) {
                Some((a_f, label_f))
                    if label_f >= state.t_accept && a_f <= state.a_min_forced =>
                {
                    confirmed.push(a_f)
                }
                _ => {
                    all_confirmed = false;
                    break;
                }
            }
        }
        if all_confirmed {
            let cand = state.a_cand.expect("candidate present");
            let a_conf = confirmed.into_iter().fold(cand, f64::max);
            // a verified-safe state stays safe under a strengthened own limit
            #[cfg(debug_assertions)]
            if a_conf < state.a_min_forced {
                let was_safe = verify(
                    f64::NEG_INFINITY,
                    state.a_min_forced,
                    inp.preceding,
                    inp.coll_positions,
                    ctx,
                )?
                .safe;
                if was_safe {
                    let still_safe = verify(
                        f64::NEG_INFINITY,
                        a_conf,
                        inp.preceding,
                        inp.coll_positions,
                        ctx,
                    )?
                    .safe;
                    debug_assert!(
                        still_safe,
                        "adopting {a_conf} broke a configuration that verified at {}",
                        state.a_min_forced
                    );
                }
            }
            state.adopt_confirmed(a_conf);
            if cand == state.a_min_forced {
                state.clear_candidate(t);
            }
        }
    }

    // Block 4: send information
    for &leader in inp.leaders.iter() {
        if let Some(st) = state.leader_limits.get(&leader) {
            outbox.push(Envelope {
                sender: me,
                send_time: t,
                recipient: Recipient::To(leader),
                payload: Payload::Confirmation {
                    a: st.a,
                    label: st.label,
                },
            });
        }
    }
    if let (Some(now_cand), Some(old_cand)) = (state.a_cand, a_cand_old) {
        if now_cand > old_cand {
            // the candidate rose: confirmations for the lower one are stale
            debug_assert!(t >= state.t_accept);
            state.t_accept = t;
        }
    }
    let a_to_send = state.a_cand.unwrap_or(state.a_min_forced);
    outbox.push(Envelope {
        sender: me,
        send_time: t,
        recipient: Recipient::Backward,
        payload: Payload::BrakingLimit {
            a: a_to_send,
            label: t,
        },
    });

    state.assert_invariants();
    let a_trans_bound = transition_bound(&mut state.transition, inp.last_applied_a, ctx.env.dt_p);
    Ok(ConsensusOutcome {
        a_trans_bound,
        outbox,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{presets, EnvParams, Interval, StateInterval};
    use std::collections::BTreeSet;

    fn meas(s: f64, v: f64) -> StateInterval {
        StateInterval {
            s: Interval::point(s),
            v: Interval::point(v),
        }
    }

    fn mk_inputs<'a>(
        t: f64,
        mailbox: &'a MailboxView,
        leaders: &'a BTreeSet<VehicleId>,
        followers: &'a BTreeSet<VehicleId>,
    ) -> ConsensusInputs<'a> {
        ConsensusInputs {
            t,
            preceding: &[],
            leaders,
            followers,
            mailbox,
            coll_positions: &[],
            last_applied_a: 0.0,
            a_dec_phys: -10.0,
        }
    }

    /// Entity that replays a fixed script.
    struct ScriptEntity {
        script: Vec<f64>,
        idx: usize,
    }
    impl ConsensusEntity for ScriptEntity {
        fn step(
            &mut self,
            _me: VehicleId,
            _now: f64,
            _mb: &MailboxView,
            _outbox: &mut Vec<Envelope>,
        ) -> f64 {
            let v = self.script[self.idx.min(self.script.len() - 1)];
            self.idx += 1;
            v
        }
        fn reset(&mut self) {}
        fn converged(&self) -> bool {
            self.idx >= self.script.len()
        }
    }

    #[test]
    fn transition_bound_examples() {
        let mut ts = TransitionState::new(vec![-1.0, -2.0, -3.0]);
        // inactive: reset and no bound
        let b = transition_bound(&mut ts, 0.7, 0.1);
        assert_eq!(b, f64::INFINITY);
        assert_eq!(ts.counter, -1);
        assert_eq!(ts.a_trans, 0.7);

        // two active steps from a = 0
        let b0 = transition_bound(&mut ts, 0.0, 0.1); // reset to 0
        assert_eq!(b0, f64::INFINITY);
        ts.active = true;
        let b1 = transition_bound(&mut ts, 123.0, 0.1);
        assert!((b1 - (-0.1)).abs() < 1e-12);
        ts.active = true;
        let b2 = transition_bound(&mut ts, 123.0, 0.1);
        assert!((b2 - (-0.3)).abs() < 1e-12);
        assert!(b2 < b1);

        // deactivation restarts from the most recently applied acceleration
        ts.active = false;
        transition_bound(&mut ts, -0.25, 0.1);
        ts.active = true;
        let b3 = transition_bound(&mut ts, -0.25, 0.1);
        assert!((b3 - (-0.35)).abs() < 1e-12);
    }

    #[test]
    fn exhausted_jerk_sequence_repeats_last_element() {
        let mut ts = TransitionState::new(vec![-1.0]);
        transition_bound(&mut ts, 0.0, 0.1);
        for i in 1..=5 {
            ts.active = true;
            let b = transition_bound(&mut ts, 0.0, 0.1);
            assert!((b - (-0.1 * i as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_step_changes_nothing() {
        let p = presets::car_25t();
        let env = EnvParams::default_params();
        let ctx = VerifyCtx::new(meas(0.0, 15.0), &p, &env);
        let mut state = ConsensusState::new(-6.0);
        let mut entity = ScriptEntity {
            script: vec![-6.0],
            idx: 0,
        };
        let mb = MailboxView::new();
        let (leaders, followers) = (BTreeSet::new(), BTreeSet::new());
        let inputs = mk_inputs(1.0, &mb, &leaders, &followers);
        let out = safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        assert_eq!(state.a_min_forced, -6.0);
        assert!(state.a_cand.is_none());
        assert_eq!(out.a_trans_bound, f64::INFINITY);
        // the broadcast carries the unchanged limit
        let sent = out
            .outbox
            .iter()
            .find_map(|e| match e.payload {
                Payload::BrakingLimit { a, label } => Some((a, label)),
                _ => None,
            })
            .unwrap();
        assert_eq!(sent, (-6.0, 1.0));
    }

    #[test]
    fn stronger_suggestion_becomes_candidate_and_waits_for_confirms() {
        let p = presets::car_25t();
        let env = EnvParams::default_params();
        let ctx = VerifyCtx::new(meas(0.0, 15.0), &p, &env);
        let mut state = ConsensusState::new(-6.0);
        let mut entity = ScriptEntity {
            script: vec![-7.0, -7.0],
            idx: 0,
        };
        let mut mb = MailboxView::new();
        let leaders = BTreeSet::new();
        let followers: BTreeSet<_> = [VehicleId(1), VehicleId(2)].into_iter().collect();

        let inputs = mk_inputs(1.0, &mb, &leaders, &followers);
        let out = safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        assert_eq!(state.a_cand, Some(-7.0));
        assert_eq!(state.a_min_forced, -6.0, "unchanged until confirmed");
        let sent = out
            .outbox
            .iter()
            .find_map(|e| match e.payload {
                Payload::BrakingLimit { a, .. } => Some(a),
                _ => None,
            })
            .unwrap();
        assert_eq!(sent, -7.0, "broadcast carries the candidate");

        // both followers confirm with labels at/after t_accept
        for f in [1, 2] {
            mb.ingest(Envelope {
                sender: VehicleId(f),
                send_time: 1.1,
                recipient: Recipient::To(VehicleId(0)),
                payload: Payload::Confirmation {
                    a: -7.0,
                    label: 1.0,
                },
            });
        }
        let inputs = mk_inputs(1.1, &mb, &leaders, &followers);
        safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        assert_eq!(state.a_min_forced, -7.0);
        assert!(state.a_cand.is_none());
        assert_eq!(state.t_accept, 1.1, "acceptance time reset on adoption");
    }

    #[test]
    fn stale_or_overly_strong_confirmations_do_not_count() {
        let p = presets::car_25t();
        let env = EnvParams::default_params();
        let ctx = VerifyCtx::new(meas(0.0, 15.0), &p, &env);
        let mut state = ConsensusState::new(-6.0);
        state.t_accept = 5.0;
        let mut entity = ScriptEntity {
            script: vec![-7.0],
            idx: 0,
        };
        let mut mb = MailboxView::new();
        let leaders = BTreeSet::new();
        let followers: BTreeSet<_> = [VehicleId(1)].into_iter().collect();
        // label predates t_accept: ignored
        mb.ingest(Envelope {
            sender: VehicleId(1),
            send_time: 6.0,
            recipient: Recipient::To(VehicleId(0)),
            payload: Payload::Confirmation {
                a: -7.0,
                label: 4.0,
            },
        });
        let inputs = mk_inputs(6.0, &mb, &leaders, &followers);
        safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        assert_eq!(state.a_min_forced, -6.0);
        assert_eq!(state.a_cand, Some(-7.0), "candidate persists across steps");
    }

    #[test]
    fn weaker_leader_limit_is_stored_without_verification() {
        let p = presets::truck_20t();
        let env = EnvParams::default_params();
        let ctx = VerifyCtx::new(meas(0.0, 15.0), &p, &env);
        let mut state = ConsensusState::new(-5.0);
        let leader = VehicleId(7);
        state.init_leader(leader, -9.0, 0.0);
        let mut entity = ScriptEntity {
            script: vec![-5.0],
            idx: 0,
        };
        let mut mb = MailboxView::new();
        mb.ingest(Envelope {
            sender: leader,
            send_time: 1.0,
            recipient: Recipient::Backward,
            payload: Payload::BrakingLimit { a: -8.0, label: 1.0 },
        });
        let leaders: BTreeSet<_> = [leader].into_iter().collect();
        let followers = BTreeSet::new();
        let inputs = mk_inputs(1.0, &mb, &leaders, &followers);
        let out = safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        // -8 is weaker than the stored -9: stored directly, confirmed back
        assert_eq!(
            state.leader_limits.get(&leader).unwrap().a,
            -8.0,
            "weaker limit adopted"
        );
        let conf = out
            .outbox
            .iter()
            .find_map(|e| match (&e.recipient, &e.payload) {
                (Recipient::To(id), Payload::Confirmation { a, label }) if *id == leader => {
                    Some((*a, *label))
                }
                _ => None,
            })
            .unwrap();
        assert_eq!(conf, (-8.0, 1.0));
        assert!(!state.transition.active);
    }

    #[test]
    fn unverifiable_stronger_leader_limit_activates_transition() {
        let p = presets::truck_20t();
        let env = EnvParams::default_params();
        // ego tailgating: a stronger leader limit cannot verify
        let ctx = VerifyCtx::new(meas(0.0, 20.0), &p, &env);
        let mut state = ConsensusState::new(-5.0);
        let leader = VehicleId(7);
        state.init_leader(leader, -5.0, 0.0);
        let mut entity = ScriptEntity {
            script: vec![-5.0],
            idx: 0,
        };
        let mut mb = MailboxView::new();
        mb.ingest(Envelope {
            sender: leader,
            send_time: 1.0,
            recipient: Recipient::Backward,
            payload: Payload::BrakingLimit {
                a: -10.0,
                label: 1.0,
            },
        });
        let leader_info = PrecedingInfo {
            id: leader,
            state: meas(20.0, 20.0),
            params: presets::truck_15t(),
            a_min_assumed: -5.0,
            cutin: None,
        };
        let preceding = [leader_info];
        let leaders: BTreeSet<_> = [leader].into_iter().collect();
        let followers = BTreeSet::new();
        let mut inputs = mk_inputs(1.0, &mb, &leaders, &followers);
        inputs.preceding = &preceding;
        let out = safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        // stored limit unchanged, transition engaged, bound finite
        assert_eq!(state.leader_limits.get(&leader).unwrap().a, -5.0);
        assert!(out.a_trans_bound.is_finite());
        assert!(out.a_trans_bound < 0.0);
    }

    #[test]
    fn entity_suggestions_below_physical_capability_are_clamped() {
        let p = presets::truck_20t(); // physical -5
        let env = EnvParams::default_params();
        let ctx = VerifyCtx::new(meas(0.0, 15.0), &p, &env);
        let mut state = ConsensusState::new(-5.0);
        let mut entity = ScriptEntity {
            script: vec![-11.0],
            idx: 0,
        };
        let mb = MailboxView::new();
        let (leaders, followers) = (BTreeSet::new(), BTreeSet::new());
        let mut inputs = mk_inputs(1.0, &mb, &leaders, &followers);
        inputs.a_dec_phys = -5.0;
        safe_consensus(&mut state, VehicleId(0), &mut entity, &inputs, &ctx).unwrap();
        // -11 is unrealizable; clamped to -5 = current, which is the
        // weaker-or-equal branch
        assert_eq!(state.a_min_forced, -5.0);
        assert!(state.a_cand.is_none());
    }

    #[test]
    fn reference_entity_converges_to_weakest_member() {
        let ids: Vec<VehicleId> = (0..5).map(VehicleId).collect();
        let decs = [-5.0, -6.0, -10.0, -5.5, -9.0];
        let mut entities: Vec<ReferenceEntity> =
            decs.iter().map(|&d| ReferenceEntity::new(d)).collect();
        let mut mailboxes: Vec<MailboxView> = (0..5).map(|_| MailboxView::new()).collect();
        for round in 0..40 {
            let now = round as f64 * 0.1;
            let mut all_out = Vec::new();
            for (i, e) in entities.iter_mut().enumerate() {
                let mut out = Vec::new();
                e.step(ids[i], now, &mailboxes[i], &mut out);
                all_out.extend(out);
            }
            for env in all_out {
                for (i, mb) in mailboxes.iter_mut().enumerate() {
                    if ids[i] != env.sender {
                        mb.ingest(env.clone());
                    }
                }
            }
        }
        for e in &entities {
            assert!((e.output - (-5.0)).abs() < 0.01, "output {}", e.output);
        }
        // all peers equal from the start: output is that value immediately
        let mut same = ReferenceEntity::new(-4.0);
        let mb = MailboxView::new();
        let mut out = Vec::new();
        assert_eq!(same.step(VehicleId(9), 0.0, &mb, &mut out), -4.0);
        assert!(same.converged());
    }

    #[test]
    fn static_lossless_platoon_converges_to_a_common_limit() {
        // three coupled vehicles at generous gaps, perfect direct delivery:
        // the enforced limits must agree within 0.01 m/s² in bounded time,
        // with the transition phase never blocking convergence for good
        let env = EnvParams::default_params();
        let decs = [-6.0, -10.0, -5.0];
        let params: Vec<_> = [
            presets::truck_15t(),
            presets::car_25t(),
            presets::truck_20t(),
        ]
        .to_vec();
        let fronts = [500.0, 380.0, 260.0];
        let n = 3;
        let mut states: Vec<ConsensusState> =
            decs.iter().map(|&d| ConsensusState::new(d)).collect();
        let mut entities: Vec<ReferenceEntity> =
            decs.iter().map(|&d| ReferenceEntity::new(d)).collect();
        let mut mailboxes: Vec<MailboxView> = (0..n).map(|_| MailboxView::new()).collect();
        let mut leaders = vec![BTreeSet::new(); n];
        let mut followers = vec![BTreeSet::new(); n];
        for i in 1..n {
            leaders[i].insert(VehicleId(i - 1));
            followers[i - 1].insert(VehicleId(i));
            states[i].init_leader(VehicleId(i - 1), decs[i - 1], -1.0);
        }
        let mut converged_at = None;
        for step in 0..200u64 {
            let t = step as f64 * env.dt_p;
            let mut sent: Vec<Envelope> = Vec::new();
            for i in 0..n {
                let preceding: Vec<PrecedingInfo> = if i > 0 {
                    vec![PrecedingInfo {
                        id: VehicleId(i - 1),
                        state: meas(fronts[i - 1], 15.0),
                        params: params[i - 1],
                        a_min_assumed: states[i]
                            .assumed_limit_for(VehicleId(i - 1))
                            .unwrap(),
                        cutin: None,
                    }]
                } else {
                    Vec::new()
                };
                let inputs = ConsensusInputs {
                    t,
                    preceding: &preceding,
                    leaders: &leaders[i],
                    followers: &followers[i],
                    mailbox: &mailboxes[i],
                    coll_positions: &[],
                    last_applied_a: 0.0,
                    a_dec_phys: decs[i],
                };
                let ctx = VerifyCtx::new(meas(fronts[i], 15.0), &params[i], &env);
                let out =
                    safe_consensus(&mut states[i], VehicleId(i), &mut entities[i], &inputs, &ctx)
                        .unwrap();
                sent.extend(out.outbox);
            }
            for msg in sent {
                match msg.recipient {
                    Recipient::To(id) => mailboxes[id.0].ingest(msg),
                    _ => {
                        for (i, mb) in mailboxes.iter_mut().enumerate() {
                            if VehicleId(i) != msg.sender {
                                mb.ingest(msg.clone());
                            }
                        }
                    }
                }
            }
            let lo = states.iter().map(|s| s.a_min_forced).fold(f64::INFINITY, f64::min);
            let hi = states
                .iter()
                .map(|s| s.a_min_forced)
                .fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 0.01 && converged_at.is_none() && step > 0 {
                converged_at = Some(step);
            }
        }
        let at = converged_at.expect("limits must converge within 200 steps");
        assert!(at < 150, "convergence took {at} steps");
        // converged to the weakest member's capability
        for s in &states {
            assert!((s.a_min_forced - (-5.0)).abs() < 0.01, "{}", s.a_min_forced);
        }
    }

    #[test]
    fn reference_entity_reset_recomputes_target_after_departure() {
        let mut e = ReferenceEntity::new(-9.0);
        let mut mb = MailboxView::new();
        for (id, a) in [(1, -5.0), (2, -5.5)] {
            mb.ingest(Envelope {
                sender: VehicleId(id),
                send_time: 0.0,
                recipient: Recipient::AllInRange,
                payload: Payload::ConsensusGossip { a_dec: a },
            });
        }
        let mut out = Vec::new();
        for i in 0..30 {
            e.step(VehicleId(0), i as f64 * 0.1, &mb, &mut out);
        }
        assert_eq!(e.target(), -5.0);
        // the -5 member departs: mailbox scrubbed, entity reset
        mb.remove_sender(VehicleId(1));
        e.reset();
        for i in 0..30 {
            e.step(VehicleId(0), 3.0 + i as f64 * 0.1, &mb, &mut out);
        }
        assert_eq!(e.target(), -5.5);
        assert!(e.converged());
    }
}
