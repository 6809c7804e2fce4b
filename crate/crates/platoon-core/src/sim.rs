//! Deterministic scenario runner: synchronous planning rounds over a lossy
//! channel, ground-truth physics with disturbance injection, scripted events
//! (full brakes, cut-ins, departures, target changes), collision detection at
//! integration-substep granularity, and CSV logging.
//!
//! Every run is a pure function of the scenario file and its seed.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::consensus::{
    safe_consensus, ConsensusEntity, ConsensusInputs, ConsensusState, ReferenceEntity,
};
use crate::controllers::{fail_safe, nominal_cacc, recap, FailSafeConfig};
use crate::dynamics::{
    lower_pos, simulate_span, upper_pos, BoundCtx, BoundTrajectory, HorizonError, InputTraj,
    SUBSTEPS_PER_GRID,
};
use crate::network::{
    collision_pos, coupling_step, Channel, CouplingState, Envelope, MailboxView, Payload,
    Recipient, TraceRecord,
};
use crate::scenario::{Event, Scenario, VehicleSpec};
use crate::types::{
    derive_rng, interval_measure, CutinTracker, Interval, StateInterval, VehicleId, VehicleParams,
    VehicleState,
};
use crate::verify::{safe_distance, verify, verify_core, PrecedingInfo, VerifyCtx};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("planning horizon exhausted: {0}")]
    Horizon(#[from] HorizonError),
}

// ---------------------------------------------------------------------------
// Logging types
// ---------------------------------------------------------------------------

/// One row of `steps.csv`: the state of one vehicle at one planning step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub vehicle: String,
    pub s: f64,
    pub v: f64,
    /// Desired acceleration chosen by the protocol (or script).
    pub a_d: f64,
    /// Effective acceleration over the step, including saturation and
    /// disturbance.
    pub a_applied: f64,
    /// Enforced braking limit (consensus), or the physical one.
    pub a_min_forced: f64,
    pub fail_safe: bool,
    pub recap: bool,
    pub transition: bool,
    /// Own outstanding collision alerts (0 or 1).
    pub alerts: u32,
    /// Pairwise full-brake safety predicate against every observed
    /// predecessor without an open clearing window, or the emergency
    /// alternative (full brake plus alert).
    pub safe_dist_ok: bool,
    /// Bisected minimal safe gap to the direct predecessor; `NaN` unless the
    /// scenario enables the diagnostic.
    pub safe_distance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub name: String,
    pub steps_run: u64,
    pub collisions: u32,
    pub first_collision_step: Option<u64>,
    pub collision_pair: Option<(String, String)>,
    /// Minimal observed gap per (follower, leader) adjacency, sampled at
    /// every integration substep.
    pub min_gaps: BTreeMap<(String, String), f64>,
    /// First time the enforced braking limits of all platoon members agreed
    /// to within 0.01 m/s².
    pub convergence_time: Option<f64>,
    pub planning_p99_ms: f64,
    pub planning_max_ms: f64,
}

pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
    pub trace: Vec<TraceRecord>,
}

// ---------------------------------------------------------------------------
// Runtime state
// ---------------------------------------------------------------------------

struct VehicleRuntime {
    id: VehicleId,
    name: String,
    params: VehicleParams,
    platoon: bool,
    active: bool,
    state: VehicleState,
    target_speed: f64,
    full_brake: bool,
    /// Effective acceleration over the previous step.
    prev_a: f64,
    coupling: CouplingState,
    consensus: ConsensusState,
    entity: ReferenceEntity,
    mailbox: MailboxView,
    known_params: BTreeMap<VehicleId, VehicleParams>,
    trackers: BTreeMap<VehicleId, CutinTracker>,
    alert_outstanding: bool,
    rng_noise: ChaCha8Rng,
    rng_dist: ChaCha8Rng,
}

impl VehicleRuntime {
    fn new(idx: usize, spec: &VehicleSpec, seed: u64, active: bool) -> Self {
        Self {
            id: VehicleId(idx),
            name: spec.id.clone(),
            params: spec.params,
            platoon: spec.platoon,
            active,
            state: VehicleState::new(spec.s, spec.v),
            target_speed: spec.target_speed,
            full_brake: false,
            prev_a: 0.0,
            coupling: CouplingState::new(),
            consensus: ConsensusState::new(spec.params.a_dec),
            entity: ReferenceEntity::new(spec.params.a_dec),
            mailbox: MailboxView::new(),
            known_params: BTreeMap::new(),
            trackers: BTreeMap::new(),
            alert_outstanding: false,
            rng_noise: derive_rng(seed, 0x1000 + idx as u64),
            rng_dist: derive_rng(seed, 0x2000 + idx as u64),
        }
    }

    /// Braking limit the ground-truth dynamics enforce.
    fn a_dec_eff(&self) -> f64 {
        if self.platoon {
            self.consensus.a_min_forced
        } else {
            self.params.a_dec
        }
    }
}

/// Immutable per-tick view of one vehicle, shared by all planning calls of
/// the round.
#[derive(Clone, Copy)]
struct VehicleSnap {
    id: VehicleId,
    active: bool,
    state: VehicleState,
    prev_a: f64,
    length: f64,
}

struct PlanResult {
    a_d: f64,
    fail_safe: bool,
    recap: bool,
    transition: bool,
    safe_dist_ok: bool,
    safe_dist: f64,
    outbox: Vec<Envelope>,
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    Runner::new(scenario).run()
}

struct Runner<'a> {
    sc: &'a Scenario,
    vehicles: Vec<VehicleRuntime>,
    channel: Channel,
    next_event: usize,
    /// Registry index of each cut-in event's vehicle, keyed by event index.
    cutin_slots: BTreeMap<usize, usize>,
}

impl<'a> Runner<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let mut vehicles: Vec<VehicleRuntime> = sc
            .vehicles
            .iter()
            .enumerate()
            .map(|(i, spec)| VehicleRuntime::new(i, spec, sc.seed, true))
            .collect();
        let mut cutin_slots = BTreeMap::new();
        for (ev_idx, ev) in sc.events.iter().enumerate() {
            if let Event::CutIn { spec, .. } = ev {
                let idx = vehicles.len();
                vehicles.push(VehicleRuntime::new(idx, spec, sc.seed, false));
                cutin_slots.insert(ev_idx, idx);
            }
        }
        let channel = Channel::new(sc.channel, sc.seed);
        Runner {
            sc,
            vehicles,
            channel,
            next_event: 0,
            cutin_slots,
        }
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        let sc = self.sc;
        let dt_p = sc.env.dt_p;
        let n_steps = (sc.duration / dt_p).ceil() as u64;
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut summary = RunSummary {
            name: sc.name.clone(),
            ..RunSummary::default()
        };
        let mut planning_ms: Vec<f64> = Vec::new();

        'ticks: for step in 0..n_steps {
            let t = step as f64 * dt_p;
            self.apply_events(t);
            self.route_deliveries(step);

            let snapshot: Vec<VehicleSnap> = self
                .vehicles
                .iter()
                .map(|v| VehicleSnap {
                    id: v.id,
                    active: v.active,
                    state: v.state,
                    prev_a: v.prev_a,
                    length: v.params.length,
                })
                .collect();

            // planning round: everyone reads the same snapshot and mailbox
            let mut plans: BTreeMap<usize, PlanResult> = BTreeMap::new();
            for idx in 0..self.vehicles.len() {
                if !self.vehicles[idx].active {
                    continue;
                }
                if self.vehicles[idx].platoon {
                    let started = Instant::now();
                    let plan = plan_member(&mut self.vehicles[idx], &snapshot, sc, t)?;
                    planning_ms.push(started.elapsed().as_secs_f64() * 1e3);
                    plans.insert(idx, plan);
                } else {
                    plans.insert(idx, plan_scripted(&self.vehicles[idx]));
                }
            }
            for plan in plans.values_mut() {
                for env in plan.outbox.drain(..) {
                    self.channel.send(env, step);
                }
            }

            // physics in lockstep substeps with collision checks
            let pre_states: Vec<VehicleState> = self.vehicles.iter().map(|v| v.state).collect();
            let collision = self.physics_tick(&plans, &mut summary.min_gaps);

            for (idx, plan) in &plans {
                let v = &self.vehicles[*idx];
                let a_applied = (v.state.v - pre_states[*idx].v) / dt_p;
                steps.push(StepRecord {
                    step,
                    t,
                    vehicle: v.name.clone(),
                    s: pre_states[*idx].s,
                    v: pre_states[*idx].v,
                    a_d: plan.a_d,
                    a_applied,
                    a_min_forced: v.consensus.a_min_forced,
                    fail_safe: plan.fail_safe,
                    recap: plan.recap,
                    transition: plan.transition,
                    alerts: v.alert_outstanding as u32,
                    safe_dist_ok: plan.safe_dist_ok,
                    safe_distance: plan.safe_dist,
                });
            }
            for idx in plans.keys() {
                let v = &mut self.vehicles[*idx];
                v.prev_a = (v.state.v - pre_states[*idx].v) / dt_p;
            }
            summary.steps_run = step + 1;

            if sc.consensus && summary.convergence_time.is_none() {
                let limits: Vec<f64> = self
                    .vehicles
                    .iter()
                    .filter(|v| v.active && v.platoon)
                    .map(|v| v.consensus.a_min_forced)
                    .collect();
                if limits.len() >= 2 {
                    let spread = limits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - limits.iter().cloned().fold(f64::INFINITY, f64::min);
                    if spread < 0.01 {
                        summary.convergence_time = Some(t);
                    }
                }
            }

            if let Some((follower, leader)) = collision {
                summary.collisions += 1;
                summary.first_collision_step = Some(step);
                summary.collision_pair = Some((follower, leader));
                break 'ticks;
            }
        }

        planning_ms.sort_by(f64::total_cmp);
        if !planning_ms.is_empty() {
            let p99_idx = ((planning_ms.len() as f64 * 0.99).ceil() as usize)
                .clamp(1, planning_ms.len())
                - 1;
            summary.planning_p99_ms = planning_ms[p99_idx];
            summary.planning_max_ms = planning_ms[planning_ms.len() - 1];
        }

        Ok(RunOutput {
            steps,
            summary,
            trace: self.channel.trace().to_vec(),
        })
    }

    fn apply_events(&mut self, t: f64) {
        while self.next_event < self.sc.events.len()
            && self.sc.events[self.next_event].time() <= t + 1e-9
        {
            let ev_idx = self.next_event;
            self.next_event += 1;
            match &self.sc.events[ev_idx] {
                Event::FullBrake { id, .. } => {
                    if let Some(v) = self.by_name_mut(id) {
                        v.full_brake = true;
                    }
                }
                Event::SetTarget { id, v: target, .. } => {
                    let target = *target;
                    if let Some(v) = self.by_name_mut(id) {
                        v.target_speed = target;
                    }
                }
                Event::Depart { id, .. } => {
                    let Some(departed) = self.by_name(id).map(|v| v.id) else {
                        continue;
                    };
                    for v in &mut self.vehicles {
                        if v.id == departed {
                            v.active = false;
                            continue;
                        }
                        v.coupling.remove(departed);
                        v.mailbox.remove_sender(departed);
                        v.consensus.remove_leader(departed);
                        v.known_params.remove(&departed);
                        v.trackers.remove(&departed);
                        if self.sc.consensus && v.platoon && v.active {
                            v.entity.reset();
                        }
                    }
                }
                Event::CutIn { spec, .. } => {
                    let idx = self.cutin_slots[&ev_idx];
                    let intruder = VehicleId(idx);
                    self.vehicles[idx].active = true;
                    self.vehicles[idx].state = VehicleState::new(spec.s, spec.v);
                    // start clearing windows in every member behind the
                    // insertion whose safe distance the intruder violates
                    let wc = VehicleParams::worst_case();
                    let intruder_info = PrecedingInfo {
                        id: intruder,
                        state: StateInterval::point(VehicleState::new(
                            spec.s - spec.params.length + wc.length,
                            spec.v,
                        )),
                        params: wc,
                        a_min_assumed: wc.a_dec,
                        cutin: None,
                    };
                    let mut affected = Vec::new();
                    for v in &self.vehicles {
                        if v.active && v.platoon && v.state.s < spec.s - spec.params.length {
                            let ctx = VerifyCtx::new(
                                StateInterval::point(v.state),
                                &v.params,
                                &self.sc.env,
                            );
                            let ok = verify_core(
                                &InputTraj::full_brake(),
                                v.consensus.a_min_forced,
                                std::slice::from_ref(&intruder_info),
                                &[],
                                &ctx,
                            )
                            .map(|r| r.safe)
                            .unwrap_or(false);
                            if !ok {
                                affected.push(v.id.0);
                            }
                        }
                    }
                    for vid in affected {
                        self.vehicles[vid]
                            .trackers
                            .insert(intruder, CutinTracker::new(t));
                    }
                }
            }
        }
    }

    fn by_name(&self, name: &str) -> Option<&VehicleRuntime> {
        self.vehicles.iter().find(|v| v.name == name)
    }

    fn by_name_mut(&mut self, name: &str) -> Option<&mut VehicleRuntime> {
        self.vehicles.iter_mut().find(|v| v.name == name)
    }

    fn route_deliveries(&mut self, step: u64) {
        let delivered = self.channel.deliver(step);
        if delivered.is_empty() {
            return;
        }
        let pos: Vec<(bool, f64)> = self
            .vehicles
            .iter()
            .map(|v| (v.active, v.state.s))
            .collect();
        let range = self.sc.env.s_sensor;
        for env in delivered {
            let (sender_active, sender_s) = pos[env.sender.0];
            if !sender_active {
                continue;
            }
            match env.recipient {
                Recipient::To(id) => {
                    let (act, s) = pos[id.0];
                    if act && self.vehicles[id.0].platoon && (s - sender_s).abs() <= range {
                        self.vehicles[id.0].mailbox.ingest(env);
                    }
                }
                Recipient::Backward => {
                    for (i, &(act, s)) in pos.iter().enumerate() {
                        if act
                            && self.vehicles[i].platoon
                            && VehicleId(i) != env.sender
                            && s < sender_s
                            && sender_s - s <= range
                        {
                            self.vehicles[i].mailbox.ingest(env.clone());
                        }
                    }
                }
                Recipient::AllInRange => {
                    for (i, &(act, s)) in pos.iter().enumerate() {
                        if act
                            && self.vehicles[i].platoon
                            && VehicleId(i) != env.sender
                            && (s - sender_s).abs() <= range
                        {
                            self.vehicles[i].mailbox.ingest(env.clone());
                        }
                    }
                }
            }
        }
    }

    /// Advances all vehicles one planning interval in lockstep substeps,
    /// recording per-pair minimal gaps and reporting the first overlap.
    fn physics_tick(
        &mut self,
        plans: &BTreeMap<usize, PlanResult>,
        min_gaps: &mut BTreeMap<(String, String), f64>,
    ) -> Option<(String, String)> {
        let sc = self.sc;
        let substeps = SUBSTEPS_PER_GRID;
        let h = sc.env.dt_p / substeps as f64;
        let disturbance: BTreeMap<usize, f64> = plans
            .keys()
            .map(|&idx| {
                let v = &mut self.vehicles[idx];
                (idx, sample_disturbance(&mut v.rng_dist, sc.env.w))
            })
            .collect();
        let incline = &sc.incline;
        let alpha_at = |s: f64| incline.alpha_at(s);
        let mut hit = None;
        for _ in 0..substeps {
            for (&idx, plan) in plans {
                let v = &mut self.vehicles[idx];
                let a_dec_eff = v.a_dec_eff();
                v.state = simulate_span(
                    &v.state,
                    plan.a_d,
                    disturbance[&idx],
                    &v.params,
                    a_dec_eff,
                    sc.env.g,
                    sc.rho_true,
                    sc.v_wind_true,
                    &alpha_at,
                    h,
                    1,
                );
            }
            // overlap test on the current road ordering
            let mut order: Vec<usize> = plans.keys().copied().collect();
            order.sort_by(|&a, &b| {
                self.vehicles[b]
                    .state
                    .s
                    .total_cmp(&self.vehicles[a].state.s)
            });
            for pair in order.windows(2) {
                let leader = &self.vehicles[pair[0]];
                let follower = &self.vehicles[pair[1]];
                let gap = (leader.state.s - leader.params.length) - follower.state.s;
                let key = (follower.name.clone(), leader.name.clone());
                let entry = min_gaps.entry(key).or_insert(f64::INFINITY);
                *entry = entry.min(gap);
                if gap < 0.0 && hit.is_none() {
                    hit = Some((follower.name.clone(), leader.name.clone()));
                }
            }
        }
        hit
    }
}

/// Gaussian disturbance truncated to the admissible interval.
fn sample_disturbance(rng: &mut ChaCha8Rng, w: Interval) -> f64 {
    if w.width() == 0.0 {
        return w.mid();
    }
    let normal = Normal::new(w.mid(), w.width() / 4.0).expect("valid sigma");
    for _ in 0..16 {
        let x = normal.sample(rng);
        if w.contains(x) {
            return x;
        }
    }
    w.mid()
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

/// Scripted (non-platoon) vehicles: plain velocity tracking saturated by
/// their own limits, or a latched full brake.
fn plan_scripted(v: &VehicleRuntime) -> PlanResult {
    let a_d = if v.full_brake {
        f64::NEG_INFINITY
    } else {
        (v.target_speed - v.state.v).clamp(v.params.a_dec, v.params.a_acc)
    };
    PlanResult {
        a_d,
        fail_safe: false,
        recap: false,
        transition: false,
        safe_dist_ok: true,
        safe_dist: f64::NAN,
        outbox: Vec::new(),
    }
}

fn clamp_speed_interval(iv: Interval) -> Interval {
    Interval::new(iv.lo.max(0.0), iv.hi.max(0.0))
}

/// One full protocol planning step for a platoon member.
fn plan_member(
    v: &mut VehicleRuntime,
    snapshot: &[VehicleSnap],
    sc: &Scenario,
    t: f64,
) -> Result<PlanResult, SimError> {
    let env = &sc.env;
    let me = snapshot[v.id.0];

    // --- measurements ------------------------------------------------------
    let ego_meas = StateInterval {
        s: interval_measure(me.state.s, sc.noise.ego_pos, &mut v.rng_noise),
        v: clamp_speed_interval(interval_measure(
            me.state.v,
            sc.noise.ego_vel,
            &mut v.rng_noise,
        )),
    };

    // preceding vehicles within sensor range, nearest first
    let mut ahead: Vec<VehicleSnap> = snapshot
        .iter()
        .filter(|o| {
            o.active
                && o.id != v.id
                && o.state.s > me.state.s
                && (o.state.s - o.length) - me.state.s <= env.s_sensor
        })
        .copied()
        .collect();
    ahead.sort_by(|a, b| a.state.s.total_cmp(&b.state.s));
    let direct_pred = ahead.first().map(|o| o.id);
    let direct_succ = snapshot
        .iter()
        .filter(|o| o.active && o.id != v.id && o.state.s < me.state.s)
        .max_by(|a, b| a.state.s.total_cmp(&b.state.s))
        .map(|o| o.id);

    // --- cut-in tracker maintenance -----------------------------------------
    v.trackers
        .retain(|id, _| snapshot.get(id.0).map(|o| o.active).unwrap_or(false));
    let tracked: Vec<VehicleId> = v.trackers.keys().copied().collect();
    for id in tracked {
        let o = &snapshot[id.0];
        let assumed = v
            .known_params
            .get(&id)
            .copied()
            .unwrap_or(VehicleParams::worst_case());
        // the safe distance counts as re-established once a full brake
        // verifies against the vehicle under post-window assumptions
        let info = PrecedingInfo {
            id,
            state: StateInterval::point(VehicleState::new(
                o.state.s - o.length + assumed.length,
                o.state.v,
            )),
            params: assumed,
            a_min_assumed: v
                .consensus
                .assumed_limit_for(id)
                .unwrap_or(VehicleParams::worst_case().a_dec),
            cutin: None,
        };
        let ctx = VerifyCtx::new(ego_meas, &v.params, env);
        let gap_ok = verify_core(
            &InputTraj::full_brake(),
            v.consensus.a_min_forced,
            std::slice::from_ref(&info),
            &[],
            &ctx,
        )
        .map(|r| r.safe)
        .unwrap_or(false);
        let tracker = v.trackers.get_mut(&id).expect("tracked");
        tracker.update(o.prev_a, gap_ok);
    }

    // --- verification views of the preceding vehicles ------------------------
    let mut preds: Vec<PrecedingInfo> = Vec::with_capacity(ahead.len());
    for o in &ahead {
        let true_rear = o.state.s - o.length;
        let rel_s = interval_measure(true_rear - me.state.s, sc.noise.rel_pos, &mut v.rng_noise);
        let rel_v = interval_measure(o.state.v - me.state.v, sc.noise.rel_vel, &mut v.rng_noise);
        let rear_iv = ego_meas.s.add(rel_s);
        let v_iv = clamp_speed_interval(ego_meas.v.add(rel_v));
        let known = v.known_params.get(&o.id).copied();
        let params = known.unwrap_or(VehicleParams::worst_case());
        let a_min_assumed = v
            .consensus
            .assumed_limit_for(o.id)
            .or(known.map(|p| p.a_dec))
            .unwrap_or(VehicleParams::worst_case().a_dec);
        preds.push(PrecedingInfo {
            id: o.id,
            state: StateInterval {
                s: rear_iv.offset(params.length),
                v: v_iv,
            },
            params,
            a_min_assumed,
            cutin: v.trackers.get(&o.id).and_then(|tr| tr.window(t, env)),
        });
    }

    // --- coupling and broadcasts ---------------------------------------------
    let (mut outbox, coupling_events) = coupling_step(
        v.id,
        t,
        direct_pred,
        direct_succ,
        &v.mailbox,
        &mut v.coupling,
        &v.params,
        v.consensus.a_min_forced,
        t - env.dt_p,
    );
    for nl in coupling_events.new_leaders {
        v.known_params.insert(nl.id, nl.params);
        v.consensus.init_leader(nl.id, nl.braking_limit, nl.label);
    }
    for o in &ahead {
        if let Some(p) = v.mailbox.params_from(o.id) {
            v.known_params.insert(o.id, p);
        }
    }
    outbox.push(Envelope {
        sender: v.id,
        send_time: t,
        recipient: Recipient::Backward,
        payload: Payload::ParamsBroadcast(v.params),
    });

    // cached alerts constrain the ego even if the alerting vehicle has
    // meanwhile left sensor range; the positions are absolute
    let coll_positions: Vec<f64> = v
        .mailbox
        .senders()
        .into_iter()
        .map(|sender| collision_pos(&v.mailbox, sender))
        .filter(|p| p.is_finite())
        .collect();

    // --- vehicle elimination ---------------------------------------------------
    let x_infos: &[PrecedingInfo] = match direct_pred {
        Some(dp) if v.coupling.leaders.contains(&dp) => &preds[..1],
        _ => &preds[..],
    };

    let ctx = VerifyCtx::new(ego_meas, &v.params, env);

    // --- consensus ---------------------------------------------------------------
    let a_trans = if sc.consensus {
        let inputs = ConsensusInputs {
            t,
            preceding: x_infos,
            leaders: &v.coupling.leaders,
            followers: &v.coupling.followers,
            mailbox: &v.mailbox,
            coll_positions: &coll_positions,
            last_applied_a: me.prev_a,
            a_dec_phys: v.params.a_dec,
        };
        let out = safe_consensus(&mut v.consensus, v.id, &mut v.entity, &inputs, &ctx)?;
        outbox.extend(out.outbox);
        out.a_trans_bound
    } else {
        f64::INFINITY
    };
    let transition_active = v.consensus.transition.active;

    // --- recapturing over active cut-ins -------------------------------------------
    let mut a_recap = f64::INFINITY;
    let mut recap_engaged = false;
    for info in x_infos.iter().filter(|i| i.cutin.is_some()) {
        let window = info.cutin.expect("filtered");
        let plan = recap(
            info,
            window.remaining,
            me.prev_a,
            v.consensus.a_min_forced,
            &ctx,
        )?;
        if plan.feasible {
            a_recap = a_recap.min(plan.inputs[0]);
            recap_engaged = true;
        }
    }

    // --- nominal input and verification ----------------------------------------------
    let nominal = if v.full_brake {
        f64::NEG_INFINITY
    } else {
        nominal_cacc(&ego_meas, x_infos, v.target_speed, &sc.gains, &v.params)
    };
    let mut a_d = nominal.min(a_recap).min(a_trans);

    let res = verify(a_d, v.consensus.a_min_forced, x_infos, &coll_positions, &ctx)?;
    let mut fail_safe_engaged = false;
    let mut emergency = false;
    if !res.safe {
        fail_safe_engaged = true;
        let cfg = FailSafeConfig::for_state(&ego_meas, &v.params, v.consensus.a_min_forced, env);
        match fail_safe(&res.limits, v.consensus.a_min_forced, &ctx, &cfg)? {
            Some(a) => a_d = a,
            None => {
                // no safe input exists: predict the collision position,
                // alert the followers, and brake as hard as possible
                let up = upper_pos(
                    &ego_meas,
                    &InputTraj::full_brake(),
                    &BoundCtx::new(&v.params, v.consensus.a_min_forced, env),
                )?;
                let horizon = up.stop_index().max(res.limits.len()) + 1;
                let k_coll = (0..=horizon)
                    .find(|&k| up.at(k + 1) >= res.limits.at(k))
                    .unwrap_or(0);
                let s_coll = up.at(k_coll) - v.params.length;
                outbox.push(Envelope {
                    sender: v.id,
                    send_time: t,
                    recipient: Recipient::Backward,
                    payload: Payload::CollisionAlert { s_coll },
                });
                v.alert_outstanding = true;
                a_d = f64::NEG_INFINITY;
                emergency = true;
            }
        }
    }
    if !emergency && v.alert_outstanding {
        outbox.push(Envelope {
            sender: v.id,
            send_time: t,
            recipient: Recipient::Backward,
            payload: Payload::AlertWithdraw,
        });
        v.alert_outstanding = false;
    }

    // --- safety-predicate bookkeeping ------------------------------------------------
    let safe_dist_ok = pairwise_predicate(v, &preds, &ctx, emergency)?;
    let safe_dist = if sc.log_safe_distance {
        match preds.first() {
            Some(p) => safe_distance(p, v.consensus.a_min_forced, &ctx)?,
            None => f64::NAN,
        }
    } else {
        f64::NAN
    };

    Ok(PlanResult {
        a_d,
        fail_safe: fail_safe_engaged,
        recap: recap_engaged,
        transition: transition_active,
        safe_dist_ok,
        safe_dist,
        outbox,
    })
}

/// The per-pair safety predicate: a full brake verifies against every
/// observed predecessor without an open clearing window, or the vehicle is in
/// the emergency state (maximum braking plus alert).
fn pairwise_predicate(
    v: &VehicleRuntime,
    preds: &[PrecedingInfo],
    ctx: &VerifyCtx,
    emergency: bool,
) -> Result<bool, SimError> {
    if emergency {
        return Ok(true);
    }
    let ego_ctx = BoundCtx::new(ctx.params, v.consensus.a_min_forced, ctx.env);
    let mut ego_fb: Option<BoundTrajectory> = None;
    for pred in preds.iter().filter(|p| p.cutin.is_none()) {
        if ego_fb.is_none() {
            ego_fb = Some(upper_pos(&ctx.ego_meas, &InputTraj::full_brake(), &ego_ctx)?);
        }
        let ego = ego_fb.as_ref().expect("just set");
        let pred_ctx = BoundCtx::new(&pred.params, pred.a_min_assumed, ctx.env);
        let lower = lower_pos(&pred.state, &InputTraj::full_brake(), &pred_ctx)?;
        let horizon = ego.stop_index().max(lower.stop_index()) + 1;
        if !(0..=horizon).all(|k| ego.at(k + 1) < lower.at(k)) {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Formats a float with nine significant digits; the CSV determinism
/// guarantee depends on this being a pure function of the value.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return String::new();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-3..=8).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

impl RunOutput {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(
            "step,t,vehicle,s,v,a_d,a_applied,a_min_forced,fail_safe,recap,\
             transition,alerts,safe_dist_ok,safe_distance\n",
        );
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                fmt_sig(r.t),
                r.vehicle,
                fmt_sig(r.s),
                fmt_sig(r.v),
                fmt_sig(r.a_d),
                fmt_sig(r.a_applied),
                fmt_sig(r.a_min_forced),
                r.fail_safe as u8,
                r.recap as u8,
                r.transition as u8,
                r.alerts,
                r.safe_dist_ok as u8,
                fmt_sig(r.safe_distance),
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("steps_run,{}\n", s.steps_run));
        out.push_str(&format!("collisions,{}\n", s.collisions));
        out.push_str(&format!(
            "first_collision_step,{}\n",
            s.first_collision_step
                .map(|x| x.to_string())
                .unwrap_or_else(|| "-1".to_string())
        ));
        out.push_str(&format!(
            "collision_pair,{}\n",
            s.collision_pair
                .as_ref()
                .map(|(a, b)| format!("{a}->{b}"))
                .unwrap_or_else(|| "-".to_string())
        ));
        out.push_str(&format!(
            "convergence_time,{}\n",
            s.convergence_time
                .map(fmt_sig)
                .unwrap_or_else(|| "-1".to_string())
        ));
        out.push_str(&format!("planning_p99_ms,{}\n", fmt_sig(s.planning_p99_ms)));
        out.push_str(&format!("planning_max_ms,{}\n", fmt_sig(s.planning_max_ms)));
        for ((f, l), gap) in &s.min_gaps {
            out.push_str(&format!("min_gap:{f}->{l},{}\n", fmt_sig(*gap)));
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("seq,sender,kind,send_step,deliver_step\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},v{},{},{},{}\n",
                r.seq,
                r.sender.0,
                r.kind,
                r.send_step,
                r.deliver_step
                    .map(|x| x.to_string())
                    .unwrap_or_else(|| "DROPPED".to_string())
            ));
        }
        out
    }

    pub fn write_all(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("steps.csv"), self.steps_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("channel_trace.csv"), self.trace_csv())?;
        Ok(())
    }
}
