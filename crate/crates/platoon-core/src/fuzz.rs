//! Randomized invariant suites: position-bound enclosure, verification
//! soundness under adversarial rollouts, fail-safe minimality, and braking
//! limit invariance of the consensus protocol under a lossy channel.
//!
//! Each case derives its own seed from the suite seed, so a failing case can
//! be replayed in isolation by running one iteration at the reported seed.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::consensus::{safe_consensus, ConsensusEntity, ConsensusInputs, ConsensusState};
use crate::controllers::{fail_safe, FailSafeConfig};
use crate::dynamics::{lower_pos, simulate_span, upper_pos, BoundCtx, InputTraj};
use crate::network::{Channel, ChannelConfig, Envelope, MailboxView, Recipient};
use crate::types::{
    derive_rng, interval_measure, EnvParams, Interval, StateInterval, VehicleId, VehicleParams,
    VehicleState,
};
use crate::verify::{verify, PrecedingInfo, VerifyCtx};

/// Steps per fuzzed protocol schedule in the consensus suite.
const SCHEDULE_STEPS: u64 = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Monotonicity,
    VerifySoundness,
    ConsensusInvariance,
    FailsafeMinimality,
}

impl Suite {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "monotonicity" => Some(Self::Monotonicity),
            "verify-soundness" => Some(Self::VerifySoundness),
            "consensus-invariance" => Some(Self::ConsensusInvariance),
            "failsafe-minimality" => Some(Self::FailsafeMinimality),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Monotonicity => "monotonicity",
            Self::VerifySoundness => "verify-soundness",
            Self::ConsensusInvariance => "consensus-invariance",
            Self::FailsafeMinimality => "failsafe-minimality",
        }
    }

    pub fn all() -> [Suite; 4] {
        [
            Self::Monotonicity,
            Self::VerifySoundness,
            Self::ConsensusInvariance,
            Self::FailsafeMinimality,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub suite: Suite,
    /// Cases for most suites; total protocol steps for the consensus suite.
    pub iterations: u64,
    pub seed: u64,
    /// Channel fault severity for the consensus suite.
    pub drop_prob: f64,
    pub delay_max: u64,
    /// Adversarial rollouts per safe verdict in the soundness suite.
    pub rollouts: u64,
    pub threads: usize,
    /// Harness self-test: deliberately offsets the checked bound so a healthy
    /// detector must report violations.
    pub break_bound: bool,
}

impl FuzzConfig {
    pub fn new(suite: Suite, iterations: u64, seed: u64) -> Self {
        Self {
            suite,
            iterations,
            seed,
            drop_prob: 0.3,
            delay_max: 10,
            rollouts: 200,
            threads: 1,
            break_bound: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Violation {
    pub case_seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: u64,
    pub violations: Vec<Violation>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn run_suite(cfg: &FuzzConfig) -> SuiteReport {
    let case_count = match cfg.suite {
        Suite::ConsensusInvariance => cfg.iterations.div_ceil(SCHEDULE_STEPS),
        _ => cfg.iterations,
    };
    let run_case = |case: u64| -> Vec<Violation> {
        let case_seed = cfg.seed.wrapping_add(case);
        match cfg.suite {
            Suite::Monotonicity => monotonicity_case(case_seed, cfg.break_bound),
            Suite::VerifySoundness => soundness_case(case_seed, cfg.rollouts),
            Suite::FailsafeMinimality => minimality_case(case_seed),
            Suite::ConsensusInvariance => {
                let steps = SCHEDULE_STEPS.min(cfg.iterations - case * SCHEDULE_STEPS);
                consensus_case(case_seed, steps, cfg.drop_prob, cfg.delay_max)
            }
        }
    };

    let mut all: Vec<Violation> = Vec::new();
    let threads = cfg.threads.max(1);
    if threads == 1 || case_count <= 1 {
        for case in 0..case_count {
            all.extend(run_case(case));
        }
    } else {
        let mut results: Vec<Vec<Violation>> = vec![Vec::new(); case_count as usize];
        let chunk = (case_count as usize).div_ceil(threads);
        std::thread::scope(|scope| {
            for (w, slot) in results.chunks_mut(chunk).enumerate() {
                let run_case = &run_case;
                scope.spawn(move || {
                    for (j, out) in slot.iter_mut().enumerate() {
                        *out = run_case((w * chunk + j) as u64);
                    }
                });
            }
        });
        for r in results {
            all.extend(r);
        }
    }
    SuiteReport {
        suite: cfg.suite,
        cases: case_count,
        violations: all,
    }
}

// ---------------------------------------------------------------------------
// Shared generators
// ---------------------------------------------------------------------------

fn random_params(rng: &mut ChaCha8Rng) -> VehicleParams {
    if rng.gen_bool(0.5) {
        let presets = crate::types::presets::all();
        presets[rng.gen_range(0..presets.len())]
    } else {
        VehicleParams {
            a_dec: rng.gen_range(-10.0..-3.0),
            a_acc: rng.gen_range(1.0..4.0),
            v_max: rng.gen_range(20.0..40.0),
            mass: rng.gen_range(1_500.0..25_000.0),
            drag_coeff: rng.gen_range(0.25..1.0),
            frontal_area: rng.gen_range(1.5..9.0),
            length: rng.gen_range(4.0..16.0),
        }
    }
}

/// Piecewise-linear incline profile with knots inside the admissible bounds.
fn random_incline(rng: &mut ChaCha8Rng, env: &EnvParams) -> Vec<(f64, f64)> {
    let mut knots = Vec::new();
    let mut s = -200.0;
    while s < 3_000.0 {
        knots.push((s, rng.gen_range(env.alpha.lo..=env.alpha.hi)));
        s += rng.gen_range(100.0..300.0);
    }
    knots
}

fn alpha_from(knots: &[(f64, f64)], s: f64) -> f64 {
    if s <= knots[0].0 {
        return knots[0].1;
    }
    for pair in knots.windows(2) {
        if s <= pair[1].0 {
            let f = (s - pair[0].0) / (pair[1].0 - pair[0].0);
            return pair[0].1 + f * (pair[1].1 - pair[0].1);
        }
    }
    knots[knots.len() - 1].1
}

/// Random non-increasing slot input ending in a full brake.
fn random_non_increasing_input(rng: &mut ChaCha8Rng, a_start_max: f64) -> InputTraj {
    let mut slots = Vec::new();
    let mut a = rng.gen_range(-1.0..a_start_max);
    let n = rng.gen_range(5..60);
    for _ in 0..n {
        slots.push(a);
        a -= rng.gen_range(0.0..0.5);
    }
    InputTraj::from_slots(slots, f64::NEG_INFINITY)
}

// ---------------------------------------------------------------------------
// Suite: monotonicity
// ---------------------------------------------------------------------------

/// One enclosure trial: a randomized ground-truth trajectory must stay inside
/// the lower/upper bound trajectories computed from its measurement.
fn monotonicity_case(case_seed: u64, break_bound: bool) -> Vec<Violation> {
    let mut rng = derive_rng(case_seed, 0xA0);
    let env = EnvParams::default_params();
    let params = random_params(&mut rng);
    let a_dec_eff = rng.gen_range(params.a_dec..(-1.5f64).min(params.a_dec + 0.5));
    let s0 = rng.gen_range(0.0..50.0);
    let v0 = rng.gen_range(0.0..params.v_max);
    let meas = StateInterval {
        s: interval_measure(s0, rng.gen_range(0.0..0.4), &mut rng),
        v: interval_measure(v0, rng.gen_range(0.0..0.1), &mut rng),
    };
    let knots = random_incline(&mut rng, &env);
    let rho = rng.gen_range(env.rho.lo..=env.rho.hi);
    let v_wind = rng.gen_range(env.v_wind.lo..=env.v_wind.hi);
    let input = random_non_increasing_input(&mut rng, params.a_acc.min(2.0));

    let ctx = BoundCtx::new(&params, a_dec_eff, &env);
    let lower = match lower_pos(&meas, &input, &ctx) {
        Ok(t) => t,
        Err(e) => return vec![fail(case_seed, format!("lower bound: {e}"))],
    };
    let upper = match upper_pos(&meas, &input, &ctx) {
        Ok(t) => t,
        Err(e) => return vec![fail(case_seed, format!("upper bound: {e}"))],
    };
    // a sound lower bound must sit slightly high to trip the self-test
    let offset = if break_bound { 0.5 } else { 0.0 };

    let alpha_at = |s: f64| alpha_from(&knots, s);
    let horizon = lower.stop_index().max(upper.stop_index()) + 5;
    let mut state = VehicleState::new(s0, v0);
    let mut violations = Vec::new();
    for k in 0..=horizon {
        let rear = state.s - params.length;
        if lower.at(k) + offset > rear + 1e-9 {
            violations.push(fail(
                case_seed,
                format!(
                    "lower bound {:.6} above true rear {rear:.6} at k={k}",
                    lower.at(k) + offset
                ),
            ));
            break;
        }
        if state.s > upper.at(k) + 1e-9 {
            violations.push(fail(
                case_seed,
                format!(
                    "true front {:.6} above upper bound {:.6} at k={k}",
                    state.s,
                    upper.at(k)
                ),
            ));
            break;
        }
        let w = rng.gen_range(env.w.lo..=env.w.hi);
        state = simulate_span(
            &state,
            input.slot(k),
            w,
            &params,
            a_dec_eff,
            env.g,
            rho,
            v_wind,
            &alpha_at,
            env.dt_p,
            crate::dynamics::SUBSTEPS_PER_GRID,
        );
    }
    violations
}

// ---------------------------------------------------------------------------
// Suite: verify soundness
// ---------------------------------------------------------------------------

struct SoundnessSetup {
    env: EnvParams,
    ego_params: VehicleParams,
    a_min_ego: f64,
    ego_meas: StateInterval,
    a_d: f64,
    preds: Vec<PredSetup>,
}

struct PredSetup {
    info: PrecedingInfo,
    /// Ground-truth vehicle realizing the assumption.
    true_params: VehicleParams,
    true_enforced: f64,
}

/// Draws configurations until `verify` returns a safe verdict.
fn generate_safe_case(rng: &mut ChaCha8Rng) -> Option<SoundnessSetup> {
    let env = EnvParams::default_params();
    'attempt: for _ in 0..60 {
        let ego_params = random_params(rng);
        let a_min_ego = rng.gen_range(ego_params.a_dec..(-2.0f64).min(ego_params.a_dec + 0.5));
        let v0 = rng.gen_range(2.0..ego_params.v_max * 0.8);
        let ego_truth = VehicleState::new(0.0, v0);
        let ego_meas = StateInterval {
            s: interval_measure(ego_truth.s, 0.4, rng),
            v: interval_measure(ego_truth.v, 0.1, rng),
        };
        let n_preds = rng.gen_range(1..=3usize);
        let mut preds = Vec::new();
        let mut front_so_far = 0.0f64;
        for i in 0..n_preds {
            let true_params = random_params(rng);
            let gap = rng.gen_range(5.0..120.0);
            let rear = front_so_far + gap;
            front_so_far = rear + true_params.length;
            let true_v = rng.gen_range(0.0..(25.0f64).min(true_params.v_max));
            // half the predecessors communicated their parameters, the rest
            // are assumed worst case
            let communicated = rng.gen_bool(0.5);
            let (assumed_params, a_min_assumed, true_enforced) = if communicated {
                let assumed = rng.gen_range(true_params.a_dec..-1.0);
                let enforced = rng.gen_range(assumed..(-0.5f64).min(assumed + 0.25));
                (true_params, assumed, enforced)
            } else {
                let wc = VehicleParams::worst_case();
                let enforced = rng.gen_range(true_params.a_dec..-0.5);
                (wc, wc.a_dec, enforced)
            };
            let rel_s = interval_measure(rear - ego_truth.s, 0.2, rng);
            let rel_v = interval_measure(true_v - ego_truth.v, 0.1, rng);
            let rear_iv = ego_meas.s.add(rel_s);
            let v_iv = ego_meas.v.add(rel_v);
            let v_iv = Interval::new(v_iv.lo.max(0.0), v_iv.hi.max(0.0));
            preds.push(PredSetup {
                info: PrecedingInfo {
                    id: VehicleId(i + 1),
                    state: StateInterval {
                        s: rear_iv.offset(assumed_params.length),
                        v: v_iv,
                    },
                    params: assumed_params,
                    a_min_assumed,
                    cutin: None,
                },
                true_params,
                true_enforced,
            });
        }
        let a_d = rng.gen_range(-4.0..ego_params.a_acc);
        let infos: Vec<PrecedingInfo> = preds.iter().map(|p| p.info.clone()).collect();
        let ctx = VerifyCtx::new(ego_meas, &ego_params, &env);
        match verify(a_d, a_min_ego, &infos, &[], &ctx) {
            Ok(res) if res.safe => {
                return Some(SoundnessSetup {
                    env,
                    ego_params,
                    a_min_ego,
                    ego_meas,
                    a_d,
                    preds,
                })
            }
            _ => continue 'attempt,
        }
    }
    None
}

/// One safe verdict stress-tested by adversarial rollouts: the ego applies
/// the verified input for one interval and then brakes fully, while the
/// predecessors do anything their dynamics admit.
fn soundness_case(case_seed: u64, rollouts: u64) -> Vec<Violation> {
    let mut rng = derive_rng(case_seed, 0xB0);
    let Some(setup) = generate_safe_case(&mut rng) else {
        return vec![fail(case_seed, "could not generate a safe case".into())];
    };
    let env = &setup.env;
    let substeps = crate::dynamics::SUBSTEPS_PER_GRID;

    struct PredRt {
        state: VehicleState,
        input: InputTraj,
        params: VehicleParams,
        enforced: f64,
        length: f64,
    }

    for r in 0..rollouts {
        let mut rr = derive_rng(case_seed ^ 0x5eed_0000, r);
        let knots = random_incline(&mut rr, env);
        let alpha_at = |s: f64| alpha_from(&knots, s);
        let rho = rr.gen_range(env.rho.lo..=env.rho.hi);
        let v_wind = rr.gen_range(env.v_wind.lo..=env.v_wind.hi);

        // true states anywhere inside the measured intervals
        let mut ego = VehicleState::new(
            rr.gen_range(setup.ego_meas.s.lo..=setup.ego_meas.s.hi),
            rr.gen_range(setup.ego_meas.v.lo..=setup.ego_meas.v.hi)
                .clamp(0.0, setup.ego_params.v_max),
        );
        let mut preds: Vec<PredRt> = setup
            .preds
            .iter()
            .map(|p| {
                // sample the true rear inside the measured rear interval
                let rear_iv = p.info.state.s.offset(-p.info.params.length);
                let rear = rr.gen_range(rear_iv.lo..=rear_iv.hi);
                let v = rr
                    .gen_range(p.info.state.v.lo..=p.info.state.v.hi)
                    .clamp(0.0, p.true_params.v_max);
                let input = match rr.gen_range(0..3) {
                    0 => InputTraj::full_brake(),
                    1 => random_non_increasing_input(&mut rr, p.true_params.a_acc),
                    _ => {
                        // hold, then brake
                        let hold = rr.gen_range(-1.0..p.true_params.a_acc);
                        let n = rr.gen_range(1..40);
                        InputTraj::from_slots(vec![hold; n], f64::NEG_INFINITY)
                    }
                };
                PredRt {
                    state: VehicleState::new(rear + p.true_params.length, v),
                    input,
                    params: p.true_params,
                    enforced: p.true_enforced,
                    length: p.true_params.length,
                }
            })
            .collect();

        let ego_plan = InputTraj::single(setup.a_d);
        let h = env.dt_p / substeps as f64;
        for k in 0..400 {
            let w_ego = rr.gen_range(env.w.lo..=env.w.hi);
            let w_preds: Vec<f64> = preds
                .iter()
                .map(|_| rr.gen_range(env.w.lo..=env.w.hi))
                .collect();
            for _ in 0..substeps {
                ego = simulate_span(
                    &ego,
                    ego_plan.slot(k),
                    w_ego,
                    &setup.ego_params,
                    setup.a_min_ego,
                    env.g,
                    rho,
                    v_wind,
                    &alpha_at,
                    h,
                    1,
                );
                for (p, w) in preds.iter_mut().zip(&w_preds) {
                    p.state = simulate_span(
                        &p.state,
                        p.input.slot(k),
                        *w,
                        &p.params,
                        p.enforced,
                        env.g,
                        rho,
                        v_wind,
                        &alpha_at,
                        h,
                        1,
                    );
                }
                for p in &preds {
                    if ego.s > p.state.s - p.length {
                        return vec![fail(
                            case_seed,
                            format!(
                                "overlap in rollout {r} at k={k}: ego {:.4} vs rear {:.4}",
                                ego.s,
                                p.state.s - p.length
                            ),
                        )];
                    }
                }
            }
            let everyone_stopped = ego.v == 0.0 && preds.iter().all(|p| p.state.v == 0.0);
            if everyone_stopped && k > 1 {
                break;
            }
        }
    }
    Vec::new()
}

// ---------------------------------------------------------------------------
// Suite: fail-safe minimality
// ---------------------------------------------------------------------------

fn minimality_case(case_seed: u64) -> Vec<Violation> {
    let mut rng = derive_rng(case_seed, 0xC0);
    let env = EnvParams::default_params();
    let ego_params = random_params(&mut rng);
    let a_min_ego = rng.gen_range(ego_params.a_dec..(-2.0f64).min(ego_params.a_dec + 0.5));
    let v0 = rng.gen_range(2.0..ego_params.v_max * 0.8);
    let ego_meas = StateInterval {
        s: interval_measure(0.0, 0.4, &mut rng),
        v: interval_measure(v0, 0.1, &mut rng),
    };
    let n_preds = rng.gen_range(0..=2usize);
    let mut infos = Vec::new();
    let mut front = 0.0;
    for i in 0..n_preds {
        let wc = VehicleParams::worst_case();
        let rear = front + rng.gen_range(3.0..100.0);
        front = rear;
        infos.push(PrecedingInfo {
            id: VehicleId(i + 1),
            state: StateInterval {
                s: Interval::new(rear, rear + 0.6),
                v: Interval::point(rng.gen_range(0.0..20.0)),
            },
            params: wc,
            a_min_assumed: wc.a_dec,
            cutin: None,
        });
    }
    let colls: Vec<f64> = if rng.gen_bool(0.3) {
        vec![rng.gen_range(10.0..150.0)]
    } else {
        vec![]
    };
    let ctx = VerifyCtx::new(ego_meas, &ego_params, &env);
    let a_d = rng.gen_range(-2.0..ego_params.a_acc);
    let res = match verify(a_d, a_min_ego, &infos, &colls, &ctx) {
        Ok(r) => r,
        Err(e) => return vec![fail(case_seed, format!("verify: {e}"))],
    };
    let cfg = FailSafeConfig::for_state(&ego_meas, &ego_params, a_min_ego, &env);
    let outcome = match fail_safe(&res.limits, a_min_ego, &ctx, &cfg) {
        Ok(o) => o,
        Err(e) => return vec![fail(case_seed, format!("fail_safe: {e}"))],
    };
    let check = |a: f64| -> bool {
        verify(a, a_min_ego, &infos, &colls, &ctx)
            .map(|r| r.safe)
            .unwrap_or(false)
    };
    match outcome {
        Some(a) => {
            if !check(a) {
                return vec![fail(case_seed, format!("returned input {a} is unsafe"))];
            }
            let above = a + 2.0 * cfg.a_tol;
            if above <= cfg.a_search_hi && check(above) {
                return vec![fail(
                    case_seed,
                    format!("input {above} above the returned one is still safe"),
                )];
            }
        }
        None => {
            if check(cfg.a_search_lo) {
                return vec![fail(
                    case_seed,
                    "no-safe-input reported although a full brake verifies".into(),
                )];
            }
        }
    }
    Vec::new()
}

// ---------------------------------------------------------------------------
// Suite: consensus invariance
// ---------------------------------------------------------------------------

/// Entity replaying a seeded random walk, exercising candidate churn and
/// transition phases far more aggressively than a converging protocol would.
struct FuzzEntity {
    rng: ChaCha8Rng,
    value: f64,
}

impl ConsensusEntity for FuzzEntity {
    fn step(
        &mut self,
        _me: VehicleId,
        _now: f64,
        _mb: &MailboxView,
        _outbox: &mut Vec<Envelope>,
    ) -> f64 {
        self.value = (self.value + self.rng.gen_range(-0.8..0.8)).clamp(-12.0, -1.0);
        self.value
    }
    fn reset(&mut self) {}
    fn converged(&self) -> bool {
        false
    }
}

/// One fuzzed protocol schedule on a frozen kinematic platoon: the braking
/// limit a follower assumes for its leader must never exceed the leader's
/// actual enforced limit, at any step, under drops, delays, and duplication.
fn consensus_case(case_seed: u64, steps: u64, drop_prob: f64, delay_max: u64) -> Vec<Violation> {
    let mut rng = derive_rng(case_seed, 0xD0);
    let env = EnvParams::default_params();
    let n = rng.gen_range(3..=6usize);

    // front-most first chain
    let mut params: Vec<VehicleParams> = Vec::new();
    let mut fronts: Vec<f64> = Vec::new();
    let mut velocities: Vec<f64> = Vec::new();
    let mut front = 1_000.0;
    for i in 0..n {
        let p = random_params(&mut rng);
        if i > 0 {
            front -= params[i - 1].length + rng.gen_range(10.0..150.0);
        }
        params.push(p);
        fronts.push(front);
        velocities.push(rng.gen_range(3.0..20.0));
    }

    let mut states: Vec<ConsensusState> =
        params.iter().map(|p| ConsensusState::new(p.a_dec)).collect();
    let mut entities: Vec<FuzzEntity> = (0..n)
        .map(|i| FuzzEntity {
            rng: derive_rng(case_seed ^ 0xE11, i as u64),
            value: params[i].a_dec,
        })
        .collect();
    let mut mailboxes: Vec<MailboxView> = (0..n).map(|_| MailboxView::new()).collect();

    // pre-coupled chain: vehicle i follows i-1; leader limits start at the
    // leaders' true initial limits, as the coupling handshake would seed them
    let mut leaders: Vec<BTreeSet<VehicleId>> = vec![BTreeSet::new(); n];
    let mut followers: Vec<BTreeSet<VehicleId>> = vec![BTreeSet::new(); n];
    for i in 1..n {
        leaders[i].insert(VehicleId(i - 1));
        followers[i - 1].insert(VehicleId(i));
        let initial = states[i - 1].a_min_forced;
        // the handshake labels its snapshot strictly before the first step
        states[i].init_leader(VehicleId(i - 1), initial, -1.0);
    }

    let channel_cfg = ChannelConfig {
        drop_prob,
        delay_min: 0,
        delay_max,
        duplicate_prob: 0.1,
    };
    let mut channel = Channel::new(channel_cfg, case_seed ^ 0xC4A);

    let mut violations = Vec::new();
    'steps: for step in 0..steps {
        let t = step as f64 * env.dt_p;
        for env_msg in channel.deliver(step) {
            match env_msg.recipient {
                Recipient::To(id) => mailboxes[id.0].ingest(env_msg),
                Recipient::Backward => {
                    let sender = env_msg.sender.0;
                    for (i, mb) in mailboxes.iter_mut().enumerate() {
                        if i > sender {
                            mb.ingest(env_msg.clone());
                        }
                    }
                }
                Recipient::AllInRange => {
                    for (i, mb) in mailboxes.iter_mut().enumerate() {
                        if VehicleId(i) != env_msg.sender {
                            mb.ingest(env_msg.clone());
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let ego_meas = StateInterval::point(VehicleState::new(fronts[i], velocities[i]));
            // the coupled direct predecessor is the only verification target
            let preceding: Vec<PrecedingInfo> = if i > 0 {
                let j = i - 1;
                vec![PrecedingInfo {
                    id: VehicleId(j),
                    state: StateInterval::point(VehicleState::new(fronts[j], velocities[j])),
                    params: params[j],
                    a_min_assumed: states[i]
                        .assumed_limit_for(VehicleId(j))
                        .expect("chain seeded"),
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
                a_dec_phys: params[i].a_dec,
            };
            let ctx = VerifyCtx::new(ego_meas, &params[i], &env);
            let out = match safe_consensus(
                &mut states[i],
                VehicleId(i),
                &mut entities[i],
                &inputs,
                &ctx,
            ) {
                Ok(o) => o,
                Err(e) => {
                    violations.push(fail(case_seed, format!("consensus step: {e}")));
                    break 'steps;
                }
            };
            for msg in out.outbox {
                channel.send(msg, step);
            }
        }
        // the invariance, checked globally at every step
        for i in 1..n {
            let assumed = states[i]
                .assumed_limit_for(VehicleId(i - 1))
                .expect("chain seeded");
            let actual = states[i - 1].a_min_forced;
            if assumed > actual + 1e-12 {
                violations.push(fail(
                    case_seed,
                    format!(
                        "step {step}: follower {i} assumes {assumed} for its \
                         leader, whose actual limit is {actual}"
                    ),
                ));
                break 'steps;
            }
        }
    }
    violations
}

fn fail(case_seed: u64, detail: String) -> Violation {
    Violation { case_seed, detail }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonicity_smoke() {
        let report = run_suite(&FuzzConfig::new(Suite::Monotonicity, 25, 11));
        assert!(report.passed(), "{:?}", report.violations.first());
    }

    #[test]
    fn broken_bound_hook_trips_the_detector() {
        let mut cfg = FuzzConfig::new(Suite::Monotonicity, 25, 11);
        cfg.break_bound = true;
        let report = run_suite(&cfg);
        assert!(!report.passed(), "self-test must report violations");
        // the reported case replays in isolation
        let case_seed = report.violations[0].case_seed;
        let mut replay = FuzzConfig::new(Suite::Monotonicity, 1, case_seed);
        replay.break_bound = true;
        assert!(!run_suite(&replay).passed());
    }

    #[test]
    fn soundness_smoke() {
        let mut cfg = FuzzConfig::new(Suite::VerifySoundness, 4, 5);
        cfg.rollouts = 10;
        let report = run_suite(&cfg);
        assert!(report.passed(), "{:?}", report.violations.first());
    }

    #[test]
    fn minimality_smoke() {
        let report = run_suite(&FuzzConfig::new(Suite::FailsafeMinimality, 40, 3));
        assert!(report.passed(), "{:?}", report.violations.first());
    }

    #[test]
    fn consensus_invariance_smoke() {
        let report = run_suite(&FuzzConfig::new(Suite::ConsensusInvariance, 500, 9));
        assert!(report.passed(), "{:?}", report.violations.first());
    }

    #[test]
    fn parallel_execution_matches_sequential() {
        let seq = FuzzConfig::new(Suite::FailsafeMinimality, 20, 17);
        let mut par = seq.clone();
        par.threads = 4;
        let a = run_suite(&seq);
        let b = run_suite(&par);
        assert_eq!(a.passed(), b.passed());
        assert_eq!(a.cases, b.cases);
    }
}
