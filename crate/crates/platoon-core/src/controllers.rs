//! Controllers: the nominal PD-based CACC, the binary-search fail-safe
//! controller, and the jerk-minimizing cut-in recapturing controller.
//!
//! The nominal controller is intentionally generic; safety never depends on
//! it. The fail-safe controller returns the least harsh input (up to a
//! configurable tolerance) that still verifies, and the recapturing
//! controller shapes a smooth, provably feasible deceleration plan for the
//! remaining clearing window after a cut-in.

use crate::dynamics::{
    bound_accel_limits, upper_pos, BoundCtx, BoundKind, HorizonError, InputTraj,
};
use crate::types::{EnvParams, StateInterval, VehicleParams};
use crate::verify::{PositionLimits, PrecedingInfo, VerifyCtx};

// ---------------------------------------------------------------------------
// Nominal CACC
// ---------------------------------------------------------------------------

/// Gains and spacing policy of the nominal controller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaccGains {
    pub k_p: f64,
    pub k_d: f64,
    /// Desired time headway to the predecessor [s].
    pub headway: f64,
    /// Standstill spacing offset [m].
    pub d_standstill: f64,
}

impl Default for CaccGains {
    fn default() -> Self {
        Self {
            k_p: 0.8,
            k_d: 1.2,
            headway: 0.3,
            d_standstill: 2.0,
        }
    }
}

/// PD vehicle-following against the nearest predecessor, or plain velocity
/// tracking when the road ahead is clear. Works on interval midpoints and
/// clamps to the vehicle's own input limits.
pub fn nominal_cacc(
    ego_meas: &StateInterval,
    preceding: &[PrecedingInfo],
    target_speed: f64,
    gains: &CaccGains,
    params: &VehicleParams,
) -> f64 {
    let v_ego = ego_meas.v.mid();
    let nearest = preceding
        .iter()
        .min_by(|a, b| a.state.s.mid().total_cmp(&b.state.s.mid()));
    let a_d = match nearest {
        Some(p) => {
            let gap = (p.state.s.mid() - p.params.length) - ego_meas.s.mid();
            let v_pred = p.state.v.mid();
            gains.k_p * (gap - gains.headway * v_ego - gains.d_standstill)
                + gains.k_d * (v_pred - v_ego)
        }
        None => gains.k_p * (target_speed - v_ego),
    };
    a_d.clamp(params.a_dec, params.a_acc)
}

// ---------------------------------------------------------------------------
// Fail-safe controller
// ---------------------------------------------------------------------------

/// Search bracket and precision of the fail-safe controller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailSafeConfig {
    /// Binary-search precision [m/s²].
    pub a_tol: f64,
    pub a_search_lo: f64,
    pub a_search_hi: f64,
}

impl FailSafeConfig {
    /// Bracket spanning everything the vehicle can physically do at its
    /// current state: a full-brake-equivalent lower end and the most
    /// optimistic engine limit as the upper end.
    pub fn for_state(
        ego_meas: &StateInterval,
        params: &VehicleParams,
        a_min_ego: f64,
        env: &EnvParams,
    ) -> Self {
        let lo = bound_accel_limits(
            BoundKind::Lower,
            env.dt_p,
            ego_meas.v,
            params,
            a_min_ego,
            env,
        )
        .a_min;
        let hi = bound_accel_limits(
            BoundKind::Upper,
            env.dt_p,
            ego_meas.v,
            params,
            a_min_ego,
            env,
        )
        .a_max;
        Self {
            a_tol: 0.05,
            a_search_lo: lo,
            a_search_hi: hi.max(lo + 1.0),
        }
    }
}

/// Anytime bisection for the least harsh safe input. Each [`step`] performs
/// one bisection iteration; [`best`] exposes the best known-safe input found
/// so far, so the search can be interrupted at any point.
///
/// [`step`]: FailSafeSearch::step
/// [`best`]: FailSafeSearch::best
pub struct FailSafeSearch<'a> {
    limits: &'a PositionLimits,
    ctx: &'a VerifyCtx<'a>,
    a_min_ego: f64,
    a_tol: f64,
    lo: f64,
    hi: f64,
    resolved: Option<Option<f64>>,
}

impl<'a> FailSafeSearch<'a> {
    pub fn new(
        limits: &'a PositionLimits,
        a_min_ego: f64,
        ctx: &'a VerifyCtx<'a>,
        cfg: &FailSafeConfig,
    ) -> Result<Self, HorizonError> {
        assert!(cfg.a_tol > 0.0 && cfg.a_search_lo < cfg.a_search_hi);
        let mut search = Self {
            limits,
            ctx,
            a_min_ego,
            a_tol: cfg.a_tol,
            lo: cfg.a_search_lo,
            hi: cfg.a_search_hi,
            resolved: None,
        };
        if search.margin(cfg.a_search_hi)? > 0.0 {
            // everything up to the top of the bracket is safe
            search.resolved = Some(Some(cfg.a_search_hi - cfg.a_tol));
        } else if search.margin(cfg.a_search_lo)? <= 0.0 {
            // even the immediate full-brake plan collides
            search.resolved = Some(None);
        }
        Ok(search)
    }

    /// Clearance of the one-interval plan `a` followed by a full brake:
    /// the smallest gap to the limit sequence across all future intervals.
    fn margin(&self, a: f64) -> Result<f64, HorizonError> {
        let ego_ctx = BoundCtx::new(self.ctx.params, self.a_min_ego, self.ctx.env)
            .with_horizon(self.ctx.horizon_cap);
        let traj = upper_pos(&self.ctx.ego_meas, &InputTraj::single(a), &ego_ctx)?;
        let horizon = traj.stop_index().max(self.limits.len()) + 1;
        let mut m = f64::INFINITY;
        for k in 0..=horizon {
            m = m.min(self.limits.at(k) - traj.at(k + 1));
        }
        Ok(m)
    }

    /// One bisection iteration. Returns `true` once the search has resolved.
    pub fn step(&mut self) -> Result<bool, HorizonError> {
        if self.resolved.is_some() {
            return Ok(true);
        }
        let mid = 0.5 * (self.lo + self.hi);
        if self.margin(mid)? > 0.0 {
            self.lo = mid;
        } else {
            self.hi = mid;
        }
        if self.hi - self.lo <= self.a_tol {
            self.resolved = Some(Some(self.lo));
        }
        Ok(self.resolved.is_some())
    }

    /// Best known-safe input so far; `None` means no safe input exists.
    pub fn best(&self) -> Option<f64> {
        match &self.resolved {
            Some(outcome) => *outcome,
            None => Some(self.lo),
        }
    }

    pub fn run(mut self) -> Result<Option<f64>, HorizonError> {
        while !self.step()? {}
        let outcome = self.resolved.expect("resolved after completion");
        #[cfg(debug_assertions)]
        if let Some(a) = outcome {
            debug_assert!(self.margin(a)? > 0.0, "returned input {a} must verify");
        }
        Ok(outcome)
    }
}

/// Least harsh input that still verifies against `limits`, or `None` when no
/// safe input exists and the collision-alert path must be taken.
pub fn fail_safe(
    limits: &PositionLimits,
    a_min_ego: f64,
    ctx: &VerifyCtx,
    cfg: &FailSafeConfig,
) -> Result<Option<f64>, HorizonError> {
    FailSafeSearch::new(limits, a_min_ego, ctx, cfg)?.run()
}

// ---------------------------------------------------------------------------
// Recapturing controller
// ---------------------------------------------------------------------------

/// Safety back-off between the planned upper bound and the cut-in vehicle's
/// lower bound [m].
const RECAP_BACKOFF: f64 = 0.05;
/// Bisection precision for the feasible-constant initialization [m/s²].
const RECAP_TOL: f64 = 0.05;
/// Planning slots per coarse group beyond the clearing window.
const COARSE_GROUP: usize = 5;
/// Number of coarse groups appended after the clearing window.
const COARSE_GROUPS: usize = 8;
const MAX_SWEEPS: usize = 10;

/// Piecewise-constant recapture plan on the planning grid. Only the first
/// input is consumed per planning step; the rest documents the feasible
/// continuation the first input was justified with.
#[derive(Clone, Debug)]
pub struct RecapPlan {
    pub inputs: Vec<f64>,
    pub feasible: bool,
    /// The bisected feasible constant the jerk smoothing started from.
    pub init_constant: f64,
}

impl RecapPlan {
    fn infeasible() -> Self {
        Self {
            inputs: Vec::new(),
            feasible: false,
            init_constant: f64::NAN,
        }
    }
}

struct RecapProblem<'a> {
    ctx: &'a VerifyCtx<'a>,
    a_min_ego: f64,
    pred_lower: crate::dynamics::BoundTrajectory,
    group_sizes: Vec<usize>,
}

impl RecapProblem<'_> {
    fn expand(&self, values: &[f64]) -> InputTraj {
        let mut slots = Vec::new();
        for (v, n) in values.iter().zip(&self.group_sizes) {
            slots.extend(std::iter::repeat_n(*v, *n));
        }
        InputTraj::from_slots(slots, f64::NEG_INFINITY)
    }

    fn feasible(&self, values: &[f64]) -> Result<bool, HorizonError> {
        let input = self.expand(values);
        if !input.is_non_increasing() {
            return Ok(false);
        }
        let ego_ctx = BoundCtx::new(self.ctx.params, self.a_min_ego, self.ctx.env)
            .with_horizon(self.ctx.horizon_cap);
        let traj = match upper_pos(&self.ctx.ego_meas, &input, &ego_ctx) {
            Ok(t) => t,
            Err(HorizonError::TooShort { .. }) => return Ok(false),
        };
        let horizon = traj.stop_index().max(self.pred_lower.stop_index()) + 1;
        Ok((0..=horizon).all(|k| traj.at(k + 1) < self.pred_lower.at(k) - RECAP_BACKOFF))
    }
}

/// Computes a recapture plan against a cut-in predecessor: piecewise-constant
/// inputs that keep the ego provably behind the cut-in vehicle's guaranteed
/// earliest rear positions, end at standstill, and spread the acceleration
/// change smoothly over the remaining clearing window.
///
/// `a_prev` is the acceleration applied in the previous step; the change from
/// it to the first slot is part of the jerk objective.
pub fn recap(
    cutin_pred: &PrecedingInfo,
    remaining_clear: f64,
    a_prev: f64,
    a_min_ego: f64,
    ctx: &VerifyCtx,
) -> Result<RecapPlan, HorizonError> {
    assert!(remaining_clear >= 0.0);
    let env = ctx.env;
    let pred_ctx = BoundCtx::new(&cutin_pred.params, cutin_pred.a_min_assumed, env)
        .with_cutin(cutin_pred.cutin)
        .with_horizon(ctx.horizon_cap);
    let pred_lower = crate::dynamics::lower_pos(&cutin_pred.state, &InputTraj::full_brake(), &pred_ctx)?;

    let n_fine = (remaining_clear / env.dt_p).ceil() as usize;
    let mut group_sizes = vec![1usize; n_fine];
    group_sizes.extend(std::iter::repeat_n(COARSE_GROUP, COARSE_GROUPS));

    let problem = RecapProblem {
        ctx,
        a_min_ego,
        pred_lower,
        group_sizes,
    };

    let cfg = FailSafeConfig::for_state(&ctx.ego_meas, ctx.params, a_min_ego, env);
    let n_groups = problem.group_sizes.len();
    let constant = |c: f64| vec![c; n_groups];

    // largest feasible constant plan, found by bisection
    if !problem.feasible(&constant(cfg.a_search_lo))? {
        return Ok(RecapPlan::infeasible());
    }
    let c_star = if problem.feasible(&constant(cfg.a_search_hi))? {
        cfg.a_search_hi
    } else {
        let mut lo = cfg.a_search_lo;
        let mut hi = cfg.a_search_hi;
        while hi - lo > RECAP_TOL {
            let mid = 0.5 * (lo + hi);
            if problem.feasible(&constant(mid))? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let mut values = constant(c_star);

    // Projected coordinate descent on the fine slots: each move takes the
    // coordinate-wise minimizer of the jerk objective, projected into the
    // non-increasing corridor and backed off toward the current value until
    // the plan stays feasible. Coarse groups carry no jerk cost and stay put.
    if n_fine >= 1 && remaining_clear > 0.0 {
        let objective = |vals: &[f64]| -> f64 {
            let mut j = ((vals[0] - a_prev) / env.dt_p).powi(2);
            for i in 0..n_fine.saturating_sub(1) {
                j += ((vals[i + 1] - vals[i]) / env.dt_p).powi(2);
            }
            j
        };
        let mut best_j = objective(&values);
        for _ in 0..MAX_SWEEPS {
            let mut moved = false;
            for i in 0..n_fine {
                let left = if i == 0 { a_prev } else { values[i - 1] };
                let target = if i + 1 < n_fine {
                    0.5 * (left + values[i + 1])
                } else {
                    left
                };
                let hi_corr = if i == 0 { cfg.a_search_hi } else { values[i - 1] };
                let lo_corr = values.get(i + 1).copied().unwrap_or(cfg.a_search_lo);
                let mut cand = target.clamp(lo_corr.min(hi_corr), hi_corr);
                let current = values[i];
                for _ in 0..4 {
                    if (cand - current).abs() < 1e-3 {
                        break;
                    }
                    let mut trial = values.clone();
                    trial[i] = cand;
                    let j = objective(&trial);
                    if j <= best_j + 1e-12 && problem.feasible(&trial)? {
                        values = trial;
                        best_j = j;
                        moved = true;
                        break;
                    }
                    cand = 0.5 * (cand + current);
                }
            }
            if !moved {
                break;
            }
        }
    }

    debug_assert!(problem.feasible(&values)?);
    let inputs = {
        let traj = problem.expand(&values);
        (0..problem.group_sizes.iter().sum::<usize>())
            .map(|k| traj.slot(k))
            .collect()
    };
    Ok(RecapPlan {
        inputs,
        feasible: true,
        init_constant: c_star,
    })
}
