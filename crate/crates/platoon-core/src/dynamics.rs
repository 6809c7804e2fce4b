//! Longitudinal vehicle dynamics: the saturated acceleration model, exact and
//! conservative acceleration-limit functions, and the guaranteed lower/upper
//! reachable-position trajectories that the online verification relies on.
//!
//! Positions are monotone in the inputs here: weaker inputs, stronger
//! disturbances toward `w_min`, and harsher limit bounds can only shrink the
//! reachable positions. That property is what lets two single trajectories
//! (one per direction) enclose every admissible behavior.

use thiserror::Error;

use crate::types::{
    Ambient, CutinWindow, EnvParams, Interval, StateInterval, VehicleParams, VehicleState,
};

/// Default number of integration substeps per planning interval.
pub const SUBSTEPS_PER_GRID: usize = 10;
/// Default cap on the number of planning intervals in a bound trajectory.
pub const DEFAULT_HORIZON_CAP: usize = 3000;
/// Velocity-clamp event times are bisected to this resolution [s].
const EVENT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum HorizonError {
    /// The vehicle did not provably reach standstill within the horizon cap.
    #[error("velocity did not reach zero within {cap} planning intervals")]
    TooShort { cap: usize },
}

// ---------------------------------------------------------------------------
// Acceleration limits
// ---------------------------------------------------------------------------

/// Overall acceleration limits at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccelLimits {
    pub a_min: f64,
    pub a_max: f64,
}

impl AccelLimits {
    fn assert_consistent(&self) {
        debug_assert!(
            self.a_min <= self.a_max,
            "inconsistent limits: a_min {} > a_max {}",
            self.a_min,
            self.a_max
        );
    }
}

/// Which side of the reachable-position enclosure a computation serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundKind {
    Lower,
    Upper,
}

/// Drag deceleration: `-(1/2m)·ρ·c·A·(v + v_wind)²`. Always nonpositive.
pub fn a_drag(v: f64, rho: f64, drag_coeff: f64, area: f64, mass: f64, v_wind: f64) -> f64 {
    let rel = v + v_wind;
    -(0.5 / mass) * rho * drag_coeff * area * rel * rel
}

/// Incline acceleration: `-g·sin(α)`. Negative on an ascent.
pub fn a_incline(alpha: f64, g: f64) -> f64 {
    -g * alpha.sin()
}

/// Exact overall acceleration limits at one state, with the braking limit
/// parametrized by `a_dec_eff` (the enforced limit, not necessarily the
/// physical one). An open cut-in window replaces the whole lower limit with
/// the assumed cut-in braking limit.
pub fn accel_limits(
    state: &VehicleState,
    params: &VehicleParams,
    a_dec_eff: f64,
    ambient: &Ambient,
    g: f64,
    cutin: Option<&CutinWindow>,
) -> AccelLimits {
    let shared = a_incline(ambient.alpha, g)
        + a_drag(
            state.v,
            ambient.rho,
            params.drag_coeff,
            params.frontal_area,
            params.mass,
            ambient.v_wind,
        );
    let a_min = match cutin {
        Some(w) => w.limit,
        None => a_dec_eff + shared,
    };
    let limits = AccelLimits {
        a_min,
        a_max: params.a_acc + shared,
    };
    limits.assert_consistent();
    limits
}

/// Precomputed state-independent pieces of the limit bounds for one
/// (vehicle, braking limit, environment, step size) combination. The
/// per-velocity evaluation runs inside integrator stages, so everything that
/// does not depend on the velocity is hoisted here.
#[derive(Clone, Copy, Debug)]
pub struct LimitBoundEval {
    kind: BoundKind,
    dt_step: f64,
    a_dec_eff: f64,
    a_acc: f64,
    v_max: f64,
    vw_lo: f64,
    vw_hi: f64,
    w_lo: f64,
    w_hi: f64,
    inc_lo: f64,
    inc_hi: f64,
    coef_rho_hi: f64,
    coef_rho_lo: f64,
    drag_cap: f64,
}

impl LimitBoundEval {
    pub fn new(
        kind: BoundKind,
        dt_step: f64,
        params: &VehicleParams,
        a_dec_eff: f64,
        env: &EnvParams,
    ) -> Self {
        debug_assert!(dt_step >= 0.0);
        let g = env.g;
        let coef = 0.5 / params.mass * params.drag_coeff * params.frontal_area;
        let vw_abs = env.v_wind.lo.abs().max(env.v_wind.hi.abs());
        Self {
            kind,
            dt_step,
            a_dec_eff,
            a_acc: params.a_acc,
            v_max: params.v_max,
            vw_lo: env.v_wind.lo,
            vw_hi: env.v_wind.hi,
            w_lo: env.w.lo,
            w_hi: env.w.hi,
            inc_lo: -g * env.alpha.hi.sin(),
            inc_hi: -g * env.alpha.lo.sin(),
            coef_rho_hi: coef * env.rho.hi,
            coef_rho_lo: coef * env.rho.lo,
            drag_cap: coef * env.rho.hi * (params.v_max + vw_abs) * (params.v_max + vw_abs),
        }
    }

    /// Limit bounds valid over the next `dt_step` for any state reachable
    /// from the velocity interval, evaluated at the interval corners the
    /// bound direction requires.
    pub fn eval(&self, v_iv: Interval) -> AccelLimits {
        let acc_crude = self.a_acc + self.inc_hi + self.w_hi;
        let dec_crude = self.a_dec_eff + self.inc_lo - self.drag_cap + self.w_lo;
        let v_lo = (v_iv.lo + self.dt_step * dec_crude.min(0.0)).max(0.0);
        let v_hi = (v_iv.hi + self.dt_step * acc_crude.max(0.0)).min(self.v_max);

        let air_lo = v_lo + self.vw_lo;
        let air_hi = v_hi + self.vw_hi;
        let sq_hi = (air_lo * air_lo).max(air_hi * air_hi);
        let sq_lo = if air_lo <= 0.0 && 0.0 <= air_hi {
            0.0
        } else {
            (air_lo * air_lo).min(air_hi * air_hi)
        };

        let limits = match self.kind {
            BoundKind::Lower => {
                let shared = self.inc_lo - self.coef_rho_hi * sq_hi;
                AccelLimits {
                    a_min: self.a_dec_eff + shared,
                    a_max: self.a_acc + shared,
                }
            }
            BoundKind::Upper => {
                let shared = self.inc_hi - self.coef_rho_lo * sq_lo;
                AccelLimits {
                    a_min: self.a_dec_eff + shared,
                    a_max: self.a_acc + shared,
                }
            }
        };
        limits.assert_consistent();
        limits
    }
}

/// Conservative physical acceleration-limit bounds that stay valid for the
/// whole next `dt_step`, for any admissible environment values and any state
/// the vehicle can reach from the velocity interval `v_iv` within `dt_step`.
///
/// The construction evaluates the interval corners of incline, air density,
/// wind, and the reachable-velocity window, picking the corner the bound
/// direction requires.
pub fn bound_accel_limits(
    kind: BoundKind,
    dt_step: f64,
    v_iv: Interval,
    params: &VehicleParams,
    a_dec_eff: f64,
    env: &EnvParams,
) -> AccelLimits {
    LimitBoundEval::new(kind, dt_step, params, a_dec_eff, env).eval(v_iv)
}

// ---------------------------------------------------------------------------
// Input trajectories
// ---------------------------------------------------------------------------

/// Piecewise-constant desired-acceleration trajectory on the planning grid:
/// slot `k` covers `[k·Δt_p, (k+1)·Δt_p)`, and `tail` applies beyond the last
/// slot (usually full brake, `-∞`).
#[derive(Clone, Debug, PartialEq)]
pub struct InputTraj {
    slots: Vec<f64>,
    tail: f64,
}

impl InputTraj {
    /// Full brake from the start.
    pub fn full_brake() -> Self {
        Self {
            slots: Vec::new(),
            tail: f64::NEG_INFINITY,
        }
    }

    /// `a` for the first planning interval, full brake afterwards. This is
    /// the plan shape every per-step verification checks.
    pub fn single(a: f64) -> Self {
        Self {
            slots: vec![a],
            tail: f64::NEG_INFINITY,
        }
    }

    pub fn from_slots(slots: Vec<f64>, tail: f64) -> Self {
        Self { slots, tail }
    }

    pub fn slot(&self, k: usize) -> f64 {
        self.slots.get(k).copied().unwrap_or(self.tail)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// The input shifted one planning interval earlier: `a'(t) = a(t + Δt_p)`.
    /// For a non-increasing input this lower-bounds the original pointwise.
    pub fn shifted(&self) -> Self {
        let slots = if self.slots.is_empty() {
            Vec::new()
        } else {
            self.slots[1..].to_vec()
        };
        Self {
            slots,
            tail: self.tail,
        }
    }

    pub fn is_non_increasing(&self) -> bool {
        let mut prev = f64::INFINITY;
        for &a in self.slots.iter().chain(std::iter::once(&self.tail)) {
            if a > prev {
                return false;
            }
            prev = a;
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Bound trajectories
// ---------------------------------------------------------------------------

/// Guaranteed reachable-position bounds sampled at planning grid points.
/// The sequence is conceptually infinite; it is stored up to the index at
/// which the vehicle has provably stopped and is constant beyond it.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrajectory {
    positions: Vec<f64>,
}

impl BoundTrajectory {
    /// Constant sequence (already-stopped vehicle).
    pub fn constant(pos: f64) -> Self {
        Self {
            positions: vec![pos],
        }
    }

    /// Position bound at grid index `k` (constant past the stop index).
    pub fn at(&self, k: usize) -> f64 {
        let idx = k.min(self.positions.len() - 1);
        self.positions[idx]
    }

    /// First grid index at which the vehicle has provably stopped.
    pub fn stop_index(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn final_pos(&self) -> f64 {
        self.positions[self.positions.len() - 1]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    fn offset(mut self, d: f64) -> Self {
        for p in &mut self.positions {
            *p += d;
        }
        self
    }
}

// ---------------------------------------------------------------------------
// Saturated-model integration
// ---------------------------------------------------------------------------

/// One classical RK4 step of `ṡ = v`, `v̇ = rhs(s, v)`.
fn rk4_step(s: f64, v: f64, h: f64, rhs: &impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let k1v = rhs(s, v);
    let k1s = v;
    let k2v = rhs(s + 0.5 * h * k1s, v + 0.5 * h * k1v);
    let k2s = v + 0.5 * h * k1v;
    let k3v = rhs(s + 0.5 * h * k2s, v + 0.5 * h * k2v);
    let k3s = v + 0.5 * h * k2v;
    let k4v = rhs(s + h * k3s, v + h * k3v);
    let k4s = v + h * k3v;
    (
        s + h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s),
        v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )
}

/// Integrates one substep of the saturated model with event-handled clamping
/// at `v = 0` and `v = v_max`.
///
/// `hold_low`/`hold_high` are the raw standstill/top-clamp conditions
/// (`a_d + w ≤ 0` resp. `≥ 0`), which by the model take priority over the
/// clamped acceleration.
fn integrate_substep(
    mut s: f64,
    mut v: f64,
    h: f64,
    v_max: f64,
    hold_low: bool,
    hold_high: bool,
    rhs: &impl Fn(f64, f64) -> f64,
) -> (f64, f64) {
    v = v.clamp(0.0, v_max);
    if v <= 0.0 && hold_low {
        return (s, 0.0);
    }
    if v >= v_max && hold_high {
        return (s + v_max * h, v_max);
    }
    let (s1, v1) = rk4_step(s, v, h, rhs);
    if (0.0..=v_max).contains(&v1) {
        return (s1, v1);
    }
    // The velocity crossed a clamp inside the substep: bisect the crossing
    // time, then hold the clamp for the remainder (the frozen acceleration
    // keeps pointing into it for the rest of the substep).
    let downward = v1 < 0.0;
    let mut lo = 0.0f64;
    let mut hi = h;
    while hi - lo > EVENT_TOL {
        let mid = 0.5 * (lo + hi);
        let (_, vm) = rk4_step(s, v, mid, rhs);
        let crossed = if downward { vm <= 0.0 } else { vm >= v_max };
        if crossed {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (sc, _) = rk4_step(s, v, hi, rhs);
    s = sc;
    if downward {
        (s, 0.0)
    } else {
        (s + v_max * (h - hi), v_max)
    }
}

/// Advances the saturated model by `dt` under a desired acceleration `a_d`, a
/// disturbance `w`, and limits held constant for the step.
pub fn step_model(
    state: &VehicleState,
    a_d: f64,
    w: f64,
    limits: &AccelLimits,
    dt: f64,
    v_max: f64,
) -> VehicleState {
    limits.assert_consistent();
    let rhs = |_s: f64, _v: f64| a_d.clamp(limits.a_min, limits.a_max) + w;
    let (s, v) = integrate_substep(
        state.s,
        state.v,
        dt,
        v_max,
        a_d + w <= 0.0,
        a_d + w >= 0.0,
        &rhs,
    );
    VehicleState::new(s, v)
}

/// Advances the ground-truth model over a time span, re-evaluating the exact
/// state-dependent limits inside the integrator stages.
///
/// `alpha_at` resolves the incline angle at a road position. The enforced
/// braking limit `a_dec_eff` replaces the physical one.
#[allow(clippy::too_many_arguments)]
pub fn simulate_span(
    state: &VehicleState,
    a_d: f64,
    w: f64,
    params: &VehicleParams,
    a_dec_eff: f64,
    g: f64,
    rho: f64,
    v_wind: f64,
    alpha_at: &impl Fn(f64) -> f64,
    dt: f64,
    substeps: usize,
) -> VehicleState {
    let h = dt / substeps as f64;
    let rhs = |s: f64, v: f64| {
        let shared = a_incline(alpha_at(s), g)
            + a_drag(
                v.clamp(0.0, params.v_max),
                rho,
                params.drag_coeff,
                params.frontal_area,
                params.mass,
                v_wind,
            );
        a_d.clamp(a_dec_eff + shared, params.a_acc + shared) + w
    };
    let mut s = state.s;
    let mut v = state.v;
    for _ in 0..substeps {
        (s, v) = integrate_substep(s, v, h, params.v_max, a_d + w <= 0.0, a_d + w >= 0.0, &rhs);
    }
    VehicleState::new(s, v)
}

// ---------------------------------------------------------------------------
// Reachable-position bounds
// ---------------------------------------------------------------------------

/// Everything a bound-trajectory computation needs besides the state and the
/// input.
#[derive(Clone, Copy, Debug)]
pub struct BoundCtx<'a> {
    pub params: &'a VehicleParams,
    /// Enforced braking limit substituted for the physical `a_dec`.
    pub a_dec_eff: f64,
    pub env: &'a EnvParams,
    /// Open cut-in window of the bounded vehicle, if any.
    pub cutin: Option<CutinWindow>,
    pub horizon_cap: usize,
    pub substeps: usize,
}

impl<'a> BoundCtx<'a> {
    pub fn new(params: &'a VehicleParams, a_dec_eff: f64, env: &'a EnvParams) -> Self {
        Self {
            params,
            a_dec_eff,
            env,
            cutin: None,
            horizon_cap: DEFAULT_HORIZON_CAP,
            substeps: SUBSTEPS_PER_GRID,
        }
    }

    pub fn with_cutin(mut self, cutin: Option<CutinWindow>) -> Self {
        self.cutin = cutin;
        self
    }

    pub fn with_horizon(mut self, cap: usize) -> Self {
        self.horizon_cap = cap;
        self
    }
}

/// Lower limit on the braking limit during/after a cut-in window, valid over
/// the substep `[tau_start, tau_end]` and non-increasing over trajectory time.
fn cutin_a_min(
    kind: BoundKind,
    phys_a_min: f64,
    window: &CutinWindow,
    tau_start: f64,
    tau_end: f64,
) -> f64 {
    match kind {
        // Valid for every time in the substep: once the window can close
        // within it, the physical limit may already apply.
        BoundKind::Lower => {
            if tau_end < window.remaining {
                window.limit
            } else {
                phys_a_min.min(window.limit)
            }
        }
        // Must dominate the limit at all later times, which eventually drop
        // to the physical regime.
        BoundKind::Upper => {
            if tau_start < window.remaining {
                window.limit.max(phys_a_min)
            } else {
                phys_a_min
            }
        }
    }
}

fn bound_pos(
    kind: BoundKind,
    start: VehicleState,
    input: &InputTraj,
    ctx: &BoundCtx,
) -> Result<BoundTrajectory, HorizonError> {
    debug_assert!(input.is_non_increasing(), "input must be non-increasing");
    let dt_p = ctx.env.dt_p;
    let h = dt_p / ctx.substeps as f64;
    let w = match kind {
        BoundKind::Lower => ctx.env.w.lo,
        BoundKind::Upper => ctx.env.w.hi,
    };
    let v_max = ctx.params.v_max;
    let evaluator = LimitBoundEval::new(kind, dt_p, ctx.params, ctx.a_dec_eff, ctx.env);
    let mut s = start.s;
    let mut v = start.v.clamp(0.0, v_max);
    let mut positions = vec![s];
    if v == 0.0 && input.slot(0) + w <= 0.0 {
        return Ok(BoundTrajectory { positions });
    }
    for k in 0..ctx.horizon_cap {
        let u = input.slot(k);
        for i in 0..ctx.substeps {
            let tau_start = k as f64 * dt_p + i as f64 * h;
            let tau_end = tau_start + h;
            let cutin = ctx.cutin;
            let rhs = |_s: f64, vv: f64| {
                let mut lim = evaluator.eval(Interval::point(vv.clamp(0.0, v_max)));
                if let Some(cw) = &cutin {
                    lim.a_min = cutin_a_min(kind, lim.a_min, cw, tau_start, tau_end);
                    lim.a_max = lim.a_max.max(lim.a_min);
                }
                u.clamp(lim.a_min, lim.a_max) + w
            };
            (s, v) = integrate_substep(s, v, h, v_max, u + w <= 0.0, u + w >= 0.0, &rhs);
        }
        positions.push(s);
        // Provably stopped: the velocity is pinned at zero and no future slot
        // of the (non-increasing) input can push it out of the clamp.
        if v == 0.0 && input.slot(k + 1) + w <= 0.0 {
            return Ok(BoundTrajectory { positions });
        }
    }
    if v == 0.0 && input.slot(ctx.horizon_cap) + w <= 0.0 {
        return Ok(BoundTrajectory { positions });
    }
    Err(HorizonError::TooShort {
        cap: ctx.horizon_cap,
    })
}

/// Guaranteed lower bounds on the rear position at each grid point, for the
/// worst admissible disturbance, the lower measurement corner, lower-bound
/// limits, and the input shifted one planning interval earlier.
pub fn lower_pos(
    meas: &StateInterval,
    input: &InputTraj,
    ctx: &BoundCtx,
) -> Result<BoundTrajectory, HorizonError> {
    // the shifted input only lower-bounds the original pointwise if the
    // original is non-increasing
    debug_assert!(input.is_non_increasing());
    let traj = bound_pos(BoundKind::Lower, meas.lower_corner(), &input.shifted(), ctx)?;
    Ok(traj.offset(-ctx.params.length))
}

/// Guaranteed upper bounds on the front position at each grid point, for the
/// best admissible disturbance, the upper measurement corner, upper-bound
/// limits, and the zero-order-hold of the input (identity on grid-aligned
/// piecewise-constant inputs).
pub fn upper_pos(
    meas: &StateInterval,
    input: &InputTraj,
    ctx: &BoundCtx,
) -> Result<BoundTrajectory, HorizonError> {
    bound_pos(BoundKind::Upper, meas.upper_corner(), input, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::presets;
    use approx::assert_relative_eq;

    fn flat_env() -> EnvParams {
        // degenerate environment: no incline, wind, or disturbance spread
        EnvParams {
            rho: Interval::point(1.2),
            v_wind: Interval::point(0.0),
            alpha: Interval::point(0.0),
            w: Interval::point(0.0),
            ..EnvParams::default_params()
        }
    }

    #[test]
    fn drag_formula_matches_direct_evaluation() {
        assert_relative_eq!(a_drag(0.0, 1.2, 0.7, 7.0, 20_000.0, 0.0), 0.0);
        assert_relative_eq!(
            a_drag(25.0, 1.2, 0.7, 7.0, 20_000.0, 0.0),
            -0.091875,
            max_relative = 1e-12
        );
        // worst-case wind corner: -(1/40000)·1.3·0.7·7·29.2²
        assert_relative_eq!(
            a_drag(25.0, 1.3, 0.7, 7.0, 20_000.0, 4.2),
            -0.135_782_92,
            max_relative = 1e-9
        );
    }

    #[test]
    fn incline_formula_matches_direct_evaluation() {
        assert_relative_eq!(a_incline(0.0, 9.81), 0.0);
        assert_relative_eq!(a_incline(0.06, 9.81), -0.588_246_903_6, max_relative = 1e-9);
        assert_relative_eq!(a_incline(-0.06, 9.81), 0.588_246_903_6, max_relative = 1e-9);
    }

    #[test]
    fn exact_limits_sum_the_components() {
        let p = presets::truck_20t();
        let ambient = Ambient {
            rho: 1.2,
            v_wind: 0.0,
            alpha: 0.06,
        };
        let st = VehicleState::new(0.0, 25.0);
        let lim = accel_limits(&st, &p, p.a_dec, &ambient, 9.81, None);
        assert_relative_eq!(lim.a_min, -5.680_121_903_6, max_relative = 1e-9);
        assert_relative_eq!(lim.a_max, 1.0 - 0.588_246_903_6 - 0.091875, max_relative = 1e-9);
    }

    #[test]
    fn cutin_window_replaces_the_braking_limit() {
        let p = presets::truck_20t();
        let ambient = Ambient {
            rho: 1.2,
            v_wind: 0.0,
            alpha: 0.0,
        };
        let st = VehicleState::new(0.0, 20.0);
        // no braking observed yet
        let w = CutinWindow {
            remaining: 2.0,
            limit: -1.0,
        };
        let lim = accel_limits(&st, &p, p.a_dec, &ambient, 9.81, Some(&w));
        assert_eq!(lim.a_min, -1.0);
        // harsher braking observed
        let w = CutinWindow {
            remaining: 2.0,
            limit: -3.0,
        };
        let lim = accel_limits(&st, &p, p.a_dec, &ambient, 9.81, Some(&w));
        assert_eq!(lim.a_min, -3.0);
    }

    #[test]
    fn degenerate_bounds_equal_exact_limits() {
        let p = presets::truck_20t();
        let env = flat_env();
        let st = VehicleState::new(0.0, 20.0);
        let exact = accel_limits(
            &st,
            &p,
            p.a_dec,
            &Ambient {
                rho: 1.2,
                v_wind: 0.0,
                alpha: 0.0,
            },
            env.g,
            None,
        );
        for kind in [BoundKind::Lower, BoundKind::Upper] {
            let b = bound_accel_limits(kind, 0.0, Interval::point(20.0), &p, p.a_dec, &env);
            assert_relative_eq!(b.a_min, exact.a_min, max_relative = 1e-12);
            assert_relative_eq!(b.a_max, exact.a_max, max_relative = 1e-12);
        }
    }

    #[test]
    fn bounds_bracket_exact_limits_at_interval_corners() {
        let p = presets::truck_20t();
        let env = EnvParams::default_params();
        let v_iv = Interval::new(24.9, 25.0);
        let lower = bound_accel_limits(BoundKind::Lower, env.dt_p, v_iv, &p, p.a_dec, &env);
        let upper = bound_accel_limits(BoundKind::Upper, env.dt_p, v_iv, &p, p.a_dec, &env);
        // worst-case exact value from the component test above
        assert!(lower.a_min <= -5.680_121_9);
        // the most favorable corner: downhill, thin air, low wind, low speed
        let mut best = f64::NEG_INFINITY;
        for alpha in [env.alpha.lo, env.alpha.hi] {
            for rho in [env.rho.lo, env.rho.hi] {
                for vw in [env.v_wind.lo, env.v_wind.hi] {
                    for v in [v_iv.lo, v_iv.hi] {
                        let ambient = Ambient {
                            rho,
                            v_wind: vw,
                            alpha,
                        };
                        let lim = accel_limits(
                            &VehicleState::new(0.0, v),
                            &p,
                            p.a_dec,
                            &ambient,
                            env.g,
                            None,
                        );
                        best = best.max(lim.a_min);
                    }
                }
            }
        }
        assert!(upper.a_min >= best);
    }

    #[test]
    fn step_model_standstill_and_top_clamps() {
        let lim = AccelLimits {
            a_min: -5.0,
            a_max: 1.0,
        };
        let st = step_model(&VehicleState::new(10.0, 0.0), -5.0, -0.1, &lim, 0.1, 25.0);
        assert_eq!(st.v, 0.0);
        assert_eq!(st.s, 10.0);
        let st = step_model(&VehicleState::new(10.0, 25.0), 2.0, 0.1, &lim, 0.1, 25.0);
        assert_eq!(st.v, 25.0);
        assert_relative_eq!(st.s, 12.5, max_relative = 1e-12);
    }

    #[test]
    fn step_model_matches_constant_acceleration_closed_form() {
        let lim = AccelLimits {
            a_min: -5.0,
            a_max: 1.0,
        };
        let st = step_model(&VehicleState::new(0.0, 10.0), -2.0, 0.0, &lim, 0.1, 25.0);
        assert_relative_eq!(st.v, 9.8, max_relative = 1e-12);
        assert_relative_eq!(st.s, 0.99, max_relative = 1e-12);
    }

    #[test]
    fn standing_vehicle_has_constant_bound_sequences() {
        let p = presets::truck_15t();
        let env = EnvParams::default_params();
        let meas = StateInterval {
            s: Interval::new(100.0, 100.4),
            v: Interval::point(0.0),
        };
        let ctx = BoundCtx::new(&p, p.a_dec, &env);
        let lo = lower_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap();
        assert_eq!(lo.stop_index(), 0);
        assert_relative_eq!(lo.final_pos(), 100.0 - p.length);
        let hi = upper_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap();
        assert_eq!(hi.stop_index(), 0);
        assert_relative_eq!(hi.final_pos(), 100.4);
    }

    #[test]
    fn full_brake_lower_bound_tracks_the_conservative_closed_form() {
        // constant-deceleration oracle: drag frozen at the initial speed gives
        // a deceleration the true bound can only exceed, so the true final
        // rear position must lie at or above the oracle's.
        let p = presets::truck_15t();
        let env = EnvParams::default_params();
        let v0 = 20.0;
        let meas = StateInterval {
            s: Interval::point(500.0),
            v: Interval::point(v0),
        };
        let ctx = BoundCtx::new(&p, p.a_dec, &env);
        let lo = lower_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap();
        // strongest bound deceleration, frozen at v0 (velocity only shrinks)
        let worst = bound_accel_limits(
            BoundKind::Lower,
            env.dt_p,
            Interval::point(v0),
            &p,
            p.a_dec,
            &env,
        );
        let decel = -(worst.a_min + env.w.lo);
        let oracle_min_travel = v0 * v0 / (2.0 * decel);
        assert!(lo.final_pos() >= 500.0 - p.length + oracle_min_travel - 1e-6);
        // and it can never travel farther than the frictionless flat closed form
        let best_decel = -(p.a_dec + a_incline(env.alpha.lo, env.g) + env.w.lo);
        assert!(lo.final_pos() <= 500.0 - p.length + v0 * v0 / (2.0 * best_decel) + 1e-6);
        // monotone nondecreasing grid positions
        for w in lo.positions().windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn stronger_braking_override_shrinks_the_lower_bound() {
        let p = presets::truck_15t();
        let env = EnvParams::default_params();
        let meas = StateInterval {
            s: Interval::point(500.0),
            v: Interval::point(20.0),
        };
        let weak = lower_pos(
            &meas,
            &InputTraj::full_brake(),
            &BoundCtx::new(&p, -6.0, &env),
        )
        .unwrap();
        let strong = lower_pos(
            &meas,
            &InputTraj::full_brake(),
            &BoundCtx::new(&p, -10.0, &env),
        )
        .unwrap();
        assert!(strong.final_pos() < weak.final_pos());
        for k in 0..=weak.stop_index().max(strong.stop_index()) {
            assert!(strong.at(k) <= weak.at(k) + 1e-12);
        }
    }

    #[test]
    fn upper_bound_dominates_lower_bound_plus_length() {
        let p = presets::truck_20t();
        let env = EnvParams::default_params();
        let meas = StateInterval {
            s: Interval::new(200.0, 200.4),
            v: Interval::new(24.9, 25.0),
        };
        let ctx = BoundCtx::new(&p, p.a_dec, &env);
        let lo = lower_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap();
        let hi = upper_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap();
        for k in 0..=lo.stop_index().max(hi.stop_index()) + 1 {
            assert!(hi.at(k) >= lo.at(k) + p.length);
        }
        // conservative closed-form floor for the upper stop position: worst
        // ascent, zero drag
        let decel = -(p.a_dec + a_incline(env.alpha.hi, env.g)) - env.w.hi;
        assert!(hi.final_pos() >= 200.4 + 25.0 * 25.0 / (2.0 * decel));
    }

    #[test]
    fn horizon_cap_errors_when_stop_not_reached() {
        let p = presets::truck_20t();
        let env = EnvParams::default_params();
        let meas = StateInterval {
            s: Interval::point(0.0),
            v: Interval::point(25.0),
        };
        let ctx = BoundCtx::new(&p, p.a_dec, &env).with_horizon(3);
        let err = upper_pos(&meas, &InputTraj::full_brake(), &ctx).unwrap_err();
        assert_eq!(err, HorizonError::TooShort { cap: 3 });
    }

    #[test]
    fn halving_substeps_changes_positions_below_tolerance() {
        let p = presets::truck_15t();
        let env = EnvParams::default_params();
        let meas = StateInterval {
            s: Interval::point(0.0),
            v: Interval::point(22.0),
        };
        let input = InputTraj::from_slots(vec![0.5, 0.0, -0.5, -1.0, -2.0], f64::NEG_INFINITY);
        let mut coarse = BoundCtx::new(&p, p.a_dec, &env);
        coarse.substeps = SUBSTEPS_PER_GRID;
        let mut fine = coarse;
        fine.substeps = SUBSTEPS_PER_GRID * 2;
        let a = upper_pos(&meas, &input, &coarse).unwrap();
        let b = upper_pos(&meas, &input, &fine).unwrap();
        assert_eq!(a.stop_index(), b.stop_index());
        for k in 0..=a.stop_index() {
            assert!((a.at(k) - b.at(k)).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn step_model_always_clamps_velocity_into_range() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &(
                    0.0..30.0f64,   // v
                    -20.0..20.0f64, // a_d
                    -0.1..0.1f64,   // w
                    -8.0..-1.0f64,  // a_min
                    0.5..4.0f64,    // a_max
                    0.01..0.5f64,   // dt
                ),
                |(v, a_d, w, a_min, a_max, dt)| {
                    let lim = AccelLimits { a_min, a_max };
                    let st = step_model(&VehicleState::new(0.0, v), a_d, w, &lim, dt, 25.0);
                    prop_assert!((0.0..=25.0).contains(&st.v), "v out of range: {}", st.v);
                    prop_assert!(st.s >= 0.0 - 1e-12, "position moved backward");
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn bound_limit_ordering_holds_on_random_grid() {
        use rand::Rng;
        let env = EnvParams::default_params();
        let mut rng = crate::types::derive_rng(11, 3);
        for _ in 0..200 {
            let p = presets::all()[rng.gen_range(0..5)];
            let v = rng.gen_range(0.0..p.v_max);
            let alpha = rng.gen_range(env.alpha.lo..=env.alpha.hi);
            let rho = rng.gen_range(env.rho.lo..=env.rho.hi);
            let vw = rng.gen_range(env.v_wind.lo..=env.v_wind.hi);
            let ambient = Ambient {
                rho,
                v_wind: vw,
                alpha,
            };
            let exact = accel_limits(&VehicleState::new(0.0, v), &p, p.a_dec, &ambient, env.g, None);
            let lo = bound_accel_limits(
                BoundKind::Lower,
                env.dt_p,
                Interval::point(v),
                &p,
                p.a_dec,
                &env,
            );
            let hi = bound_accel_limits(
                BoundKind::Upper,
                env.dt_p,
                Interval::point(v),
                &p,
                p.a_dec,
                &env,
            );
            assert!(lo.a_min <= exact.a_min && exact.a_min <= hi.a_min);
            assert!(lo.a_max <= exact.a_max && exact.a_max <= hi.a_max);
        }
    }
}
