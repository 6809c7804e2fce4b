//! Shared domain types: measurement intervals, vehicle state and parameters,
//! environment bounds, and cut-in bookkeeping.
//!
//! All positions are absolute 1-D road coordinates in meters (front of the
//! vehicle), velocities in m/s, accelerations in m/s². Braking limits are
//! negative numbers throughout.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

/// Index of a vehicle in the simulation registry. Stable for the whole run,
/// independent of road ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VehicleId(pub usize);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

// ---------------------------------------------------------------------------
// Intervals
// ---------------------------------------------------------------------------

/// A closed interval `[lo, hi]` enclosing a measured quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "interval bounds out of order: [{lo}, {hi}]");
        Self { lo, hi }
    }

    /// Degenerate interval containing exactly one value.
    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Minkowski sum; contains `x + y` for any `x ∈ self`, `y ∈ other`.
    pub fn add(&self, other: Interval) -> Interval {
        Interval {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    /// Shift both ends by a constant.
    pub fn offset(&self, d: f64) -> Interval {
        Interval {
            lo: self.lo + d,
            hi: self.hi + d,
        }
    }
}

/// Simulates a noisy sensor reading: returns an interval that contains
/// `true_value` and is at most `max_width` wide (up to one rounding step at
/// the magnitude of the measured value).
///
/// The interval center is offset from the true value by Gaussian noise
/// (sigma = `max_width / 4`), clipped so containment is never lost.
/// Deterministic for a fixed RNG state.
pub fn interval_measure(true_value: f64, max_width: f64, rng: &mut ChaCha8Rng) -> Interval {
    assert!(max_width >= 0.0);
    if max_width == 0.0 {
        return Interval::point(true_value);
    }
    let half = 0.5 * max_width;
    let normal = Normal::new(0.0, half * 0.5).expect("valid sigma");
    let offset = normal.sample(rng).clamp(-half, half);
    // the relative endpoints are computed first: they straddle zero exactly,
    // so adding them to the true value keeps it inside under rounding
    let lo_rel = offset - half;
    let hi_rel = offset + half;
    Interval::new(true_value + lo_rel, true_value + hi_rel)
}

// ---------------------------------------------------------------------------
// Vehicle state and parameters
// ---------------------------------------------------------------------------

/// Front position and velocity of one vehicle at a time instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    /// Front position along the road \[m\].
    pub s: f64,
    /// Velocity \[m/s\], always in `[0, v_max]`.
    pub v: f64,
}

impl VehicleState {
    pub fn new(s: f64, v: f64) -> Self {
        Self { s, v }
    }
}

/// Interval-valued vehicle state, as produced by measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateInterval {
    pub s: Interval,
    pub v: Interval,
}

impl StateInterval {
    pub fn point(state: VehicleState) -> Self {
        Self {
            s: Interval::point(state.s),
            v: Interval::point(state.v),
        }
    }

    /// Worst corner for lower position bounds.
    pub fn lower_corner(&self) -> VehicleState {
        VehicleState::new(self.s.lo, self.v.lo)
    }

    /// Worst corner for upper position bounds.
    pub fn upper_corner(&self) -> VehicleState {
        VehicleState::new(self.s.hi, self.v.hi)
    }

    pub fn contains(&self, state: &VehicleState) -> bool {
        self.s.contains(state.s) && self.v.contains(state.v)
    }
}

/// Physical capabilities of one vehicle. Broadcast to followers so they can
/// verify against the real dynamics instead of worst-case assumptions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Brake/tire deceleration limit \[m/s²\], negative.
    pub a_dec: f64,
    /// Engine acceleration limit \[m/s²\], positive.
    pub a_acc: f64,
    /// Maximum velocity \[m/s\].
    pub v_max: f64,
    /// Mass \[kg\].
    pub mass: f64,
    /// Drag coefficient (unitless).
    pub drag_coeff: f64,
    /// Frontal area \[m²\].
    pub frontal_area: f64,
    /// Vehicle length \[m\].
    pub length: f64,
}

impl VehicleParams {
    /// Checks the basic physical sanity constraints. The negated comparisons
    /// reject NaN values as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if !(self.a_dec < 0.0) {
            return Err(format!("a_dec must be negative, got {}", self.a_dec));
        }
        if !(self.a_acc > 0.0) {
            return Err(format!("a_acc must be positive, got {}", self.a_acc));
        }
        if !(self.v_max > 0.0) {
            return Err(format!("v_max must be positive, got {}", self.v_max));
        }
        if !(self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        if !(self.frontal_area > 0.0) {
            return Err(format!(
                "frontal_area must be positive, got {}",
                self.frontal_area
            ));
        }
        if !(self.drag_coeff >= 0.0) {
            return Err(format!(
                "drag_coeff must be nonnegative, got {}",
                self.drag_coeff
            ));
        }
        if !(self.length >= 0.0) {
            return Err(format!("length must be nonnegative, got {}", self.length));
        }
        Ok(())
    }

    /// Parameter set assumed for a preceding vehicle that has not broadcast
    /// its real parameters: the strongest plausible braking and drag, so the
    /// predicted earliest-stop positions lower-bound any real vehicle.
    ///
    /// Engine limit, top speed and length are unspecified for this column;
    /// they are filled with values that keep the assumption conservative
    /// (generous acceleration/top speed widen the reachable-velocity window
    /// used in the limit bounds; zero length treats the sensed rear point as
    /// the whole vehicle).
    pub fn worst_case() -> Self {
        Self {
            a_dec: -12.0,
            a_acc: 12.0,
            v_max: 70.0,
            mass: 400.0,
            drag_coeff: 2.0,
            frontal_area: 12.5,
            length: 0.0,
        }
    }
}

/// The five bundled vehicle parameterizations used by tests and the example
/// scenarios: three trucks and two cars of heterogeneous capability.
pub mod presets {
    use super::VehicleParams;

    /// 20 t truck, weakest brakes of the set.
    pub fn truck_20t() -> VehicleParams {
        VehicleParams {
            a_dec: -5.0,
            a_acc: 1.0,
            v_max: 25.0,
            mass: 20_000.0,
            drag_coeff: 0.7,
            frontal_area: 7.0,
            length: 16.0,
        }
    }

    /// 15 t truck.
    pub fn truck_15t() -> VehicleParams {
        VehicleParams {
            a_dec: -6.0,
            a_acc: 1.5,
            v_max: 25.0,
            mass: 15_000.0,
            drag_coeff: 0.5,
            frontal_area: 8.0,
            length: 14.0,
        }
    }

    /// 2.5 t car, strongest brakes of the set.
    pub fn car_25t() -> VehicleParams {
        VehicleParams {
            a_dec: -10.0,
            a_acc: 4.0,
            v_max: 60.0,
            mass: 2_500.0,
            drag_coeff: 0.25,
            frontal_area: 1.7,
            length: 4.9,
        }
    }

    /// 20 t truck, slightly stronger brakes than [`truck_20t`].
    pub fn truck_20t_b() -> VehicleParams {
        VehicleParams {
            a_dec: -5.5,
            a_acc: 1.0,
            v_max: 25.0,
            mass: 20_000.0,
            drag_coeff: 0.6,
            frontal_area: 6.0,
            length: 16.0,
        }
    }

    /// 2 t car.
    pub fn car_2t() -> VehicleParams {
        VehicleParams {
            a_dec: -9.0,
            a_acc: 3.5,
            v_max: 50.0,
            mass: 2_000.0,
            drag_coeff: 0.35,
            frontal_area: 2.4,
            length: 4.2,
        }
    }

    /// All five presets, heterogeneous platoon order used in tests.
    pub fn all() -> [VehicleParams; 5] {
        [truck_20t(), truck_15t(), car_25t(), truck_20t_b(), car_2t()]
    }
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

/// Environment bounds and protocol timing constants shared by all vehicles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvParams {
    /// Air density bounds \[kg/m³\].
    pub rho: Interval,
    /// Headwind velocity bounds \[m/s\].
    pub v_wind: Interval,
    /// Road incline angle bounds \[rad\]; positive is an ascent.
    pub alpha: Interval,
    /// Gravity \[m/s²\].
    pub g: f64,
    /// Disturbance bounds \[m/s²\]; must straddle zero.
    pub w: Interval,
    /// Sensor range \[m\].
    pub s_sensor: f64,
    /// Clearing time after a cut-in \[s\].
    pub t_c: f64,
    /// Deceleration a cut-in vehicle is assumed not to exceed during the
    /// clearing window \[m/s²\], negative.
    pub a_dec_cutin: f64,
    /// Planning period \[s\].
    pub dt_p: f64,
}

impl EnvParams {
    /// The common parameterization used by the bundled scenarios.
    pub fn default_params() -> Self {
        Self {
            rho: Interval::new(1.1, 1.3),
            v_wind: Interval::new(1.4, 4.2),
            alpha: Interval::new(-0.06, 0.06),
            g: 9.81,
            w: Interval::new(-0.1, 0.1),
            s_sensor: 200.0,
            t_c: 4.0,
            a_dec_cutin: -1.0,
            dt_p: 0.1,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if !(self.w.lo <= 0.0 && 0.0 <= self.w.hi) {
            return Err(format!("w must straddle 0, got [{}, {}]", self.w.lo, self.w.hi));
        }
        if !(self.t_c > 0.0) {
            return Err(format!("t_c must be positive, got {}", self.t_c));
        }
        if !(self.dt_p > 0.0) {
            return Err(format!("dt_p must be positive, got {}", self.dt_p));
        }
        if !(self.a_dec_cutin < 0.0) {
            return Err(format!(
                "a_dec_cutin must be negative, got {}",
                self.a_dec_cutin
            ));
        }
        if !(self.s_sensor > 0.0) {
            return Err(format!("s_sensor must be positive, got {}", self.s_sensor));
        }
        Ok(())
    }
}

/// Concrete local environment values used by the ground-truth dynamics
/// (the bound computations only ever see the intervals in [`EnvParams`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ambient {
    pub rho: f64,
    pub v_wind: f64,
    /// Incline angle at the vehicle's current position \[rad\].
    pub alpha: f64,
}

// ---------------------------------------------------------------------------
// Cut-in bookkeeping
// ---------------------------------------------------------------------------

/// Tracks one observed cut-in vehicle from the perspective of a follower.
///
/// Time is kept absolute; the remaining clearing window is derived on demand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutinTracker {
    /// Simulation time at which the cut-in occurred \[s\].
    pub t_start: f64,
    /// Running minimum of the cut-in vehicle's observed acceleration \[m/s²\].
    pub a_min_observed: f64,
    /// Set once the safe distance has been re-established; forces the
    /// remaining window to zero for good.
    pub cleared: bool,
}

/// Snapshot of a cut-in window at planning time, consumed by the bound
/// computations: how much of the clearing window remains and which braking
/// limit the cut-in vehicle is assumed to respect during it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutinWindow {
    /// Remaining clearing time \[s\].
    pub remaining: f64,
    /// Assumed braking limit during the window \[m/s²\], negative.
    pub limit: f64,
}

impl CutinTracker {
    pub fn new(t_start: f64) -> Self {
        Self {
            t_start,
            a_min_observed: f64::INFINITY,
            cleared: false,
        }
    }

    /// Remaining clearing time at absolute time `t`.
    pub fn remaining(&self, t: f64, t_c: f64) -> f64 {
        if self.cleared {
            0.0
        } else {
            (t_c - (t - self.t_start)).max(0.0)
        }
    }

    /// Braking limit assumed for the cut-in vehicle during the window:
    /// the default cut-in limit, lowered by any harsher observed braking.
    pub fn assumed_limit(&self, a_dec_cutin: f64) -> f64 {
        a_dec_cutin.min(self.a_min_observed)
    }

    /// Window snapshot at time `t`, or `None` once the window has elapsed.
    pub fn window(&self, t: f64, env: &EnvParams) -> Option<CutinWindow> {
        let remaining = self.remaining(t, env.t_c);
        if remaining > 0.0 {
            Some(CutinWindow {
                remaining,
                limit: self.assumed_limit(env.a_dec_cutin),
            })
        } else {
            None
        }
    }

    /// Folds a new observation of the cut-in vehicle's acceleration and the
    /// current safe-distance status into the tracker.
    pub fn update(&mut self, observed_a: f64, gap_ok: bool) {
        self.a_min_observed = self.a_min_observed.min(observed_a);
        if gap_ok {
            self.cleared = true;
        }
    }
}

/// Derives an independent RNG stream from a base seed and a salt, so every
/// consumer (channel, per-vehicle noise, disturbances) gets its own
/// deterministic sequence.
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    // splitmix64 finalizer over seed ^ salted increment
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_width_measurement_is_degenerate() {
        let mut rng = derive_rng(1, 0);
        let iv = interval_measure(25.0, 0.0, &mut rng);
        assert_eq!(iv, Interval::point(25.0));
    }

    #[test]
    fn measurement_contains_true_value_and_respects_width() {
        let mut rng = derive_rng(7, 0);
        for _ in 0..200 {
            let iv = interval_measure(100.0, 0.4, &mut rng);
            assert!(iv.contains(100.0));
            assert!(iv.width() <= 0.4 + 1e-12);
        }
        let mut rng = derive_rng(3, 0);
        let iv = interval_measure(0.0, 0.1, &mut rng);
        assert!(iv.contains(0.0));
        assert!(iv.width() <= 0.1 + 1e-12);
    }

    #[test]
    fn measurement_is_deterministic_per_seed() {
        let mut a = derive_rng(42, 9);
        let mut b = derive_rng(42, 9);
        for _ in 0..32 {
            assert_eq!(
                interval_measure(5.0, 0.4, &mut a),
                interval_measure(5.0, 0.4, &mut b)
            );
        }
    }

    #[test]
    fn cutin_tracker_window_and_clearing() {
        let env = EnvParams::default_params();
        let mut tr = CutinTracker::new(10.0);
        assert_eq!(tr.remaining(10.0, env.t_c), 4.0);
        assert_eq!(tr.remaining(13.5, env.t_c), 0.5);
        assert_eq!(tr.remaining(15.0, env.t_c), 0.0);
        // observation above the default limit keeps it at the default
        tr.update(-0.5, false);
        assert_eq!(tr.assumed_limit(env.a_dec_cutin), -1.0);
        // harsher braking lowers the assumption
        tr.update(-4.0, false);
        assert_eq!(tr.assumed_limit(env.a_dec_cutin), -4.0);
        // the running minimum never rises again
        tr.update(-0.1, false);
        assert_eq!(tr.assumed_limit(env.a_dec_cutin), -4.0);
        // clearing forces the window shut
        tr.update(-0.1, true);
        assert_eq!(tr.remaining(11.0, env.t_c), 0.0);
        assert!(tr.window(11.0, &env).is_none());
    }

    #[test]
    fn worst_case_params_are_valid() {
        VehicleParams::worst_case().validate().unwrap();
        for p in presets::all() {
            p.validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn interval_sum_preserves_containment(
            a_lo in -100.0..100.0f64, a_w in 0.0..10.0f64,
            b_lo in -100.0..100.0f64, b_w in 0.0..10.0f64,
            fa in 0.0..1.0f64, fb in 0.0..1.0f64,
        ) {
            let ia = Interval::new(a_lo, a_lo + a_w);
            let ib = Interval::new(b_lo, b_lo + b_w);
            let x = ia.lo + fa * ia.width();
            let y = ib.lo + fb * ib.width();
            prop_assert!(ia.add(ib).contains(x + y));
        }

        #[test]
        fn measured_intervals_always_contain_truth(
            truth in -1000.0..1000.0f64,
            width in 0.0..5.0f64,
            seed in any::<u64>(),
        ) {
            let mut rng = derive_rng(seed, 1);
            let iv = interval_measure(truth, width, &mut rng);
            prop_assert!(iv.contains(truth));
            // width may exceed the cap by one rounding step of the endpoints
            prop_assert!(iv.width() <= width + 1e-9);
        }
    }
}
