//! Scenario file schema: a versioned TOML format describing vehicles,
//! environment bounds, controller settings, measurement noise, channel
//! faults, and timed events.
//!
//! Vehicles are listed front-most first with no initial overlap. See the
//! repository README for the field-by-field reference.

use serde::Deserialize;
use thiserror::Error;

use crate::controllers::CaccGains;
use crate::network::ChannelConfig;
use crate::types::{EnvParams, Interval, VehicleParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema version {found}, expected {SCHEMA_VERSION}")]
    Version { found: u32 },
    #[error("field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn field_err(field: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        field: field.to_string(),
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Raw schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    #[serde(default)]
    name: String,
    seed: u64,
    duration: f64,
    #[serde(default)]
    consensus: bool,
    #[serde(default)]
    env: EnvSpec,
    #[serde(default)]
    controller: ControllerSpec,
    #[serde(default)]
    noise: NoiseSpec,
    #[serde(default)]
    channel: ChannelSpec,
    #[serde(default)]
    log: LogSpec,
    #[serde(default)]
    incline: Vec<InclineKnot>,
    vehicles: Vec<VehicleSpecRaw>,
    #[serde(default)]
    events: Vec<EventSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvSpec {
    rho: [f64; 2],
    v_wind: [f64; 2],
    alpha: [f64; 2],
    g: f64,
    w: [f64; 2],
    s_sensor: f64,
    t_c: f64,
    a_dec_cutin: f64,
    dt_p: f64,
    /// True air density used by the ground-truth physics; defaults to the
    /// interval midpoint.
    rho_true: Option<f64>,
    v_wind_true: Option<f64>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        let e = EnvParams::default_params();
        Self {
            rho: [e.rho.lo, e.rho.hi],
            v_wind: [e.v_wind.lo, e.v_wind.hi],
            alpha: [e.alpha.lo, e.alpha.hi],
            g: e.g,
            w: [e.w.lo, e.w.hi],
            s_sensor: e.s_sensor,
            t_c: e.t_c,
            a_dec_cutin: e.a_dec_cutin,
            dt_p: e.dt_p,
            rho_true: None,
            v_wind_true: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerSpec {
    k_p: f64,
    k_d: f64,
    headway: f64,
    d_standstill: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let g = CaccGains::default();
        Self {
            k_p: g.k_p,
            k_d: g.k_d,
            headway: g.headway,
            d_standstill: g.d_standstill,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSpec {
    ego_pos: f64,
    ego_vel: f64,
    rel_pos: f64,
    rel_vel: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            ego_pos: 0.4,
            ego_vel: 0.1,
            rel_pos: 0.2,
            rel_vel: 0.1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelSpec {
    drop: f64,
    delay: [u64; 2],
    duplicate: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            drop: 0.0,
            delay: [0, 0],
            duplicate: 0.0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogSpec {
    #[serde(default)]
    safe_distance: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InclineKnot {
    s: f64,
    alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleSpecRaw {
    id: String,
    s: f64,
    v: f64,
    #[serde(default)]
    platoon: bool,
    target_speed: Option<f64>,
    a_dec: f64,
    a_acc: f64,
    v_max: f64,
    mass: f64,
    drag_coeff: f64,
    frontal_area: f64,
    length: f64,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EventSpec {
    FullBrake {
        id: String,
        t: f64,
    },
    CutIn {
        id: String,
        t: f64,
        after: String,
        s: f64,
        v: f64,
        params: VehicleParams,
        target_speed: Option<f64>,
    },
    Depart {
        id: String,
        t: f64,
    },
    SetTarget {
        id: String,
        t: f64,
        v: f64,
    },
}

// ---------------------------------------------------------------------------
// Validated scenario
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct VehicleSpec {
    pub id: String,
    pub s: f64,
    pub v: f64,
    pub platoon: bool,
    pub target_speed: f64,
    pub params: VehicleParams,
}

#[derive(Clone, Debug)]
pub enum Event {
    FullBrake { id: String, t: f64 },
    CutIn { spec: VehicleSpec, t: f64, after: String },
    Depart { id: String, t: f64 },
    SetTarget { id: String, t: f64, v: f64 },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::FullBrake { t, .. }
            | Event::CutIn { t, .. }
            | Event::Depart { t, .. }
            | Event::SetTarget { t, .. } => *t,
        }
    }
}

/// Piecewise-linear incline profile over road position; flat when empty,
/// clamped to the first/last knot outside the covered span.
#[derive(Clone, Debug, Default)]
pub struct InclineProfile {
    knots: Vec<(f64, f64)>,
}

impl InclineProfile {
    pub fn new(knots: Vec<(f64, f64)>) -> Self {
        Self { knots }
    }

    pub fn alpha_at(&self, s: f64) -> f64 {
        if self.knots.is_empty() {
            return 0.0;
        }
        if s <= self.knots[0].0 {
            return self.knots[0].1;
        }
        for pair in self.knots.windows(2) {
            let (s0, a0) = pair[0];
            let (s1, a1) = pair[1];
            if s <= s1 {
                let f = (s - s0) / (s1 - s0);
                return a0 + f * (a1 - a0);
            }
        }
        self.knots[self.knots.len() - 1].1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseConfig {
    pub ego_pos: f64,
    pub ego_vel: f64,
    pub rel_pos: f64,
    pub rel_vel: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub consensus: bool,
    pub env: EnvParams,
    pub rho_true: f64,
    pub v_wind_true: f64,
    pub gains: CaccGains,
    pub noise: NoiseConfig,
    pub channel: ChannelConfig,
    pub incline: InclineProfile,
    /// Front-most first.
    pub vehicles: Vec<VehicleSpec>,
    /// Sorted by time (stable).
    pub events: Vec<Event>,
    pub log_safe_distance: bool,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let raw: ScenarioFile = toml::from_str(text)?;
        Self::from_raw(raw)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    fn from_raw(raw: ScenarioFile) -> Result<Self, ScenarioError> {
        if raw.version != SCHEMA_VERSION {
            return Err(ScenarioError::Version { found: raw.version });
        }
        // the negated comparison also rejects NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(raw.duration > 0.0) {
            return Err(field_err("duration", "must be positive"));
        }
        let env = EnvParams {
            rho: iv("env.rho", raw.env.rho)?,
            v_wind: iv("env.v_wind", raw.env.v_wind)?,
            alpha: iv("env.alpha", raw.env.alpha)?,
            g: raw.env.g,
            w: iv("env.w", raw.env.w)?,
            s_sensor: raw.env.s_sensor,
            t_c: raw.env.t_c,
            a_dec_cutin: raw.env.a_dec_cutin,
            dt_p: raw.env.dt_p,
        };
        env.validate().map_err(|m| field_err("env", m))?;
        let rho_true = raw.env.rho_true.unwrap_or(env.rho.mid());
        let v_wind_true = raw.env.v_wind_true.unwrap_or(env.v_wind.mid());
        if !env.rho.contains(rho_true) {
            return Err(field_err("env.rho_true", "outside the rho interval"));
        }
        if !env.v_wind.contains(v_wind_true) {
            return Err(field_err("env.v_wind_true", "outside the v_wind interval"));
        }

        let channel = ChannelConfig {
            drop_prob: raw.channel.drop,
            delay_min: raw.channel.delay[0],
            delay_max: raw.channel.delay[1],
            duplicate_prob: raw.channel.duplicate,
        };
        channel.validate().map_err(|m| field_err("channel", m))?;

        let noise = NoiseConfig {
            ego_pos: raw.noise.ego_pos,
            ego_vel: raw.noise.ego_vel,
            rel_pos: raw.noise.rel_pos,
            rel_vel: raw.noise.rel_vel,
        };
        for (f, v) in [
            ("noise.ego_pos", noise.ego_pos),
            ("noise.ego_vel", noise.ego_vel),
            ("noise.rel_pos", noise.rel_pos),
            ("noise.rel_vel", noise.rel_vel),
        ] {
            if v < 0.0 {
                return Err(field_err(f, "must be nonnegative"));
            }
        }

        let mut knots = Vec::new();
        for (i, k) in raw.incline.iter().enumerate() {
            if let Some(&(ps, _)) = knots.last() {
                if k.s <= ps {
                    return Err(field_err(
                        &format!("incline[{i}].s"),
                        "knots must be strictly increasing",
                    ));
                }
            }
            if !env.alpha.contains(k.alpha) {
                return Err(field_err(
                    &format!("incline[{i}].alpha"),
                    "outside the alpha bounds",
                ));
            }
            knots.push((k.s, k.alpha));
        }

        if raw.vehicles.is_empty() {
            return Err(field_err("vehicles", "at least one vehicle required"));
        }
        let mut vehicles = Vec::with_capacity(raw.vehicles.len());
        let mut ids = std::collections::BTreeSet::new();
        for (i, v) in raw.vehicles.into_iter().enumerate() {
            let prefix = format!("vehicles[{i}]");
            if !ids.insert(v.id.clone()) {
                return Err(field_err(&format!("{prefix}.id"), "duplicate id"));
            }
            let params = VehicleParams {
                a_dec: v.a_dec,
                a_acc: v.a_acc,
                v_max: v.v_max,
                mass: v.mass,
                drag_coeff: v.drag_coeff,
                frontal_area: v.frontal_area,
                length: v.length,
            };
            params.validate().map_err(|m| field_err(&prefix, m))?;
            if params.length <= 0.0 {
                return Err(field_err(&format!("{prefix}.length"), "must be positive"));
            }
            if !(0.0..=params.v_max).contains(&v.v) {
                return Err(field_err(&format!("{prefix}.v"), "outside [0, v_max]"));
            }
            let target_speed = v.target_speed.unwrap_or(v.v);
            if !(0.0..=params.v_max).contains(&target_speed) {
                return Err(field_err(
                    &format!("{prefix}.target_speed"),
                    "outside [0, v_max]",
                ));
            }
            vehicles.push(VehicleSpec {
                id: v.id,
                s: v.s,
                v: v.v,
                platoon: v.platoon,
                target_speed,
                params,
            });
        }
        // front-most first, strictly separated
        for i in 1..vehicles.len() {
            let ahead = &vehicles[i - 1];
            let behind = &vehicles[i];
            if behind.s >= ahead.s - ahead.params.length {
                return Err(field_err(
                    &format!("vehicles[{i}].s"),
                    format!(
                        "`{}` overlaps or passes `{}`: vehicles must be listed \
                         front-most first with positive gaps",
                        behind.id, ahead.id
                    ),
                ));
            }
        }

        let mut events = Vec::with_capacity(raw.events.len());
        for (i, e) in raw.events.into_iter().enumerate() {
            let prefix = format!("events[{i}]");
            let ev = match e {
                EventSpec::FullBrake { id, t } => {
                    require_known(&ids, &id, &prefix)?;
                    Event::FullBrake { id, t }
                }
                EventSpec::Depart { id, t } => {
                    require_known(&ids, &id, &prefix)?;
                    Event::Depart { id, t }
                }
                EventSpec::SetTarget { id, t, v } => {
                    require_known(&ids, &id, &prefix)?;
                    Event::SetTarget { id, t, v }
                }
                EventSpec::CutIn {
                    id,
                    t,
                    after,
                    s,
                    v,
                    params,
                    target_speed,
                } => {
                    if !ids.insert(id.clone()) {
                        return Err(field_err(&format!("{prefix}.id"), "duplicate id"));
                    }
                    require_known(&ids, &after, &prefix)?;
                    params
                        .validate()
                        .map_err(|m| field_err(&format!("{prefix}.params"), m))?;
                    Event::CutIn {
                        spec: VehicleSpec {
                            id,
                            s,
                            v,
                            platoon: false,
                            target_speed: target_speed.unwrap_or(v),
                            params,
                        },
                        t,
                        after,
                    }
                }
            };
            if ev.time() < 0.0 {
                return Err(field_err(&format!("{prefix}.t"), "must be nonnegative"));
            }
            events.push(ev);
        }
        events.sort_by(|a, b| a.time().total_cmp(&b.time()));

        Ok(Scenario {
            name: raw.name,
            seed: raw.seed,
            duration: raw.duration,
            consensus: raw.consensus,
            env,
            rho_true,
            v_wind_true,
            gains: CaccGains {
                k_p: raw.controller.k_p,
                k_d: raw.controller.k_d,
                headway: raw.controller.headway,
                d_standstill: raw.controller.d_standstill,
            },
            noise,
            channel,
            incline: InclineProfile::new(knots),
            vehicles,
            events,
            log_safe_distance: raw.log.safe_distance,
        })
    }
}

fn iv(field: &str, pair: [f64; 2]) -> Result<Interval, ScenarioError> {
    if pair[0] > pair[1] {
        return Err(field_err(field, "bounds out of order"));
    }
    Ok(Interval::new(pair[0], pair[1]))
}

fn require_known(
    ids: &std::collections::BTreeSet<String>,
    id: &str,
    prefix: &str,
) -> Result<(), ScenarioError> {
    if ids.contains(id) {
        Ok(())
    } else {
        Err(field_err(
            &format!("{prefix}.id"),
            format!("unknown vehicle `{id}`"),
        ))
    }
}
