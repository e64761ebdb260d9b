//! Synthetic driving-simulator substitute.
//!
//! Every driver follows the same scripted route per area (speed-limit zones,
//! curves, intersections with stop signs / signals / yield signs, lead-vehicle
//! zones). A point-mass longitudinal controller and a critically damped
//! lateral lane keeper turn a [`DriverProfile`] into all 31 channels at the
//! configured sample rate.
//!
//! Speed bound: the commanded acceleration never exceeds `(v_target − v)/τ`
//! with `τ ≥ dt`, so an Euler step cannot cross a target from below, and every
//! target is capped by `limit · (mean + 3·sd)`. The speed channel therefore
//! stays below [`DriverProfile::max_speed`] for the route; [`OVERSHOOT_BOUND`]
//! only absorbs rounding.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::channels::{CHANNELS, NUM_CHANNELS};
use super::recording::{Area, Recording};
use super::DataError;
use crate::numerics::mix_seed;

/// Allowed excess (m/s) of the speed channel over [`DriverProfile::max_speed`].
pub const OVERSHOOT_BOUND: f64 = 0.05;

/// Reported distance when no vehicle / sign of that kind lies ahead (m).
pub const DISTANCE_CAP: f64 = 1000.0;

const GRAVITY: f64 = 9.81;
const WHEELBASE: f64 = 2.7;
const STEERING_RATIO: f64 = 15.0;
const CAR_LENGTH: f64 = 4.5;
const GEAR_RATIOS: [f64; 6] = [3.6, 2.1, 1.4, 1.0, 0.8, 0.65];
const FINAL_DRIVE: f64 = 3.7;
const WHEEL_RADIUS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    /// Cruising speed as a fraction of the posted limit.
    pub speed_ratio_mean: f64,
    pub speed_ratio_sd: f64,
    /// Preferred time gap to a lead vehicle (s).
    pub headway_s: f64,
    /// Offset from lane center (m, positive to the left).
    pub lane_bias_m: f64,
    pub lane_jitter_m: f64,
    /// Time constant of the speed controller; small is aggressive (s).
    pub accel_time_constant_s: f64,
    pub turn_signal_prob: f64,
    /// Lateral tracking time constant (s).
    pub steering_smoothness_s: f64,
    pub shift_rpm: f64,
    pub reaction_latency_s: f64,
}

/// `(name, plausible lower, plausible upper, family lower, family upper)`.
const PARAMS: [(&str, f64, f64, f64, f64); 10] = [
    ("speed_ratio_mean", 0.5, 1.3, 0.85, 1.1),
    ("speed_ratio_sd", 0.0, 0.15, 0.02, 0.08),
    ("headway_s", 0.5, 4.0, 1.0, 3.0),
    ("lane_bias_m", -0.8, 0.8, -0.3, 0.3),
    ("lane_jitter_m", 0.0, 0.6, 0.05, 0.3),
    ("accel_time_constant_s", 0.3, 4.0, 0.7, 2.5),
    ("turn_signal_prob", 0.0, 1.0, 0.2, 1.0),
    ("steering_smoothness_s", 0.2, 3.0, 0.5, 2.0),
    ("shift_rpm", 1500.0, 4500.0, 1900.0, 3300.0),
    ("reaction_latency_s", 0.0, 1.5, 0.2, 0.9),
];

impl DriverProfile {
    fn to_array(&self) -> [f64; 10] {
        [
            self.speed_ratio_mean,
            self.speed_ratio_sd,
            self.headway_s,
            self.lane_bias_m,
            self.lane_jitter_m,
            self.accel_time_constant_s,
            self.turn_signal_prob,
            self.steering_smoothness_s,
            self.shift_rpm,
            self.reaction_latency_s,
        ]
    }

    fn from_array(v: [f64; 10]) -> Self {
        Self {
            speed_ratio_mean: v[0],
            speed_ratio_sd: v[1],
            headway_s: v[2],
            lane_bias_m: v[3],
            lane_jitter_m: v[4],
            accel_time_constant_s: v[5],
            turn_signal_prob: v[6],
            steering_smoothness_s: v[7],
            shift_rpm: v[8],
            reaction_latency_s: v[9],
        }
    }

    /// Middle of the family range for every parameter.
    pub fn typical() -> Self {
        Self::from_array(PARAMS.map(|p| 0.5 * (p.3 + p.4)))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (v, (name, lo, hi, _, _)) in self.to_array().into_iter().zip(PARAMS) {
            if !v.is_finite() || v < lo || v > hi {
                return Err(DataError::InfeasibleProfile(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        let top = self.speed_ratio_mean + 3.0 * self.speed_ratio_sd;
        let bottom = self.speed_ratio_mean - 3.0 * self.speed_ratio_sd;
        if top > 1.45 || bottom < 0.3 {
            return Err(DataError::InfeasibleProfile(format!(
                "speed ratio band [{bottom:.3}, {top:.3}] outside [0.3, 1.45]"
            )));
        }
        Ok(())
    }

    /// Speed this profile never exceeds on `route`.
    pub fn max_speed(&self, route: &RouteScript) -> f64 {
        route.max_limit() * (self.speed_ratio_mean + 3.0 * self.speed_ratio_sd)
    }

    /// `n` profiles spread over the family ranges by Latin-hypercube strata.
    ///
    /// `separation` in (0, 1] shrinks every range around its midpoint.
    pub fn family(n: usize, seed: u64, separation: f64) -> Result<Vec<Self>, DataError> {
        if !(separation > 0.0 && separation <= 1.0) {
            return Err(DataError::Config(format!("separation {separation} outside (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xfa11]));
        let mut columns = Vec::with_capacity(PARAMS.len());
        for &(_, _, _, lo, hi) in &PARAMS {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * separation;
            let mut strata: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                strata.swap(i, rng.random_range(0..=i));
            }
            let col: Vec<f64> = strata
                .into_iter()
                .map(|k| {
                    let u = (k as f64 + rng.random_range(0.3..0.7)) / n as f64;
                    mid - half + 2.0 * half * u
                })
                .collect();
            columns.push(col);
        }
        (0..n)
            .map(|i| {
                let p = Self::from_array(std::array::from_fn(|j| columns[j][i]));
                p.validate().map(|_| p)
            })
            .collect()
    }

    /// Day-to-day variation: each parameter moves by a normal draw with sd
    /// `amount · (family half-range)`, clamped to the plausible bounds.
    fn session(&self, amount: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut v = self.to_array();
        for (x, &(_, lo, hi, flo, fhi)) in v.iter_mut().zip(&PARAMS) {
            let z: f64 = StandardNormal.sample(rng);
            *x = (*x + z * amount * 0.5 * (fhi - flo)).clamp(lo, hi);
        }
        let mut p = Self::from_array(v);
        p.speed_ratio_mean = p
            .speed_ratio_mean
            .clamp(0.3 + 3.0 * p.speed_ratio_sd, 1.45 - 3.0 * p.speed_ratio_sd);
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    None,
    StopSign,
    Signal,
    Yield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_m: f64,
    pub length_m: f64,
    pub speed_limit: f64,
    /// Signed curvature (1/m, positive to the left).
    pub curvature: f64,
    pub lanes: usize,
    pub lane_width_m: f64,
    pub grade_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub position_m: f64,
    pub control: Control,
    /// `Some(±1)` when the route turns left (+1) or right (−1) here.
    pub turn: Option<i8>,
    pub signal_offset_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadZone {
    pub start_m: f64,
    pub end_m: f64,
    pub speed_factor: f64,
}

/// The scripted course of one area, shared by all drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteScript {
    pub area: Area,
    pub segments: Vec<Segment>,
    pub intersections: Vec<Intersection>,
    pub lead_zones: Vec<LeadZone>,
    pub signal_cycle_s: f64,
    pub signal_green_s: f64,
}

struct AreaStyle {
    limits: &'static [f64],
    segment_m: (f64, f64),
    curve_prob: f64,
    max_curvature: f64,
    lanes: (usize, usize),
    lane_width: f64,
    grade_sd: f64,
    intersection_gap_m: Option<(f64, f64)>,
    /// Weights of (none, stop, signal, yield).
    controls: [f64; 4],
    turn_prob: f64,
    lead_prob: f64,
}

fn style(area: Area) -> AreaStyle {
    match area {
        Area::Highway => AreaStyle {
            limits: &[27.8, 30.6, 33.3],
            segment_m: (600.0, 1500.0),
            curve_prob: 0.4,
            max_curvature: 1.0 / 600.0,
            lanes: (2, 3),
            lane_width: 3.7,
            grade_sd: 1.5,
            intersection_gap_m: None,
            controls: [1.0, 0.0, 0.0, 0.0],
            turn_prob: 0.0,
            lead_prob: 0.6,
        },
        Area::Suburban => AreaStyle {
            limits: &[13.9, 16.7, 19.4],
            segment_m: (150.0, 400.0),
            curve_prob: 0.35,
            max_curvature: 1.0 / 120.0,
            lanes: (1, 2),
            lane_width: 3.4,
            grade_sd: 2.0,
            intersection_gap_m: Some((150.0, 350.0)),
            controls: [0.3, 0.35, 0.15, 0.2],
            turn_prob: 0.3,
            lead_prob: 0.35,
        },
        Area::Urban => AreaStyle {
            limits: &[8.3, 11.1, 13.9],
            segment_m: (80.0, 250.0),
            curve_prob: 0.2,
            max_curvature: 1.0 / 60.0,
            lanes: (1, 2),
            lane_width: 3.1,
            grade_sd: 1.0,
            intersection_gap_m: Some((80.0, 200.0)),
            controls: [0.2, 0.25, 0.4, 0.15],
            turn_prob: 0.35,
            lead_prob: 0.5,
        },
        Area::Tutorial => AreaStyle {
            limits: &[11.1, 13.9, 22.2],
            segment_m: (150.0, 500.0),
            curve_prob: 0.3,
            max_curvature: 1.0 / 100.0,
            lanes: (1, 2),
            lane_width: 3.5,
            grade_sd: 1.0,
            intersection_gap_m: Some((200.0, 450.0)),
            controls: [0.4, 0.3, 0.2, 0.1],
            turn_prob: 0.25,
            lead_prob: 0.3,
        },
    }
}

impl RouteScript {
    /// Deterministic route for `area`, long enough for `duration_s` of
    /// driving at up to 1.45× the fastest limit.
    pub fn for_area(area: Area, duration_s: f64, route_seed: u64) -> Self {
        let st = style(area);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[route_seed, area as u64, 0x5eed]));
        let max_limit = st.limits.iter().cloned().fold(0.0, f64::max);
        let needed = max_limit * 1.45 * duration_s.max(1.0) + 500.0;

        let mut segments = Vec::new();
        let mut pos = 0.0;
        while pos < needed {
            let length_m = rng.random_range(st.segment_m.0..st.segment_m.1);
            let curvature = if rng.random_bool(st.curve_prob) {
                let k = rng.random_range(0.3..1.0) * st.max_curvature;
                if rng.random_bool(0.5) {
                    k
                } else {
                    -k
                }
            } else {
                0.0
            };
            let grade: f64 = StandardNormal.sample(&mut rng);
            segments.push(Segment {
                start_m: pos,
                length_m,
                speed_limit: st.limits[rng.random_range(0..st.limits.len())],
                curvature,
                lanes: rng.random_range(st.lanes.0..=st.lanes.1),
                lane_width_m: st.lane_width,
                grade_deg: (grade * st.grade_sd).clamp(-6.0, 6.0),
            });
            pos += length_m;
        }

        let mut intersections = Vec::new();
        if let Some((lo, hi)) = st.intersection_gap_m {
            let total: f64 = st.controls.iter().sum();
            let mut p = rng.random_range(lo..hi);
            while p < pos {
                let mut pick = rng.random_range(0.0..total);
                let mut control = Control::None;
                for (w, c) in
                    st.controls
                        .iter()
                        .zip([Control::None, Control::StopSign, Control::Signal, Control::Yield])
                {
                    if pick < *w {
                        control = c;
                        break;
                    }
                    pick -= w;
                }
                let turn = rng
                    .random_bool(st.turn_prob)
                    .then(|| if rng.random_bool(0.5) { 1 } else { -1 });
                intersections.push(Intersection {
                    position_m: p,
                    control,
                    turn,
                    signal_offset_s: rng.random_range(0.0..40.0),
                });
                p += rng.random_range(lo..hi);
            }
        }

        let mut lead_zones = Vec::new();
        let mut p = rng.random_range(50.0..400.0);
        while p < pos {
            let len = rng.random_range(300.0..1200.0);
            if rng.random_bool(st.lead_prob) {
                lead_zones.push(LeadZone {
                    start_m: p,
                    end_m: p + len,
                    speed_factor: rng.random_range(0.6..0.95),
                });
            }
            p += len + rng.random_range(100.0..600.0);
        }

        Self {
            area,
            segments,
            intersections,
            lead_zones,
            signal_cycle_s: 40.0,
            signal_green_s: 24.0,
        }
    }

    pub fn length_m(&self) -> f64 {
        self.segments.last().map(|s| s.start_m + s.length_m).unwrap_or(0.0)
    }

    pub fn max_limit(&self) -> f64 {
        self.segments.iter().map(|s| s.speed_limit).fold(0.0, f64::max)
    }

    fn segment_index(&self, s: f64, hint: usize) -> usize {
        let mut i = hint.min(self.segments.len() - 1);
        while i + 1 < self.segments.len() && s >= self.segments[i + 1].start_m {
            i += 1;
        }
        i
    }

    fn signal_green(&self, ix: &Intersection, t: f64) -> bool {
        (t + ix.signal_offset_s).rem_euclid(self.signal_cycle_s) < self.signal_green_s
    }
}

/// Top-level generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub drivers: usize,
    pub seed: u64,
    pub route_seed: u64,
    /// Fraction of the family ranges the driver profiles spread over.
    pub separation: f64,
    /// Per-recording parameter wobble, in family half-ranges.
    pub session_variability: f64,
    pub sample_rate_hz: f64,
    /// Seconds per area; empty means the typical durations of all four areas.
    pub durations_s: Vec<(Area, f64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            drivers: 8,
            seed: 0,
            route_seed: 17,
            separation: 1.0,
            session_variability: 0.15,
            sample_rate_hz: 100.0,
            durations_s: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn resolved_durations(&self) -> Vec<(Area, f64)> {
        if self.durations_s.is_empty() {
            Area::ALL.iter().map(|&a| (a, a.typical_duration_s())).collect()
        } else {
            self.durations_s.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.drivers < 2 {
            return Err(DataError::Config("need at least two synthetic drivers".into()));
        }
        if !(self.sample_rate_hz >= 10.0) {
            return Err(DataError::Config("sample rate must be at least 10 Hz".into()));
        }
        if !(self.session_variability >= 0.0 && self.session_variability.is_finite()) {
            return Err(DataError::Config("session variability must be non-negative".into()));
        }
        for (a, d) in self.resolved_durations() {
            if !(d > 0.0 && d.is_finite()) {
                return Err(DataError::Config(format!("duration for {a} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn driver_id(index: usize) -> String {
    format!("driver_{index:02}")
}

/// One recording per (profile, area), with driver ids `driver_00`, ….
pub fn generate_synthetic(profiles: &[DriverProfile], cfg: &SynthConfig) -> Result<Vec<Recording>, DataError> {
    cfg.validate()?;
    for p in profiles {
        p.validate()?;
    }
    let mut out = Vec::new();
    for (area, duration) in cfg.resolved_durations() {
        let route = RouteScript::for_area(area, duration, cfg.route_seed);
        for (i, p) in profiles.iter().enumerate() {
            let noise_seed = mix_seed(&[cfg.seed, i as u64, area as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[noise_seed, 0x5e55]));
            let session = p.session(cfg.session_variability, &mut rng);
            out.push(simulate_recording(
                &session,
                &route,
                duration,
                cfg.sample_rate_hz,
                &driver_id(i),
                noise_seed,
            )?);
        }
    }
    Ok(out)
}

struct Ou {
    z: f64,
    decay: f64,
    kick: f64,
}

impl Ou {
    fn new(tau_s: f64, dt: f64, rng: &mut ChaCha8Rng) -> Self {
        let decay = (-dt / tau_s).exp();
        Self {
            z: StandardNormal.sample(rng),
            decay,
            kick: (1.0 - decay * decay).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        self.z = self.z * self.decay + self.kick * n;
        self.z
    }
}

struct Lead {
    s: f64,
    v: f64,
    zone: usize,
}

#[derive(Default)]
struct LaneChange {
    dir: i32,
    wait_s: f64,
    signalling: bool,
}

/// Simulates one drive of `duration_s` over `route`.
pub fn simulate_recording(
    profile: &DriverProfile,
    route: &RouteScript,
    duration_s: f64,
    sample_rate_hz: f64,
    driver: &str,
    noise_seed: u64,
) -> Result<Recording, DataError> {
    profile.validate()?;
    if route.segments.is_empty() {
        return Err(DataError::Config("route has no segments".into()));
    }
    let dt = 1.0 / sample_rate_hz;
    let frames = (duration_s * sample_rate_hz).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let p = profile;

    let tau = p.accel_time_constant_s.max(dt);
    let a_max = 1.5 + 2.0 / tau;
    let b_max = 2.0 + 2.5 / tau;
    let b_plan = 0.6 * b_max;
    let a_lat = 1.8 + 1.2 / tau;
    let ratio_hi = p.speed_ratio_mean + 3.0 * p.speed_ratio_sd;
    let latency_frames = (p.reaction_latency_s * sample_rate_hz).round() as usize;

    let mut ratio_ou = Ou::new(15.0, dt, &mut rng);
    let mut lane_ou = Ou::new(4.0, dt, &mut rng);
    let mut lead_ou = Ou::new(8.0, dt, &mut rng);

    let mut data = vec![0.0; NUM_CHANNELS * frames];
    let mut delayed: VecDeque<f64> = VecDeque::with_capacity(latency_frames + 1);

    let mut s: f64 = 0.0;
    let mut v: f64 = 0.0;
    let mut seg_i = 0;
    let first = &route.segments[0];
    let mut x_lat = 0.5 * first.lane_width_m + p.lane_bias_m;
    let mut x_lat_rate = 0.0;
    let mut target_lane = 0usize;
    let mut heading = 0.0f64;
    let mut turn_left_m = 0.0;
    let mut turn_dir = 0.0;
    let mut gear = 1usize;
    let mut shift_hold = 0.0;
    let mut clutch: f64 = 0.0;
    let mut pedal_acc: f64 = 0.0;
    let mut pedal_brake: f64 = 0.0;
    let mut next_ix = 0usize;
    let mut wait_until: Option<f64> = None;
    let mut next_zone = 0usize;
    let mut lead: Option<Lead> = None;
    let mut follow_s = 0.0;
    let mut fast_lane_s = 0.0;
    let mut change: Option<LaneChange> = None;
    let mut turn_signal_decided: Option<(usize, bool)> = None;
    let mut horn_s = 0.0;
    let mut was_close = false;

    for f in 0..frames {
        let t = f as f64 * dt;
        seg_i = route.segment_index(s, seg_i);
        let seg = &route.segments[seg_i];
        let cap = seg.speed_limit * ratio_hi;

        while next_ix < route.intersections.len() && route.intersections[next_ix].position_m < s {
            next_ix += 1;
            wait_until = None;
        }

        // lead vehicles
        if lead.is_none() {
            while next_zone < route.lead_zones.len() && route.lead_zones[next_zone].end_m < s + 80.0 {
                next_zone += 1;
            }
            if let Some(z) = route.lead_zones.get(next_zone) {
                if s + 80.0 >= z.start_m {
                    lead = Some(Lead {
                        s: s + 80.0,
                        v: v.min(seg.speed_limit * z.speed_factor),
                        zone: next_zone,
                    });
                    next_zone += 1;
                }
            }
        }
        let lead_z = lead_ou.step(&mut rng);
        if let Some(l) = lead.as_mut() {
            let zone = &route.lead_zones[l.zone];
            let li = route.segment_index(l.s, seg_i);
            let lv = route.segments[li].speed_limit * zone.speed_factor * (1.0 + 0.05 * lead_z);
            l.v += (lv - l.v) * (dt / 2.0);
            l.s += l.v * dt;
            if l.s > zone.end_m || l.s - s > 300.0 {
                lead = None;
            }
        }
        let gap = lead.as_ref().map(|l| l.s - s - CAR_LENGTH);

        // desired speed
        let z = ratio_ou.step(&mut rng).clamp(-3.0, 3.0);
        let mut v_des = seg.speed_limit * (p.speed_ratio_mean + p.speed_ratio_sd * z);
        if seg.curvature != 0.0 {
            v_des = v_des.min((a_lat / seg.curvature.abs()).sqrt());
        }
        if let Some(nx) = route.segments.get(seg_i + 1) {
            let d = nx.start_m - s;
            let mut v_next = nx.speed_limit * (p.speed_ratio_mean + p.speed_ratio_sd * z);
            if nx.curvature != 0.0 {
                v_next = v_next.min((a_lat / nx.curvature.abs()).sqrt());
            }
            v_des = v_des.min((v_next * v_next + 2.0 * b_plan * d).sqrt());
        }
        if let Some(ix) = route.intersections.get(next_ix) {
            let d = ix.position_m - s;
            let stop_target = |d: f64| (2.0 * b_plan * (d - 1.5).max(0.0)).sqrt();
            match ix.control {
                Control::StopSign => {
                    if wait_until.is_none() && d < 4.0 && v < 0.3 {
                        wait_until = Some(t + 1.0 + 2.0 * p.reaction_latency_s);
                    }
                    match wait_until {
                        Some(w) if t >= w => {}
                        _ => v_des = v_des.min(stop_target(d)),
                    }
                }
                Control::Signal => {
                    let can_stop = d > v * v / (2.0 * b_max) + 0.5;
                    if !route.signal_green(ix, t) && can_stop {
                        v_des = v_des.min(stop_target(d));
                    }
                }
                Control::Yield => {
                    let vy = 4.0 + 4.0 * (p.speed_ratio_mean - 0.85);
                    v_des = v_des.min((vy * vy + 2.0 * b_plan * (d - 2.0).max(0.0)).sqrt());
                }
                Control::None => {}
            }
            if ix.turn.is_some() {
                v_des = v_des.min((36.0 + 2.0 * b_plan * d.max(0.0)).sqrt());
            }
        }
        if let Some(g) = gap {
            v_des = v_des.min(((g - 3.0) / p.headway_s).max(0.0));
        }
        let v_des = v_des.clamp(0.0, cap);

        delayed.push_back(v_des);
        let v_tgt = if delayed.len() > latency_frames {
            delayed.pop_front().unwrap()
        } else {
            0.0
        };

        // longitudinal
        let emergency = gap.is_some_and(|g| g < 1.5 * v + 2.0);
        let lo = if emergency { -8.0 } else { -b_max };
        let mut a_cmd = ((v_tgt - v) / tau).clamp(lo, a_max);
        if emergency && a_cmd > 0.0 {
            a_cmd = 0.0;
        }
        let mut v_new = (v + a_cmd * dt).max(0.0);
        if let Some(l) = lead.as_ref() {
            if l.s - CAR_LENGTH - 0.5 <= s + v_new * dt {
                v_new = v_new.min(l.v.max(0.0));
            }
        }
        let a_long = (v_new - v) / dt;
        v = v_new;
        let ds = v * dt;
        s += ds;

        let pedal_tc = dt / 0.2;
        pedal_acc += ((a_cmd / a_max).clamp(0.0, 1.0) - pedal_acc) * pedal_tc;
        pedal_brake += ((-a_cmd / b_max).clamp(0.0, 1.0) - pedal_brake) * pedal_tc;

        // gearbox
        let rpm = |g: usize, v: f64| v / WHEEL_RADIUS * GEAR_RATIOS[g - 1] * FINAL_DRIVE * 60.0 / (2.0 * PI);
        shift_hold -= dt;
        if v < 0.5 {
            if gear != 1 {
                gear = 1;
                clutch = 1.0;
            }
        } else if shift_hold <= 0.0 {
            if gear < 6 && rpm(gear, v) > p.shift_rpm {
                gear += 1;
                clutch = 1.0;
                shift_hold = 0.8;
            } else if gear > 1 && rpm(gear, v) < 0.5 * p.shift_rpm {
                gear -= 1;
                clutch = 1.0;
                shift_hold = 0.8;
            }
        }
        clutch = (clutch - dt / 0.4).max(0.0);

        // lane choice and overtaking
        let lanes = seg.lanes.max(1);
        let w = seg.lane_width_m;
        target_lane = target_lane.min(lanes - 1);
        let following = gap.is_some_and(|g| g < 2.0 * p.headway_s * v.max(5.0));
        follow_s = if following { follow_s + dt } else { 0.0 };
        fast_lane_s = if target_lane > 0 { fast_lane_s + dt } else { 0.0 };
        if change.is_none() {
            if follow_s > 4.0 && target_lane + 1 < lanes {
                change = Some(LaneChange {
                    dir: 1,
                    wait_s: 1.5,
                    signalling: rng.random_bool(p.turn_signal_prob),
                });
            } else if fast_lane_s > 15.0 && target_lane > 0 && lead.is_none() {
                change = Some(LaneChange {
                    dir: -1,
                    wait_s: 1.5,
                    signalling: rng.random_bool(p.turn_signal_prob),
                });
            }
        }
        let mut indicator = false;
        if let Some(c) = change.as_mut() {
            indicator = c.signalling;
            if c.wait_s > 0.0 {
                c.wait_s -= dt;
                if c.wait_s <= 0.0 {
                    target_lane = (target_lane as i32 + c.dir).clamp(0, lanes as i32 - 1) as usize;
                    if c.dir > 0 {
                        lead = None;
                        follow_s = 0.0;
                    }
                }
            } else {
                let goal = (target_lane as f64 + 0.5) * w + p.lane_bias_m;
                if (x_lat - goal).abs() < 0.3 {
                    change = None;
                }
            }
        }

        // intersection turns
        let mut near_intersection = false;
        if let Some(ix) = route.intersections.get(next_ix) {
            let d = ix.position_m - s;
            near_intersection = d < 50.0;
            if let Some(dir) = ix.turn {
                if d < 50.0 {
                    let signals = match turn_signal_decided {
                        Some((i, sig)) if i == next_ix => sig,
                        _ => {
                            let sig = rng.random_bool(p.turn_signal_prob);
                            turn_signal_decided = Some((next_ix, sig));
                            sig
                        }
                    };
                    indicator |= signals;
                }
                if d <= ds {
                    turn_left_m = 15.0;
                    turn_dir = dir as f64;
                }
            }
        }
        let mut k_turn = 0.0;
        if turn_left_m > 0.0 {
            k_turn = turn_dir * (PI / 2.0) / 15.0;
            turn_left_m -= ds;
        }

        // lateral
        let goal = (target_lane as f64 + 0.5) * w + p.lane_bias_m + p.lane_jitter_m * lane_ou.step(&mut rng);
        let tl = p.steering_smoothness_s;
        let x_acc = (goal - x_lat) / (tl * tl) - 2.0 * x_lat_rate / tl;
        x_lat_rate += x_acc * dt;
        x_lat += x_lat_rate * dt;
        x_lat = x_lat.clamp(0.2, lanes as f64 * w - 0.2);
        let current_lane = ((x_lat / w).floor() as usize).min(lanes - 1);
        let y = x_lat - (current_lane as f64 + 0.5) * w;

        let k_eff = seg.curvature + k_turn + x_acc / (v * v).max(4.0);
        heading = (heading + (seg.curvature + k_turn) * ds * 180.0 / PI).rem_euclid(360.0);
        let steer_noise: f64 = StandardNormal.sample(&mut rng);
        let steering = STEERING_RATIO * (WHEELBASE * k_eff).atan().to_degrees() + 0.3 * steer_noise;

        // horn on closing in hard
        let close = gap.is_some_and(|g| g < 0.4 * p.headway_s * v && v > 3.0);
        if close && !was_close && rng.random_bool(0.3) {
            horn_s = 0.5;
        }
        was_close = close;
        let horn = horn_s > 0.0;
        horn_s -= dt;

        let grade = seg.grade_deg.to_radians();
        let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
            let n: f64 = StandardNormal.sample(rng);
            sd * n
        };
        let dist_to = |pred: &dyn Fn(&Intersection) -> bool| -> f64 {
            route.intersections[next_ix..]
                .iter()
                .find(|ix| pred(ix))
                .map(|ix| (ix.position_m - s).clamp(0.0, DISTANCE_CAP))
                .unwrap_or(DISTANCE_CAP)
        };

        let row = [
            a_long + noise(&mut rng, 0.05),
            v * v * k_eff + x_acc + noise(&mut rng, 0.05),
            GRAVITY * grade.cos() + noise(&mut rng, 0.05),
            gap.map(|g| g.clamp(0.0, DISTANCE_CAP)).unwrap_or(DISTANCE_CAP),
            dist_to(&|_| true),
            dist_to(&|ix| ix.control == Control::StopSign),
            dist_to(&|ix| ix.control == Control::Signal),
            dist_to(&|ix| ix.control == Control::Yield),
            (route.length_m() - s).max(0.0),
            gear as f64,
            clutch,
            lanes as f64,
            (lanes > 1 && current_lane == lanes - 1) as u8 as f64,
            0.5 * w + y,
            y,
            0.5 * w - y,
            w,
            pedal_acc,
            pedal_brake,
            steering,
            if seg.curvature == 0.0 {
                10_000.0
            } else {
                (1.0f64 / seg.curvature.abs()).min(10_000.0)
            },
            seg.grade_deg,
            v,
            x_lat_rate,
            v * grade.sin(),
            lead.as_ref().map(|l| l.v).unwrap_or(0.0),
            seg.speed_limit,
            indicator as u8 as f64,
            (indicator && near_intersection) as u8 as f64,
            horn as u8 as f64,
            heading,
        ];
        for (c, val) in row.into_iter().enumerate() {
            data[c * frames + f] = val;
        }
    }

    Recording::new(
        driver,
        route.area,
        CHANNELS.iter().map(|c| c.to_string()).collect(),
        frames,
        data,
    )
}
