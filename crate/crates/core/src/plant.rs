//! Synthetic ground-truth soft robot: three-chamber constant-curvature arc
//! with a per-chamber play-operator hysteresis in front of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{KeyPointSet, Point3};

pub type Pressures = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("chamber {chamber} pressure {value} kPa outside [{min}, {max}]")]
    InputRange {
        chamber: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("hysteresis calibration failed: {0}")]
    Calibration(String),
}

/// Plant constants. None of these come from a physical robot; they size a
/// workspace of a few tens of millimetres around a 70 mm body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// mm
    pub length_rest: f64,
    /// mm
    pub radius: f64,
    /// Radial distance of the chamber axes, mm.
    pub chamber_offset: f64,
    /// mm / kPa
    pub elong_gain: f64,
    /// 1 / (mm kPa)
    pub bend_gain: f64,
    /// kPa
    pub hysteresis_halfwidth: f64,
    pub n_keys: usize,
    /// kPa
    pub pressure_min: f64,
    /// kPa
    pub pressure_max: f64,
    /// Standard deviation of additive key-point noise, mm.
    pub noise_sigma: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            length_rest: 70.0,
            radius: 7.5,
            chamber_offset: 4.5,
            elong_gain: 0.1,
            bend_gain: 2.5e-4,
            hysteresis_halfwidth: 0.0,
            n_keys: 5,
            pressure_min: 0.0,
            pressure_max: 60.0,
            noise_sigma: 0.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let fail = |m: &str| Err(PlantError::InvalidParams(m.to_string()));
        let finite = [
            self.length_rest,
            self.radius,
            self.chamber_offset,
            self.elong_gain,
            self.bend_gain,
            self.hysteresis_halfwidth,
            self.pressure_min,
            self.pressure_max,
            self.noise_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("non-finite parameter");
        }
        if self.length_rest <= 0.0 {
            return fail("length_rest must be positive");
        }
        if self.hysteresis_halfwidth < 0.0 {
            return fail("hysteresis_halfwidth must be non-negative");
        }
        if self.pressure_min >= self.pressure_max {
            return fail("pressure_min must be below pressure_max");
        }
        if self.n_keys < 2 {
            return fail("n_keys must be at least 2");
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn pressure_range(&self) -> f64 {
        self.pressure_max - self.pressure_min
    }

    pub fn check_pressures(&self, p: &Pressures) -> Result<(), PlantError> {
        const SLACK: f64 = 1e-9;
        for (chamber, &value) in p.iter().enumerate() {
            if !(value >= self.pressure_min - SLACK && value <= self.pressure_max + SLACK) {
                return Err(PlantError::InputRange {
                    chamber,
                    value,
                    min: self.pressure_min,
                    max: self.pressure_max,
                });
            }
        }
        Ok(())
    }

    pub fn clamp_pressures(&self, p: Pressures) -> Pressures {
        p.map(|v| v.clamp(self.pressure_min, self.pressure_max))
    }
}

/// Internal play-operator value per chamber, kPa.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HysteresisState(pub Pressures);

/// Backlash operator: each chamber's state is dragged along by the input
/// once the input leaves the band `[state - h, state + h]`.
pub fn play_update(state: HysteresisState, p: Pressures, halfwidth: f64) -> (HysteresisState, Pressures) {
    let mut next = state.0;
    for (s, &pi) in next.iter_mut().zip(&p) {
        *s = s.clamp(pi - halfwidth, pi + halfwidth);
    }
    (HysteresisState(next), next)
}

/// Arc parameters `(length, curvature, bending-plane angle)`.
pub fn arc_parameters(p_eff: &Pressures, params: &PlantParams) -> (f64, f64, f64) {
    let [p1, p2, p3] = *p_eff;
    let length = params.length_rest + params.elong_gain * (p1 + p2 + p3);
    let mag = (p1 * p1 + p2 * p2 + p3 * p3 - p1 * p2 - p2 * p3 - p3 * p1).max(0.0).sqrt();
    let curvature = params.bend_gain * mag;
    let phi = (3f64.sqrt() * (p3 - p2)).atan2(2.0 * p1 - p2 - p3);
    (length, curvature, phi)
}

/// Point at arc length `s` of a constant-curvature arc leaving the origin
/// along +z and bending in the plane at angle `phi`.
pub fn arc_point(s: f64, curvature: f64, phi: f64) -> Point3 {
    if curvature < 1e-12 {
        return Point3::new(0.0, 0.0, s);
    }
    let theta = curvature * s;
    let radial = (1.0 - theta.cos()) / curvature;
    Point3::new(radial * phi.cos(), radial * phi.sin(), theta.sin() / curvature)
}

/// Key points at equal arc-length fractions along the deformed body.
pub fn pcc_forward(p_eff: &Pressures, params: &PlantParams) -> KeyPointSet {
    let (length, curvature, phi) = arc_parameters(p_eff, params);
    let last = (params.n_keys - 1) as f64;
    let points = (0..params.n_keys)
        .map(|i| arc_point(length * i as f64 / last, curvature, phi))
        .collect();
    KeyPointSet::new(points).expect("finite arc points")
}

/// Stateful plant instance. Single-threaded; clone for independent copies.
#[derive(Debug, Clone)]
pub struct Plant {
    params: PlantParams,
    state: HysteresisState,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(params: PlantParams, seed: u64) -> Result<Self, PlantError> {
        params.validate()?;
        Ok(Self {
            params,
            state: HysteresisState([params.pressure_min.max(0.0).min(params.pressure_max); 3]),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn state(&self) -> HysteresisState {
        self.state
    }

    pub fn set_state(&mut self, state: HysteresisState) {
        self.state = state;
    }

    /// Pushes the pressure through the play operator without producing a
    /// reading. Used by the actuation loop between readings.
    pub fn apply_pressure(&mut self, p: Pressures) -> Result<Pressures, PlantError> {
        self.params.check_pressures(&p)?;
        let (state, p_eff) = play_update(self.state, p, self.params.hysteresis_halfwidth);
        self.state = state;
        Ok(p_eff)
    }

    /// One quasi-static evaluation.
    pub fn eval(&mut self, p: Pressures) -> Result<KeyPointSet, PlantError> {
        self.read_averaged(p, 1)
    }

    /// Settles at `p`, then averages `reads` noisy measurements.
    pub fn read_averaged(&mut self, p: Pressures, reads: usize) -> Result<KeyPointSet, PlantError> {
        let p_eff = self.apply_pressure(p)?;
        let clean = pcc_forward(&p_eff, &self.params);
        if self.params.noise_sigma == 0.0 || reads == 0 {
            return Ok(clean);
        }
        let noise = Normal::new(0.0, self.params.noise_sigma).expect("validated sigma");
        let mut flat = clean.flatten();
        let mut acc = vec![0.0; flat.len()];
        for _ in 0..reads {
            // the base is clamped to the fixture and never moves
            for a in acc.iter_mut().skip(3) {
                *a += noise.sample(&mut self.rng);
            }
        }
        for (v, a) in flat.iter_mut().zip(&acc) {
            *v += a / reads as f64;
        }
        Ok(KeyPointSet::from_flat(&flat).expect("finite noisy points"))
    }
}

/// Largest tip distance between ascending and descending branches of a
/// single-chamber sweep, over all three chambers, in millimetres.
pub fn max_sweep_deviation(params: &PlantParams, halfwidth: f64) -> f64 {
    const STEP: f64 = 0.25;
    let levels = (params.pressure_range() / STEP).round() as usize;
    let level = |i: usize| params.pressure_min + params.pressure_range() * i as f64 / levels as f64;
    let mut worst = 0.0f64;
    for chamber in 0..3 {
        let mut p = [params.pressure_min; 3];
        let mut state = HysteresisState(p);
        let mut up = Vec::with_capacity(levels + 1);
        for i in 0..=levels {
            p[chamber] = level(i);
            let (s, eff) = play_update(state, p, halfwidth);
            state = s;
            up.push(pcc_forward(&eff, params).tip());
        }
        for i in (0..=levels).rev() {
            p[chamber] = level(i);
            let (s, eff) = play_update(state, p, halfwidth);
            state = s;
            worst = worst.max((pcc_forward(&eff, params).tip() - up[i]).norm());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub halfwidth: f64,
    /// Achieved deviation as a fraction of `length_rest`.
    pub deviation_fraction: f64,
    pub iterations: usize,
}

/// Bisects the play half-width over `[0, range / 4]` so the full-sweep tip deviation equals
/// `target_fraction * length_rest`.
pub fn calibrate_hysteresis(params: &PlantParams, target_fraction: f64) -> Result<Calibration, PlantError> {
    params.validate()?;
    if target_fraction == 0.0 {
        return Ok(Calibration {
            halfwidth: 0.0,
            deviation_fraction: 0.0,
            iterations: 0,
        });
    }
    if !(target_fraction > 0.0 && target_fraction <= 0.1) {
        return Err(PlantError::Calibration(format!(
            "target fraction {target_fraction} outside (0, 0.1]"
        )));
    }
    let target = target_fraction * params.length_rest;
    // Deviation peaks once the band spans a third of the range; stay below it.
    let (mut lo, mut hi) = (0.0, 0.25 * params.pressure_range());
    let (mut dev_lo, mut dev_hi) = (max_sweep_deviation(params, lo), max_sweep_deviation(params, hi));
    if dev_hi < target {
        return Err(PlantError::Calibration(format!(
            "maximum reachable deviation {dev_hi:.4} mm below target {target:.4} mm"
        )));
    }
    let mut iterations = 0;
    let mut mid = 0.5 * (lo + hi);
    while iterations < 200 {
        iterations += 1;
        mid = 0.5 * (lo + hi);
        let dev = max_sweep_deviation(params, mid);
        if dev < dev_lo - 1e-12 || dev > dev_hi + 1e-12 {
            return Err(PlantError::Calibration(format!(
                "deviation not monotone in half-width near {mid} kPa"
            )));
        }
        if (dev - target).abs() <= 1e-9 * target {
            break;
        }
        if dev < target {
            lo = mid;
            dev_lo = dev;
        } else {
            hi = mid;
            dev_hi = dev;
        }
    }
    Ok(Calibration {
        halfwidth: mid,
        deviation_fraction: max_sweep_deviation(params, mid) / params.length_rest,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    #[test]
    fn zero_width_play_is_identity() {
        let mut s = HysteresisState::default();
        for p in [[1.0, 5.0, 2.0], [0.0, 3.0, 9.0], [7.5, 7.5, 0.1]] {
            let (next, eff) = play_update(s, p, 0.0);
            assert_eq!(eff, p);
            s = next;
        }
    }

    #[test]
    fn play_branches_by_hand() {
        let h = 2.0;
        let mut s = HysteresisState::default();
        let mut ascending_at_6 = None;
        for k in 0..=10 {
            let (next, eff) = play_update(s, [k as f64; 3], h);
            s = next;
            if k == 6 {
                ascending_at_6 = Some(eff[0]);
            }
        }
        let mut descending_at_6 = None;
        for k in (6..=10).rev() {
            let (next, eff) = play_update(s, [k as f64; 3], h);
            s = next;
            if k == 6 {
                descending_at_6 = Some(eff[0]);
            }
        }
        assert_eq!(ascending_at_6, Some(4.0));
        assert_eq!(descending_at_6, Some(8.0));
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let (s1, e1) = play_update(HysteresisState([3.0, -1.0, 9.0]), [4.0, 4.0, 4.0], 1.5);
        let (s2, e2) = play_update(s1, [4.0, 4.0, 4.0], 1.5);
        assert_eq!(s1, s2);
        assert_eq!(e1, e2);
    }

    proptest! {
        #[test]
        fn play_band_invariant(h in 0.0f64..5.0, path in prop::collection::vec(prop::array::uniform3(0.0f64..60.0), 1..40)) {
            let mut s = HysteresisState::default();
            for p in path {
                let (next, _) = play_update(s, p, h);
                for i in 0..3 {
                    prop_assert!((p[i] - next.0[i]).abs() <= h + 1e-12);
                }
                s = next;
            }
        }

        #[test]
        fn play_is_rate_independent(h in 0.0f64..5.0, a in 0.0f64..60.0, b in 0.0f64..60.0, c in 0.0f64..60.0, refine in 1usize..20) {
            // path a -> b -> c; the refined version inserts points on each monotone leg
            let coarse = [a, b, c];
            let mut fine = vec![a];
            for w in coarse.windows(2) {
                for k in 1..=refine {
                    fine.push(w[0] + (w[1] - w[0]) * k as f64 / refine as f64);
                }
            }
            let run = |path: &[f64]| {
                path.iter().fold(HysteresisState::default(), |s, &p| play_update(s, [p; 3], h).0)
            };
            let (x, y) = (run(&coarse), run(&fine));
            for i in 0..3 {
                prop_assert!((x.0[i] - y.0[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_pressure_is_straight() {
        let params = PlantParams::default();
        let keys = pcc_forward(&[0.0; 3], &params);
        assert_eq!(keys.len(), 5);
        for (i, p) in keys.points().iter().enumerate() {
            assert_abs_diff_eq!(*p, Point3::new(0.0, 0.0, 70.0 * i as f64 / 4.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_pressures_only_elongate() {
        let params = PlantParams::default();
        let c = 12.0;
        let keys = pcc_forward(&[c; 3], &params);
        assert_abs_diff_eq!(keys.tip(), Point3::new(0.0, 0.0, 70.0 + 3.0 * 0.1 * c), epsilon = 1e-9);
    }

    /// RK4 integration of the constant-curvature frame ODE:
    /// r' = t, t' = kappa * n, n' = -kappa * t (planar Frenet frame).
    fn rk4_tip(length: f64, kappa: f64, phi: f64, steps: usize) -> Point3 {
        let bend = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let mut state = [Vector3::zeros(), Vector3::z(), bend];
        let f = |s: &[Vector3<f64>; 3]| [s[1], s[2] * kappa, -s[1] * kappa];
        let h = length / steps as f64;
        for _ in 0..steps {
            let k1 = f(&state);
            let add = |s: &[Vector3<f64>; 3], k: &[Vector3<f64>; 3], c: f64| {
                [s[0] + k[0] * c, s[1] + k[1] * c, s[2] + k[2] * c]
            };
            let k2 = f(&add(&state, &k1, h / 2.0));
            let k3 = f(&add(&state, &k2, h / 2.0));
            let k4 = f(&add(&state, &k3, h));
            for i in 0..3 {
                state[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            }
        }
        Point3::from(state[0])
    }

    #[test]
    fn arc_tip_matches_frame_integration() {
        let params = PlantParams::default();
        for p in [[10.0, 0.0, 0.0], [0.0, 25.0, 7.0], [40.0, 3.0, 55.0]] {
            let (length, kappa, phi) = arc_parameters(&p, &params);
            let oracle = rk4_tip(length, kappa, phi, 2000);
            let tip = pcc_forward(&p, &params).tip();
            assert!((tip - oracle).norm() < 1e-6, "{p:?}: {tip} vs {oracle}");
        }
    }

    #[test]
    fn key_points_lie_on_one_circle() {
        let params = PlantParams::default();
        for p in [[10.0, 0.0, 0.0], [30.0, 5.0, 12.0], [60.0, 60.0, 0.0]] {
            let keys = pcc_forward(&p, &params);
            let (_, kappa, _) = arc_parameters(&p, &params);
            assert!(kappa > 1e-6);
            let fit = crate::geometry::fit_circle_3d(keys.points()).unwrap();
            assert!(fit.residual < 1e-6);
            assert_abs_diff_eq!(fit.radius, 1.0 / kappa, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn cyclic_chamber_shift_rotates_body(p1 in 0.0f64..60.0, p2 in 0.0f64..60.0, p3 in 0.0f64..60.0) {
            let params = PlantParams::default();
            let a = pcc_forward(&[p1, p2, p3], &params);
            let b = pcc_forward(&[p3, p1, p2], &params);
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -120f64.to_radians());
            for (pa, pb) in a.points().iter().zip(b.points()) {
                prop_assert!((rot * pa - pb).norm() < 1e-9);
            }
        }

        #[test]
        fn consecutive_keys_equally_spaced_along_arc(p1 in 0.0f64..60.0, p2 in 0.0f64..60.0, p3 in 0.0f64..60.0) {
            let params = PlantParams::default();
            let keys = pcc_forward(&[p1, p2, p3], &params);
            let chords: Vec<f64> = keys.points().windows(2).map(|w| (w[1] - w[0]).norm()).collect();
            for c in &chords {
                prop_assert!((c - chords[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn memoryless_without_hysteresis() {
        let mut plant = Plant::new(PlantParams::default(), 0).unwrap();
        let a = plant.eval([20.0, 5.0, 0.0]).unwrap();
        plant.eval([50.0, 50.0, 10.0]).unwrap();
        let b = plant.eval([20.0, 5.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn branches_differ_with_hysteresis() {
        let params = PlantParams {
            hysteresis_halfwidth: 1.5,
            ..PlantParams::default()
        };
        let mut plant = Plant::new(params, 0).unwrap();
        for k in 0..=30 {
            plant.eval([k as f64, 0.0, 0.0]).unwrap();
        }
        let up = plant.eval([30.0, 0.0, 0.0]).unwrap();
        for k in (20..=60).rev() {
            plant.eval([k as f64, 0.0, 0.0]).unwrap();
        }
        for k in 20..=30 {
            plant.eval([k as f64, 0.0, 0.0]).unwrap();
        }
        let up_again = plant.eval([30.0, 0.0, 0.0]).unwrap();
        assert_eq!(up, up_again);
        for k in (30..=60).rev().chain(std::iter::once(30)) {
            plant.eval([k as f64, 0.0, 0.0]).unwrap();
        }
        let down = plant.eval([30.0, 0.0, 0.0]).unwrap();
        assert!((down.tip() - up.tip()).norm() > 0.1);
    }

    #[test]
    fn out_of_range_pressure_rejected() {
        let mut plant = Plant::new(PlantParams::default(), 0).unwrap();
        assert!(matches!(
            plant.eval([61.0, 0.0, 0.0]),
            Err(PlantError::InputRange { chamber: 0, .. })
        ));
        assert!(matches!(
            plant.eval([0.0, -0.5, 0.0]),
            Err(PlantError::InputRange { chamber: 1, .. })
        ));
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let params = PlantParams {
            noise_sigma: 0.05,
            hysteresis_halfwidth: 1.0,
            ..PlantParams::default()
        };
        let mut a = Plant::new(params, 42).unwrap();
        let mut b = Plant::new(params, 42).unwrap();
        for p in [[1.0, 2.0, 3.0], [10.0, 0.0, 4.0], [2.0, 2.0, 50.0]] {
            let ya = a.read_averaged(p, 5).unwrap();
            let yb = b.read_averaged(p, 5).unwrap();
            assert_eq!(ya.flatten(), yb.flatten());
            assert_eq!(ya.base(), Point3::origin());
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            PlantParams { length_rest: 0.0, ..PlantParams::default() },
            PlantParams { hysteresis_halfwidth: -1.0, ..PlantParams::default() },
            PlantParams { pressure_min: 60.0, ..PlantParams::default() },
            PlantParams { n_keys: 1, ..PlantParams::default() },
        ];
        for params in bad {
            assert!(params.validate().is_err());
        }
    }

    #[test]
    fn calibration_zero_target() {
        let cal = calibrate_hysteresis(&PlantParams::default(), 0.0).unwrap();
        assert_eq!(cal.halfwidth, 0.0);
    }

    #[test]
    fn deviation_monotone_over_bracket() {
        let params = PlantParams::default();
        let mut prev = 0.0;
        for k in 0..=30 {
            let dev = max_sweep_deviation(&params, 0.5 * k as f64);
            assert!(dev >= prev - 1e-12);
            prev = dev;
        }
        assert_eq!(max_sweep_deviation(&params, 0.0), 0.0);
    }

    #[test]
    fn calibration_hits_target() {
        let params = PlantParams::default();
        let cal = calibrate_hysteresis(&params, 0.034).unwrap();
        assert!(cal.halfwidth > 0.0);
        let check = PlantParams {
            hysteresis_halfwidth: cal.halfwidth,
            ..params
        };
        let frac = max_sweep_deviation(&check, check.hysteresis_halfwidth) / params.length_rest;
        assert!((frac - 0.034).abs() <= 0.001 * 0.034, "{frac}");
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        let params = PlantParams::default();
        assert!(calibrate_hysteresis(&params, 0.2).is_err());
        assert!(calibrate_hysteresis(&params, -0.01).is_err());
        let stiff = PlantParams {
            bend_gain: 1e-9,
            elong_gain: 1e-9,
            ..params
        };
        assert!(matches!(
            calibrate_hysteresis(&stiff, 0.05),
            Err(PlantError::Calibration(_))
        ));
    }
}
