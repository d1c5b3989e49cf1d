//! PID pressure regulation over a rate-limited syringe actuator.

use serde::{Deserialize, Serialize};

use crate::plant::Pressures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the error integral, kPa·s.
    pub integral_clamp: f64,
    /// Bound on the controller output, actuator speed units.
    pub output_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.8,
            ki: 0.1,
            kd: 0.2,
            integral_clamp: 0.2,
            output_clamp: 2.5,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), String> {
        let gains = [self.kp, self.ki, self.kd];
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err("PID gains must be finite and non-negative".into());
        }
        if !(self.integral_clamp > 0.0 && self.output_clamp > 0.0) {
            return Err("PID clamps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorParams {
    /// Pressure rate per unit control, kPa/s.
    pub k_act: f64,
    /// Maximum |dp/dt|, kPa/s.
    pub rate_limit: f64,
    pub min_pressure: f64,
    pub max_pressure: f64,
    /// Inner loop period, s.
    pub dt: f64,
    /// Inner ticks per environment step.
    pub ticks_per_step: usize,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self {
            k_act: 4.0,
            rate_limit: 10.0,
            min_pressure: 0.0,
            max_pressure: 60.0,
            dt: 0.02,
            ticks_per_step: 125,
        }
    }
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_act > 0.0 && self.rate_limit > 0.0 && self.dt > 0.0) {
            return Err("actuator gain, rate limit and dt must be positive".into());
        }
        if !(self.min_pressure < self.max_pressure) {
            return Err("actuator pressure bounds are empty".into());
        }
        if self.ticks_per_step == 0 {
            return Err("at least one inner tick per step is required".into());
        }
        Ok(())
    }

    pub fn step_period(&self) -> f64 {
        self.dt * self.ticks_per_step as f64
    }
}

/// One chamber's loop state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelState {
    pub pressure: f64,
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl ChannelState {
    pub fn at(pressure: f64) -> Self {
        Self {
            pressure,
            ..Self::default()
        }
    }
}

/// Returns the control output and the updated integral/error memory.
/// The derivative term is zero on the first call after a reset.
pub fn pid_step(gains: &PidGains, state: &ChannelState, setpoint: f64, dt: f64) -> (f64, ChannelState) {
    debug_assert!(dt > 0.0);
    let error = setpoint - state.pressure;
    let integral = (state.integral + error * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = state.prev_error.map_or(0.0, |prev| (error - prev) / dt);
    let u = (gains.kp * error + gains.ki * integral + gains.kd * derivative).clamp(-gains.output_clamp, gains.output_clamp);
    let next = ChannelState {
        pressure: state.pressure,
        integral,
        prev_error: Some(error),
    };
    (u, next)
}

/// Integrates `dp/dt = k_act·u` under the rate limit and pressure bounds.
pub fn actuator_step(params: &ActuatorParams, pressure: f64, u: f64, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let rate = (params.k_act * u).clamp(-params.rate_limit, params.rate_limit);
    (pressure + rate * dt).clamp(params.min_pressure, params.max_pressure)
}

/// Three independent chamber loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    pub gains: PidGains,
    pub params: ActuatorParams,
    channels: [ChannelState; 3],
}

impl Actuator {
    pub fn new(gains: PidGains, params: ActuatorParams, initial: Pressures) -> Self {
        Self {
            gains,
            params,
            channels: initial.map(ChannelState::at),
        }
    }

    pub fn pressures(&self) -> Pressures {
        self.channels.map(|c| c.pressure)
    }

    pub fn channels(&self) -> &[ChannelState; 3] {
        &self.channels
    }

    pub fn reset(&mut self, pressures: Pressures) {
        self.channels = pressures.map(ChannelState::at);
    }

    /// One inner tick for all chambers.
    pub fn tick(&mut self, setpoints: &Pressures) -> Pressures {
        let dt = self.params.dt;
        for (ch, &target) in self.channels.iter_mut().zip(setpoints) {
            let (u, mut next) = pid_step(&self.gains, ch, target, dt);
            next.pressure = actuator_step(&self.params, ch.pressure, u, dt);
            *ch = next;
        }
        self.pressures()
    }

    /// Runs a full environment step; `on_tick` sees every intermediate
    /// pressure so a path-dependent plant can follow it. The error memory is
    /// cleared first so a new setpoint never produces a derivative kick.
    pub fn run_step(&mut self, setpoints: &Pressures, mut on_tick: impl FnMut(&Pressures)) -> Pressures {
        for ch in &mut self.channels {
            ch.prev_error = None;
        }
        for _ in 0..self.params.ticks_per_step {
            let p = self.tick(setpoints);
            on_tick(&p);
        }
        self.pressures()
    }
}

/// Single-chamber closed-loop response to a constant setpoint.
pub fn step_response(gains: &PidGains, params: &ActuatorParams, start: f64, setpoint: f64, ticks: usize) -> Vec<f64> {
    let mut state = ChannelState::at(start);
    let mut trace = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let (u, mut next) = pid_step(gains, &state, setpoint, params.dt);
        next.pressure = actuator_step(params, state.pressure, u, params.dt);
        state = next;
        trace.push(state.pressure);
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_error_gives_zero_output() {
        let g = PidGains::default();
        let mut s = ChannelState::at(5.0);
        for _ in 0..10 {
            let (u, next) = pid_step(&g, &s, 5.0, 0.02);
            assert_eq!(u, 0.0);
            s = next;
        }
    }

    #[test]
    fn pure_proportional() {
        let g = PidGains {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            integral_clamp: 1.0,
            output_clamp: 10.0,
        };
        let (u, _) = pid_step(&g, &ChannelState::at(1.0), 3.0, 0.02);
        assert_eq!(u, 2.0);
    }

    #[test]
    fn first_step_has_no_derivative_kick() {
        let g = PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 1.0,
            ..PidGains::default()
        };
        let (u, s) = pid_step(&g, &ChannelState::at(0.0), 2.0, 0.02);
        assert_eq!(u, 0.0);
        let (u, _) = pid_step(&g, &ChannelState { pressure: 0.5, ..s }, 2.0, 0.02);
        assert!((u + 25.0_f64).abs() < 1e-9 || u == -g.output_clamp);
    }

    #[test]
    fn zero_control_holds_pressure() {
        let p = ActuatorParams::default();
        assert_eq!(actuator_step(&p, 12.5, 0.0, 0.02), 12.5);
    }

    #[test]
    fn saturated_control_ramps_at_rate_limit() {
        let p = ActuatorParams::default();
        let mut x = 10.0;
        for i in 1..=50 {
            x = actuator_step(&p, x, 100.0, 0.02);
            assert!((x - (10.0 + 0.2 * i as f64)).abs() < 1e-9);
        }
        assert_eq!(actuator_step(&p, 59.9, 100.0, 0.02), 60.0);
        assert_eq!(actuator_step(&p, 0.1, -100.0, 0.02), 0.0);
    }

    #[test]
    fn step_to_ten_settles_without_overshoot() {
        let (g, p) = (PidGains::default(), ActuatorParams::default());
        let trace = step_response(&g, &p, 0.0, 10.0, 500);
        let peak = trace.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak <= 10.5, "overshoot {peak}");
        let last_outside = trace.iter().rposition(|x| (x - 10.0).abs() > 0.2).map_or(0, |i| i + 1);
        let settle = last_outside as f64 * p.dt;
        assert!(settle <= 3.0, "settling time {settle}");
    }

    #[test]
    fn small_steps_finish_within_one_env_step() {
        let (g, p) = (PidGains::default(), ActuatorParams::default());
        for (start, target) in [(20.0, 23.0), (23.0, 20.0), (0.0, 3.0), (60.0, 57.0)] {
            let trace = step_response(&g, &p, start, target, p.ticks_per_step);
            let end = *trace.last().unwrap();
            assert!((end - target).abs() < 0.05, "{start} -> {target} ended at {end}");
        }
    }

    #[test]
    fn actuator_run_step_reaches_all_setpoints() {
        let mut act = Actuator::new(PidGains::default(), ActuatorParams::default(), [10.0, 0.0, 30.0]);
        let mut ticks = 0;
        let p = act.run_step(&[13.0, 2.0, 27.0], |_| ticks += 1);
        assert_eq!(ticks, 125);
        for (a, b) in p.iter().zip([13.0, 2.0, 27.0]) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn monotone_approach_without_derivative() {
        let p = ActuatorParams::default();
        for ki in [0.0, 0.002, 0.005] {
            let g = PidGains {
                kd: 0.0,
                ki,
                ..PidGains::default()
            };
            for (start, target) in [(0.0, 10.0), (30.0, 27.0), (5.0, 50.0)] {
                let trace = step_response(&g, &p, start, target, 250);
                // A saturated integral can hold the loop at most this far
                // past the setpoint.
                let band = ki * g.integral_clamp / g.kp + 1e-12;
                let errs: Vec<f64> = trace.iter().map(|x| (x - target).abs()).collect();
                let entered = errs.iter().position(|e| *e <= band).unwrap_or(errs.len());
                assert!(errs[..entered].windows(2).all(|w| w[1] <= w[0]), "ki {ki}, {start}->{target}");
                assert!(errs[entered..].iter().all(|e| *e <= band), "ki {ki}, {start}->{target}");
            }
        }
    }

    proptest! {
        #[test]
        fn integral_and_pressure_stay_bounded(
            setpoints in proptest::collection::vec(-20.0f64..80.0, 1..40),
            start in 0.0f64..60.0,
        ) {
            let g = PidGains::default();
            let p = ActuatorParams::default();
            let mut s = ChannelState::at(start);
            for sp in setpoints {
                for _ in 0..10 {
                    let (u, mut next) = pid_step(&g, &s, sp, p.dt);
                    prop_assert!(u.abs() <= g.output_clamp);
                    prop_assert!(next.integral.abs() <= g.integral_clamp);
                    next.pressure = actuator_step(&p, s.pressure, u, p.dt);
                    prop_assert!((p.min_pressure..=p.max_pressure).contains(&next.pressure));
                    s = next;
                }
            }
        }

        #[test]
        fn deterministic(target in 0.0f64..60.0, start in 0.0f64..60.0) {
            let (g, p) = (PidGains::default(), ActuatorParams::default());
            prop_assert_eq!(step_response(&g, &p, start, target, 100), step_response(&g, &p, start, target, 100));
        }
    }
}
