//! Scripted inputs of a run: reference path, base motion and external torque.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    fn axes(self) -> (Vector3<f64>, Vector3<f64>) {
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        match self {
            Plane::Xy => (x, y),
            Plane::Xz => (x, z),
            Plane::Yz => (y, z),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time: f64,
    pub position: [f64; 3],
    pub orientation: [f64; 3],
}

fn default_rate() -> f64 {
    2.0 * PI / 10.0
}

fn default_plane() -> Plane {
    Plane::Xy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Circle traversed from phase 0. Without an explicit center the circle
    /// starts at the initial end-effector position; without an orientation
    /// the initial end-effector orientation is held.
    Circle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<[f64; 3]>,
        radius: f64,
        #[serde(default = "default_rate")]
        angular_rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        orientation: Option<[f64; 3]>,
        #[serde(default = "default_plane")]
        plane: Plane,
    },
    /// Piecewise-linear interpolation, held after the last point.
    Waypoints { points: Vec<Waypoint> },
}

impl ReferenceConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        match self {
            ReferenceConfig::Circle {
                radius, angular_rate, ..
            } => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::config(format!("{path}.radius"), "radius must be non-negative"));
                }
                if !angular_rate.is_finite() {
                    return Err(Error::config(format!("{path}.angular_rate"), "must be finite"));
                }
            }
            ReferenceConfig::Waypoints { points } => {
                if points.is_empty() {
                    return Err(Error::config(format!("{path}.points"), "need at least one waypoint"));
                }
                for (i, w) in points.windows(2).enumerate() {
                    if !(w[1].time > w[0].time) {
                        return Err(Error::config(
                            format!("{path}.points[{}].time", i + 1),
                            "waypoint times must be strictly increasing",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves defaults against the initial end-effector pose.
    pub fn resolve(&self, initial: &Pose) -> Reference {
        match self {
            ReferenceConfig::Circle {
                center,
                radius,
                angular_rate,
                orientation,
                plane,
            } => {
                let (u, v) = plane.axes();
                let center = center
                    .map(Vector3::from)
                    .unwrap_or(initial.position - u * *radius);
                let orientation = orientation.map(Vector3::from).unwrap_or(initial.orientation);
                Reference::Circle {
                    center,
                    radius: *radius,
                    rate: *angular_rate,
                    orientation,
                    u,
                    v,
                }
            }
            ReferenceConfig::Waypoints { points } => Reference::Waypoints(points.clone()),
        }
    }
}

/// Reference with defaults resolved; evaluates the desired world pose.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    Circle {
        center: Vector3<f64>,
        radius: f64,
        rate: f64,
        orientation: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    },
    Waypoints(Vec<Waypoint>),
}

impl Reference {
    pub fn pose(&self, t: f64) -> Pose {
        match self {
            Reference::Circle {
                center,
                radius,
                rate,
                orientation,
                u,
                v,
            } => {
                let phase = rate * t;
                Pose::new(center + (u * phase.cos() + v * phase.sin()) * *radius, *orientation)
            }
            Reference::Waypoints(points) => {
                let first = &points[0];
                if t <= first.time {
                    return Pose::new(first.position.into(), first.orientation.into());
                }
                for w in points.windows(2) {
                    if t <= w[1].time {
                        let s = (t - w[0].time) / (w[1].time - w[0].time);
                        let p0 = Vector3::from(w[0].position);
                        let p1 = Vector3::from(w[1].position);
                        let o0 = Vector3::from(w[0].orientation);
                        let o1 = Vector3::from(w[1].orientation);
                        return Pose::new(p0 + (p1 - p0) * s, o0 + (o1 - o0) * s);
                    }
                }
                let last = points.last().unwrap();
                Pose::new(last.position.into(), last.orientation.into())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseAxis {
    X,
    Y,
    Z,
    Roll,
    Pitch,
    Yaw,
}

impl BaseAxis {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oscillation {
    pub axis: BaseAxis,
    /// Half the peak-to-peak excursion (m or rad).
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
}

impl Oscillation {
    /// Offset, rate and acceleration of `A (1 - cos(2 pi f t))`, which
    /// starts from rest so the arm is not asked for an instantaneous velocity.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let w = 2.0 * PI * self.frequency;
        let (s, c) = (w * t).sin_cos();
        let a = self.amplitude;
        (a * (1.0 - c), a * w * s, a * w * w * c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseMotion {
    #[default]
    Static,
    Sinusoid(Oscillation),
    /// Constant pitch of the base, optionally combined with a reciprocating
    /// motion (a tilted rail).
    Tilt {
        angle: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        oscillation: Option<Oscillation>,
    },
}

/// Base configuration and its first two time derivatives (6-vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl BaseMotion {
    pub fn validate(&self, path: &str) -> Result<()> {
        let check = |o: &Oscillation, p: String| {
            if !o.amplitude.is_finite() || !(o.frequency >= 0.0) || !o.frequency.is_finite() {
                return Err(Error::config(p, "amplitude must be finite and frequency non-negative"));
            }
            Ok(())
        };
        match self {
            BaseMotion::Static => Ok(()),
            BaseMotion::Sinusoid(o) => check(o, path.to_string()),
            BaseMotion::Tilt { angle, oscillation } => {
                if !(angle.abs() < PI / 2.0) {
                    return Err(Error::config(format!("{path}.angle"), "tilt must stay below pi/2"));
                }
                match oscillation {
                    Some(o) => check(o, format!("{path}.oscillation")),
                    None => Ok(()),
                }
            }
        }
    }

    pub fn state(&self, t: f64) -> BaseState {
        let mut s = BaseState {
            q: DVector::zeros(6),
            qd: DVector::zeros(6),
            qdd: DVector::zeros(6),
        };
        let mut add = |o: &Oscillation| {
            let (p, v, a) = o.eval(t);
            let i = o.axis.index();
            s.q[i] += p;
            s.qd[i] += v;
            s.qdd[i] += a;
        };
        match self {
            BaseMotion::Static => {}
            BaseMotion::Sinusoid(o) => add(o),
            BaseMotion::Tilt { angle, oscillation } => {
                if let Some(o) = oscillation {
                    add(o);
                }
                s.q[4] += angle;
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    #[default]
    None,
    /// `value` from `time` on.
    Step { time: f64, value: Vec<f64> },
    /// `amplitude sin(2 pi f t)` per joint.
    Sinusoid { amplitude: Vec<f64>, frequency: f64 },
    /// Zero-mean uniform noise in `[-amplitude, amplitude]`, redrawn every
    /// torque period from a seeded stream.
    Noise { amplitude: Vec<f64>, seed: u64 },
}

impl Disturbance {
    pub fn validate(&self, n: usize, path: &str) -> Result<()> {
        let len = match self {
            Disturbance::None => return Ok(()),
            Disturbance::Step { value, .. } => value.len(),
            Disturbance::Sinusoid { amplitude, .. } | Disturbance::Noise { amplitude, .. } => amplitude.len(),
        };
        if len != n {
            return Err(Error::config(
                path,
                format!("disturbance has {len} entries but the arm has {n} joints"),
            ));
        }
        Ok(())
    }

    pub fn source(&self, n: usize) -> DisturbanceSource {
        let rng = match self {
            Disturbance::Noise { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        DisturbanceSource {
            kind: self.clone(),
            n,
            rng,
        }
    }
}

/// Stateful sampler; noise draws advance a private stream, so the sequence
/// only depends on the seed and the number of samples taken.
pub struct DisturbanceSource {
    kind: Disturbance,
    n: usize,
    rng: Option<ChaCha8Rng>,
}

impl DisturbanceSource {
    pub fn sample(&mut self, t: f64) -> DVector<f64> {
        match &self.kind {
            Disturbance::None => DVector::zeros(self.n),
            Disturbance::Step { time, value } => {
                if t >= *time {
                    DVector::from_column_slice(value)
                } else {
                    DVector::zeros(self.n)
                }
            }
            Disturbance::Sinusoid { amplitude, frequency } => {
                let s = (2.0 * PI * frequency * t).sin();
                DVector::from_iterator(self.n, amplitude.iter().map(|a| a * s))
            }
            Disturbance::Noise { amplitude, .. } => {
                let rng = self.rng.as_mut().unwrap();
                DVector::from_iterator(self.n, amplitude.iter().map(|a| a * rng.gen_range(-1.0..=1.0)))
            }
        }
    }
}

fn default_duration() -> f64 {
    10.0
}

fn default_control_period() -> f64 {
    0.01
}

fn default_torque_period() -> f64 {
    0.001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default = "default_torque_period")]
    pub torque_period: f64,
    /// Initial arm joint angles (rad).
    pub initial_arm: Vec<f64>,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub base_motion: BaseMotion,
    #[serde(default)]
    pub disturbance: Disturbance,
}

impl ScenarioScript {
    /// Torque steps per control period; the periods must be commensurate.
    pub fn substeps(&self) -> usize {
        (self.control_period / self.torque_period).round() as usize
    }

    /// Number of torque periods in the run.
    pub fn torque_steps(&self) -> usize {
        (self.duration / self.torque_period).round() as usize
    }

    pub fn validate(&self, arm_joints: usize, path: &str) -> Result<()> {
        for (key, v) in [
            ("duration", self.duration),
            ("control_period", self.control_period),
            ("torque_period", self.torque_period),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{path}.{key}"), format!("must be positive, got {v}")));
            }
        }
        if self.torque_period > self.control_period {
            return Err(Error::config(
                format!("{path}.torque_period"),
                "must not exceed control_period",
            ));
        }
        let ratio = self.control_period / self.torque_period;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::config(
                format!("{path}.control_period"),
                "must be an integer multiple of torque_period",
            ));
        }
        let steps = self.duration / self.torque_period;
        if (steps - steps.round()).abs() > 1e-9 * steps {
            return Err(Error::config(
                format!("{path}.duration"),
                "must be an integer multiple of torque_period",
            ));
        }
        if self.initial_arm.len() != arm_joints {
            return Err(Error::config(
                format!("{path}.initial_arm"),
                format!("expected {arm_joints} joint angles, found {}", self.initial_arm.len()),
            ));
        }
        self.reference.validate(&format!("{path}.reference"))?;
        self.base_motion.validate(&format!("{path}.base_motion"))?;
        self.disturbance.validate(arm_joints, &format!("{path}.disturbance"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_starts_at_initial_pose() {
        let start = Pose::new(Vector3::new(0.4, 0.1, 0.5), Vector3::new(3.0, 0.1, -0.2));
        let circle = ReferenceConfig::Circle {
            center: None,
            radius: 0.1,
            angular_rate: default_rate(),
            orientation: None,
            plane: Plane::Xy,
        };
        let r = circle.resolve(&start);
        assert_relative_eq!(r.pose(0.0).position, start.position, epsilon = 1e-15);
        assert_eq!(r.pose(0.0).orientation, start.orientation);
        let quarter = r.pose(2.5);
        assert_relative_eq!(quarter.position, Vector3::new(0.3, 0.2, 0.5), epsilon = 1e-12);
        assert_relative_eq!(r.pose(10.0).position, start.position, epsilon = 1e-12);
    }

    #[test]
    fn waypoints_interpolate_and_hold() {
        let r = ReferenceConfig::Waypoints {
            points: vec![
                Waypoint {
                    time: 0.0,
                    position: [0.0, 0.0, 0.0],
                    orientation: [0.0; 3],
                },
                Waypoint {
                    time: 2.0,
                    position: [1.0, 2.0, 0.0],
                    orientation: [0.0, 0.0, 1.0],
                },
            ],
        }
        .resolve(&Pose::new(Vector3::zeros(), Vector3::zeros()));
        assert_relative_eq!(r.pose(1.0).position, Vector3::new(0.5, 1.0, 0.0));
        assert_relative_eq!(r.pose(1.0).orientation[2], 0.5);
        assert_relative_eq!(r.pose(5.0).position, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn sinusoid_derivatives_match_finite_differences() {
        let m = BaseMotion::Sinusoid(Oscillation {
            axis: BaseAxis::Y,
            amplitude: 0.05,
            frequency: 0.7,
        });
        let (t, h) = (0.37, 1e-5);
        let fd_v = (m.state(t + h).q - m.state(t - h).q) / (2.0 * h);
        let fd_a = (m.state(t + h).qd - m.state(t - h).qd) / (2.0 * h);
        assert_relative_eq!(fd_v, m.state(t).qd, epsilon = 1e-8);
        assert_relative_eq!(fd_a, m.state(t).qdd, epsilon = 1e-7);
        assert_eq!(m.state(t).q[0], 0.0);
        assert_eq!(m.state(0.0).qd, DVector::zeros(6));
    }

    #[test]
    fn tilt_sets_pitch() {
        let m = BaseMotion::Tilt {
            angle: 0.21,
            oscillation: None,
        };
        assert_eq!(m.state(3.0).q[4], 0.21);
        assert_eq!(m.state(3.0).qdd, DVector::zeros(6));
    }

    #[test]
    fn noise_is_reproducible() {
        let d = Disturbance::Noise {
            amplitude: vec![1.0, 2.0],
            seed: 7,
        };
        let (mut a, mut b) = (d.source(2), d.source(2));
        for i in 0..50 {
            let t = i as f64 * 1e-3;
            let x = a.sample(t);
            assert_eq!(x, b.sample(t));
            assert!(x[0].abs() <= 1.0 && x[1].abs() <= 2.0);
        }
    }

    #[test]
    fn periods_must_be_commensurate() {
        let mut s = ScenarioScript {
            duration: 1.0,
            control_period: 0.01,
            torque_period: 0.003,
            initial_arm: vec![0.0, 0.0],
            reference: ReferenceConfig::Circle {
                center: None,
                radius: 0.1,
                angular_rate: 1.0,
                orientation: None,
                plane: Plane::Xy,
            },
            base_motion: BaseMotion::Static,
            disturbance: Disturbance::None,
        };
        let err = s.validate(2, "scenario").unwrap_err().to_string();
        assert!(err.starts_with("scenario.control_period"), "{err}");
        s.torque_period = 0.001;
        s.validate(2, "scenario").unwrap();
        s.torque_period = 0.02;
        assert!(s.validate(2, "scenario").is_err());
    }
}
