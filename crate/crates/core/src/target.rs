//! Target trajectories with analytic derivatives.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::TargetKinematics;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajKind {
    Sinusoid,
    Fixed,
    Ramp,
}

impl std::fmt::Display for TrajKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrajKind::Sinusoid => "sinusoid",
            TrajKind::Fixed => "fixed",
            TrajKind::Ramp => "ramp",
        })
    }
}

impl std::str::FromStr for TrajKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(TrajKind::Sinusoid),
            "fixed" => Ok(TrajKind::Fixed),
            "ramp" => Ok(TrajKind::Ramp),
            other => Err(Error::Config(format!("unknown trajectory kind `{other}`"))),
        }
    }
}

/// Closed interval `[lo, hi]` for uniform draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what}: invalid range [{}, {}]",
                self.lo, self.hi
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Per-axis ranges for trajectory randomization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajRanges {
    /// m
    pub amplitude: Interval,
    /// Hz
    pub frequency: Interval,
    /// rad
    pub phase: Interval,
    /// Per-axis ramp speed magnitude, m/s. The sign is drawn separately.
    pub ramp_speed: Interval,
}

/// Amplitudes of 1 to 30 cm. With metre amplitudes most draws start the
/// target faster than the tracker can react and the baseline errors grow to
/// metres; centimetres give errors on the scale of a few centimetres.
impl Default for TrajRanges {
    fn default() -> Self {
        Self {
            amplitude: Interval::new(0.01, 0.30),
            ..Self::metre_amplitudes()
        }
    }
}

impl TrajRanges {
    /// The same ranges read with amplitudes of 1 to 30 m.
    pub fn metre_amplitudes() -> Self {
        Self {
            amplitude: Interval::new(1.0, 30.0),
            frequency: Interval::new(0.002, 0.2),
            phase: Interval::new(0.0, TAU),
            ramp_speed: Interval::new(0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.amplitude.validate("amplitude")?;
        self.frequency.validate("frequency")?;
        self.phase.validate("phase")?;
        self.ramp_speed.validate("ramp_speed")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajParams {
    pub kind: TrajKind,
    /// Target position at t = 0, m.
    pub origin: [f64; 3],
    pub amplitude: [f64; 3],
    pub frequency: [f64; 3],
    pub phase: [f64; 3],
    pub ramp_velocity: [f64; 3],
}

impl TrajParams {
    pub fn fixed(origin: Vector3<f64>) -> Self {
        Self {
            kind: TrajKind::Fixed,
            origin: origin.into(),
            amplitude: [0.0; 3],
            frequency: [0.0; 3],
            phase: [0.0; 3],
            ramp_velocity: [0.0; 3],
        }
    }

    pub fn with_origin(mut self, origin: Vector3<f64>) -> Self {
        self.origin = origin.into();
        self
    }

    /// Position, velocity and acceleration at time `t` (s).
    pub fn eval(&self, t: f64) -> TargetKinematics {
        let p0 = Vector3::from(self.origin);
        match self.kind {
            TrajKind::Fixed => TargetKinematics {
                position: p0,
                velocity: Vector3::zeros(),
                acceleration: Vector3::zeros(),
            },
            TrajKind::Ramp => {
                let v = Vector3::from(self.ramp_velocity);
                TargetKinematics {
                    position: p0 + v * t,
                    velocity: v,
                    acceleration: Vector3::zeros(),
                }
            }
            TrajKind::Sinusoid => {
                let mut pos = p0;
                let mut vel = Vector3::zeros();
                let mut acc = Vector3::zeros();
                for i in 0..3 {
                    let a = self.amplitude[i];
                    let w = 2.0 * PI * self.frequency[i];
                    let arg = w * t + self.phase[i];
                    let (s, c) = arg.sin_cos();
                    pos[i] += a * s - a * self.phase[i].sin();
                    vel[i] = a * w * c;
                    acc[i] = -a * w * w * s;
                }
                TargetKinematics {
                    position: pos,
                    velocity: vel,
                    acceleration: acc,
                }
            }
        }
    }
}

/// Draws a trajectory of the given kind; `origin` is left at zero for the
/// spawn rule to fill in.
pub fn sample_params<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &TrajRanges,
    kind: TrajKind,
) -> Result<TrajParams> {
    ranges.validate()?;
    let mut tp = TrajParams::fixed(Vector3::zeros());
    tp.kind = kind;
    match kind {
        TrajKind::Fixed => {}
        TrajKind::Sinusoid => {
            for i in 0..3 {
                tp.amplitude[i] = ranges.amplitude.sample(rng);
                tp.frequency[i] = ranges.frequency.sample(rng);
                tp.phase[i] = ranges.phase.sample(rng);
            }
        }
        TrajKind::Ramp => {
            for i in 0..3 {
                let speed = ranges.ramp_speed.sample(rng);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                tp.ramp_velocity[i] = sign * speed;
            }
        }
    }
    Ok(tp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_range_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranges = TrajRanges {
            amplitude: Interval::new(2.5, 2.5),
            frequency: Interval::new(0.1, 0.1),
            phase: Interval::new(0.0, 0.0),
            ..Default::default()
        };
        for _ in 0..50 {
            let tp = sample_params(&mut rng, &ranges, TrajKind::Sinusoid).unwrap();
            assert_eq!(tp.amplitude, [2.5; 3]);
            assert_eq!(tp.frequency, [0.1; 3]);
            assert_eq!(tp.phase, [0.0; 3]);
        }
    }

    #[test]
    fn inverted_range_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranges = TrajRanges {
            amplitude: Interval::new(5.0, 1.0),
            ..Default::default()
        };
        assert!(matches!(
            sample_params(&mut rng, &ranges, TrajKind::Sinusoid),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn amplitude_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ranges = TrajRanges::metre_amplitudes();
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_params(&mut rng, &ranges, TrajKind::Sinusoid).unwrap().amplitude[0])
            .collect();
        let min = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 1.0 && max <= 30.0);
        let mean = draws.iter().sum::<f64>() / n as f64;
        // U(1, 30): sd = 29 / sqrt(12); standard error of the mean = sd / sqrt(n)
        let se = 29.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 15.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn default_amplitudes_are_centimetres() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let tp = sample_params(&mut rng, &TrajRanges::default(), TrajKind::Sinusoid).unwrap();
            assert!(tp.amplitude.iter().all(|a| (0.01..=0.30).contains(a)));
        }
    }

    #[test]
    fn same_seed_same_params() {
        let ranges = TrajRanges::default();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..5).map(|_| sample_params(&mut rng, &ranges, TrajKind::Sinusoid).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..5).map(|_| sample_params(&mut rng, &ranges, TrajKind::Sinusoid).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sinusoid_starts_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let tp = sample_params(&mut rng, &TrajRanges::default(), TrajKind::Sinusoid)
                .unwrap()
                .with_origin(Vector3::new(0.75, -0.1, 0.2));
            assert_eq!(tp.eval(0.0).position, Vector3::new(0.75, -0.1, 0.2));
        }
    }

    #[test]
    fn worked_sinusoid_point() {
        let mut tp = TrajParams::fixed(Vector3::new(1.0, 0.0, 0.0));
        tp.kind = TrajKind::Sinusoid;
        tp.amplitude = [2.0, 0.0, 0.0];
        tp.frequency = [0.1, 0.1, 0.1];
        let k = tp.eval(2.5);
        assert!((k.position.x - 3.0).abs() < 1e-15);
        assert!(k.velocity.x.abs() < 1e-15);
    }

    #[test]
    fn fixed_and_ramp() {
        let p0 = Vector3::new(1.0, 2.0, 3.0);
        let tp = TrajParams::fixed(p0);
        for t in [0.0, 1.0, 37.5] {
            let k = tp.eval(t);
            assert_eq!(k.position, p0);
            assert_eq!(k.velocity, Vector3::zeros());
            assert_eq!(k.acceleration, Vector3::zeros());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ramp = sample_params(&mut rng, &TrajRanges::default(), TrajKind::Ramp)
            .unwrap()
            .with_origin(p0);
        for v in ramp.ramp_velocity {
            assert!((0.1..=2.0).contains(&v.abs()));
        }
        let k = ramp.eval(2.0);
        assert!((k.position - (p0 + Vector3::from(ramp.ramp_velocity) * 2.0)).norm() < 1e-14);
    }
}
