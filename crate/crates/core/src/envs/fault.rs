//! Fault injectors applied at the environment boundary.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Nominal joint1 range in radians.
pub const NOMINAL_JOINT1_LIMITS: (f64, f64) = (-3.0, 3.0);
/// Torque multiplier under actuator damage.
pub const ACTUATOR_DAMAGE_SCALE: f64 = 0.25;
/// Joint1 range under reduced range of motion.
pub const REDUCED_ROM_LIMITS: (f64, f64) = (-1.5, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    None,
    ActuatorDamage,
    ReducedRom,
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::None => "none",
            FaultKind::ActuatorDamage => "ad",
            FaultKind::ReducedRom => "rom",
        }
    }
}

impl std::str::FromStr for FaultKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FaultKind::None),
            "ad" | "actuator_damage" => Ok(FaultKind::ActuatorDamage),
            "rom" | "reduced_rom" => Ok(FaultKind::ReducedRom),
            other => Err(crate::error::Error::Config(format!(
                "unknown fault '{other}' (expected none, ad, rom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSpec<T> {
    pub kind: FaultKind,
    pub torque_scale: T,
    pub joint1_limits: (T, T),
}

impl<T: Scalar> FaultSpec<T> {
    pub fn none() -> Self {
        Self {
            kind: FaultKind::None,
            torque_scale: T::one(),
            joint1_limits: (T::of(NOMINAL_JOINT1_LIMITS.0), T::of(NOMINAL_JOINT1_LIMITS.1)),
        }
    }

    pub fn actuator_damage() -> Self {
        Self {
            kind: FaultKind::ActuatorDamage,
            torque_scale: T::of(ACTUATOR_DAMAGE_SCALE),
            ..Self::none()
        }
    }

    pub fn reduced_rom() -> Self {
        Self {
            kind: FaultKind::ReducedRom,
            joint1_limits: (T::of(REDUCED_ROM_LIMITS.0), T::of(REDUCED_ROM_LIMITS.1)),
            ..Self::none()
        }
    }

    pub fn from_kind(kind: FaultKind) -> Self {
        match kind {
            FaultKind::None => Self::none(),
            FaultKind::ActuatorDamage => Self::actuator_damage(),
            FaultKind::ReducedRom => Self::reduced_rom(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.torque_scale > T::zero() && self.torque_scale <= T::one()) {
            return Err(invalid!("torque_scale must lie in (0, 1], got {}", self.torque_scale));
        }
        if !(self.joint1_limits.0 < self.joint1_limits.1) {
            return Err(invalid!("joint1 limits must satisfy low < high"));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for FaultSpec<T> {
    fn default() -> Self {
        Self::none()
    }
}
