//! Integer-microsecond durations.
//!
//! All ledger and trace arithmetic runs on whole microseconds so that budget
//! comparisons are exact. External formats carry fractional milliseconds.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A signed duration in whole microseconds.
///
/// Signed because ledger budgets legitimately go negative when a candidate
/// allocation overdraws a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Micros(pub i64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub const fn new(us: i64) -> Self {
        Micros(us)
    }

    pub const fn from_ms(ms: i64) -> Self {
        Micros(ms * 1000)
    }

    /// Rounds to the nearest microsecond.
    pub fn from_ms_f64(ms: f64) -> Self {
        Micros((ms * 1000.0).round() as i64)
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn as_us(self) -> i64 {
        self.0
    }

    pub fn from_duration(d: Duration) -> Self {
        Micros(d.as_micros().min(i64::MAX as u128) as i64)
    }

    /// Negative values clamp to zero.
    pub fn to_duration(self) -> Duration {
        Duration::from_micros(self.0.max(0) as u64)
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ms", self.as_ms_f64())
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Micros {
    fn sub_assign(&mut self, rhs: Micros) {
        self.0 -= rhs.0;
    }
}

impl Neg for Micros {
    type Output = Micros;
    fn neg(self) -> Micros {
        Micros(-self.0)
    }
}

impl Mul<i64> for Micros {
    type Output = Micros;
    fn mul(self, rhs: i64) -> Micros {
        Micros(self.0 * rhs)
    }
}

impl Sum for Micros {
    fn sum<I: Iterator<Item = Micros>>(iter: I) -> Micros {
        Micros(iter.map(|m| m.0).sum())
    }
}

impl<'a> Sum<&'a Micros> for Micros {
    fn sum<I: Iterator<Item = &'a Micros>>(iter: I) -> Micros {
        Micros(iter.map(|m| m.0).sum())
    }
}

impl Serialize for Micros {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_ms_f64())
    }
}

impl<'de> Deserialize<'de> for Micros {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ms = f64::deserialize(d)?;
        if !ms.is_finite() {
            return Err(serde::de::Error::custom("duration must be finite"));
        }
        Ok(Micros::from_ms_f64(ms))
    }
}

/// Serde adapter for fields that are stored as raw integer microseconds
/// (trace files) rather than fractional milliseconds.
pub mod as_micros {
    use super::Micros;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Micros, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(v.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Micros, D::Error> {
        i64::deserialize(d).map(Micros)
    }
}

/// Sleeps until `deadline`, finishing with a short spin for precision.
pub fn sleep_until(deadline: std::time::Instant) {
    const SPIN: std::time::Duration = std::time::Duration::from_micros(200);
    loop {
        let now = std::time::Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            // yield rather than spin so a peer thread on the same core can run
            std::thread::yield_now();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ms_round_trip_is_exact() {
        for us in [-100_000i64, -1, 0, 1, 999, 1_000, 123_456_789] {
            let m = Micros(us);
            assert_eq!(Micros::from_ms_f64(m.as_ms_f64()), m);
        }
    }

    #[test]
    fn json_uses_milliseconds() {
        let s = serde_json::to_string(&Micros(1_500)).unwrap();
        assert_eq!(s, "1.5");
        let back: Micros = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Micros(1_500));
    }
}
