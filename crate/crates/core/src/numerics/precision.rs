//! Logical precision tags and value-rounding emulation of IEEE binary formats.
//!
//! All values live in `f64`. A precision tag only decides how a value is
//! rounded when it is stored: round-to-nearest-even on the significand,
//! gradual underflow through the subnormal range, and overflow to a signed
//! infinity once the rounded magnitude exceeds the largest finite value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Floating-point format a value is logically stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
    F16,
    Bf16,
}

/// Bit layout of an emulated binary format.
#[derive(Debug, Clone, Copy)]
struct Format {
    /// Explicit significand bits (the hidden bit is not counted).
    mantissa_bits: i32,
    /// Smallest normal exponent.
    min_exp: i32,
    /// Largest normal exponent.
    max_exp: i32,
}

const F32_FORMAT: Format = Format { mantissa_bits: 23, min_exp: -126, max_exp: 127 };
const F16_FORMAT: Format = Format { mantissa_bits: 10, min_exp: -14, max_exp: 15 };
const BF16_FORMAT: Format = Format { mantissa_bits: 7, min_exp: -126, max_exp: 127 };

impl Format {
    fn max_finite(self) -> f64 {
        // (2 - 2^-m) * 2^emax
        (2.0 - pow2(-self.mantissa_bits)) * pow2(self.max_exp)
    }

    fn min_subnormal(self) -> f64 {
        pow2(self.min_exp - self.mantissa_bits)
    }

    fn round(self, x: f64) -> f64 {
        if x == 0.0 || !x.is_finite() {
            return x;
        }
        let exp = binary_exponent(x).max(self.min_exp);
        let quantum = pow2(exp - self.mantissa_bits);
        // Scaling by a power of two is exact, so the only rounding is here.
        let rounded = (x / quantum).round_ties_even() * quantum;
        if rounded == 0.0 {
            0.0f64.copysign(x)
        } else if rounded.abs() > self.max_finite() {
            f64::INFINITY.copysign(x)
        } else {
            rounded
        }
    }
}

/// `2^k` built directly from the exponent bits; `k` must be a normal f64 exponent.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(|x|))` for finite nonzero `x`.
fn binary_exponent(x: f64) -> i32 {
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal; far below every emulated format's range
        -1023
    } else {
        biased - 1023
    }
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::F64, Precision::F32, Precision::F16, Precision::Bf16];

    fn format(self) -> Option<Format> {
        match self {
            Precision::F64 => None,
            Precision::F32 => Some(F32_FORMAT),
            Precision::F16 => Some(F16_FORMAT),
            Precision::Bf16 => Some(BF16_FORMAT),
        }
    }

    /// Round `x` to the nearest value representable in this format.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self.format() {
            None => x,
            Some(f) => f.round(x),
        }
    }

    /// Round every element in place.
    pub fn round_slice(self, xs: &mut [f64]) {
        if let Some(f) = self.format() {
            for x in xs {
                *x = f.round(*x);
            }
        }
    }

    pub fn max_finite(self) -> f64 {
        match self.format() {
            None => f64::MAX,
            Some(f) => f.max_finite(),
        }
    }

    /// Smallest positive subnormal value.
    pub fn min_positive_subnormal(self) -> f64 {
        match self.format() {
            None => f64::from_bits(1),
            Some(f) => f.min_subnormal(),
        }
    }

    /// Storage width in bytes.
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
            Precision::F16 | Precision::Bf16 => 2,
        }
    }

    pub fn is_half(self) -> bool {
        matches!(self, Precision::F16 | Precision::Bf16)
    }

    /// Precision used to accumulate dot products whose operands are in `self`.
    ///
    /// Half-precision operands accumulate in F32; wider formats accumulate in
    /// themselves.
    pub fn default_accumulate(self) -> Precision {
        if self.is_half() {
            Precision::F32
        } else {
            self
        }
    }

    /// Precision of optimizer master copies when training in `self`.
    pub fn master(self) -> Precision {
        match self {
            Precision::F64 => Precision::F64,
            _ => Precision::F32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::Bf16 => "bf16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f64" | "fp64" => Ok(Precision::F64),
            "f32" | "fp32" => Ok(Precision::F32),
            "f16" | "fp16" => Ok(Precision::F16),
            "bf16" => Ok(Precision::Bf16),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}
