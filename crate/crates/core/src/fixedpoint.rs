//! Signed two's-complement fixed-point emulation.
//!
//! A [`FixedFormat`] of `T.F` holds `T` total bits, one of them the sign and
//! `F` of them fraction. Codes are carried in `i64`; products and dot-product
//! accumulators are carried in `i128` so that every intermediate is exact and
//! only one rounding happens per result.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FixedFormat {
    total_bits: u8,
    fraction_bits: u8,
}

/// How a value with surplus fraction bits is brought back to the format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    /// Round to nearest, ties to the even code.
    #[default]
    NearestEven,
    /// Drop the surplus bits (round toward negative infinity).
    Truncate,
}

impl FixedFormat {
    pub const Q16_8: FixedFormat = FixedFormat {
        total_bits: 16,
        fraction_bits: 8,
    };

    pub fn new(total_bits: u8, fraction_bits: u8) -> Result<Self> {
        if !(1 <= fraction_bits && fraction_bits < total_bits && total_bits <= 64) {
            return Err(Error::Config(format!(
                "fixed format {total_bits}.{fraction_bits} needs 1 <= fraction < total <= 64"
            )));
        }
        Ok(FixedFormat {
            total_bits,
            fraction_bits,
        })
    }

    pub fn total_bits(self) -> u8 {
        self.total_bits
    }

    pub fn fraction_bits(self) -> u8 {
        self.fraction_bits
    }

    pub fn max_code(self) -> i64 {
        ((1i128 << (self.total_bits - 1)) - 1) as i64
    }

    pub fn min_code(self) -> i64 {
        (-(1i128 << (self.total_bits - 1))) as i64
    }

    /// Weight of one code step.
    pub fn ulp(self) -> f64 {
        (-(self.fraction_bits as f64)).exp2()
    }

    pub fn saturate(self, wide: i128) -> i64 {
        wide.clamp(self.min_code() as i128, self.max_code() as i128) as i64
    }

    /// Code nearest to `x` under `rounding`, saturated. NaN is rejected.
    pub fn quantize_code(self, x: f64, rounding: Rounding) -> Result<i64> {
        if x.is_nan() {
            return Err(Error::Domain("cannot quantize NaN".into()));
        }
        let scaled = x * (self.fraction_bits as f64).exp2();
        let rounded = match rounding {
            Rounding::NearestEven => scaled.round_ties_even(),
            Rounding::Truncate => scaled.floor(),
        };
        // Clamp in the float domain first: casts of huge values saturate at
        // i128 bounds, which is still outside every format.
        Ok(self.saturate(rounded as i128))
    }

    pub fn to_real(self, code: i64) -> f64 {
        code as f64 * self.ulp()
    }
}

impl Default for FixedFormat {
    fn default() -> Self {
        FixedFormat::Q16_8
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.total_bits, self.fraction_bits)
    }
}

impl FromStr for FixedFormat {
    type Err = Error;

    /// Parses the `T.F` descriptor, e.g. `16.8`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("fixed format descriptor {s:?} is not of the form T.F"));
        let (t, f) = s.trim().split_once('.').ok_or_else(bad)?;
        let digits = |p: &str| !p.is_empty() && p.len() <= 3 && p.bytes().all(|b| b.is_ascii_digit());
        if !digits(t) || !digits(f) {
            return Err(bad());
        }
        let total: u16 = t.parse().map_err(|_| bad())?;
        let frac: u16 = f.parse().map_err(|_| bad())?;
        if total > 64 || frac > 64 {
            return Err(bad());
        }
        FixedFormat::new(total as u8, frac as u8)
    }
}

impl TryFrom<String> for FixedFormat {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FixedFormat> for String {
    fn from(f: FixedFormat) -> String {
        f.to_string()
    }
}

/// Shifts `value` right by `shift` bits with the given rounding.
pub fn round_shift(value: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift == 0 {
        return value;
    }
    let floor = value >> shift;
    match rounding {
        Rounding::Truncate => floor,
        Rounding::NearestEven => {
            let rem = value - (floor << shift);
            let half = 1i128 << (shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedValue {
    code: i64,
    format: FixedFormat,
}

impl FixedValue {
    /// Wraps a raw code, saturating it into the format's range.
    pub fn from_code(code: i64, format: FixedFormat) -> Self {
        FixedValue {
            code: format.saturate(code as i128),
            format,
        }
    }

    pub fn code(self) -> i64 {
        self.code
    }

    pub fn format(self) -> FixedFormat {
        self.format
    }

    pub fn to_real(self) -> f64 {
        self.format.to_real(self.code)
    }

    pub fn max(format: FixedFormat) -> Self {
        FixedValue {
            code: format.max_code(),
            format,
        }
    }

    pub fn min(format: FixedFormat) -> Self {
        FixedValue {
            code: format.min_code(),
            format,
        }
    }
}

impl PartialOrd for FixedValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        (self.format == other.format).then(|| self.code.cmp(&other.code))
    }
}

pub fn quantize(x: f64, format: FixedFormat) -> Result<FixedValue> {
    quantize_with(x, format, Rounding::NearestEven)
}

pub fn quantize_with(x: f64, format: FixedFormat, rounding: Rounding) -> Result<FixedValue> {
    Ok(FixedValue {
        code: format.quantize_code(x, rounding)?,
        format,
    })
}

fn same_format(a: FixedValue, b: FixedValue) -> Result<FixedFormat> {
    if a.format != b.format {
        return Err(Error::Usage(format!(
            "fixed-point format mismatch: {} vs {}",
            a.format, b.format
        )));
    }
    Ok(a.format)
}

/// Saturating addition.
pub fn add(a: FixedValue, b: FixedValue) -> Result<FixedValue> {
    let format = same_format(a, b)?;
    Ok(FixedValue {
        code: format.saturate(a.code as i128 + b.code as i128),
        format,
    })
}

pub fn mul(a: FixedValue, b: FixedValue) -> Result<FixedValue> {
    mul_with(a, b, Rounding::NearestEven)
}

/// Double-width product, rounded once and saturated.
pub fn mul_with(a: FixedValue, b: FixedValue, rounding: Rounding) -> Result<FixedValue> {
    let format = same_format(a, b)?;
    let wide = a.code as i128 * b.code as i128;
    let code = round_shift(wide, format.fraction_bits as u32, rounding);
    Ok(FixedValue {
        code: format.saturate(code),
        format,
    })
}

pub fn mac_accumulate<I>(pairs: I) -> Result<FixedValue>
where
    I: IntoIterator<Item = (FixedValue, FixedValue)>,
{
    mac_accumulate_with(pairs, Rounding::NearestEven)
}

/// Sum of products accumulated exactly at double width; a single terminal
/// round-and-saturate. An empty sequence has no format and is rejected.
pub fn mac_accumulate_with<I>(pairs: I, rounding: Rounding) -> Result<FixedValue>
where
    I: IntoIterator<Item = (FixedValue, FixedValue)>,
{
    let mut format = None;
    let mut acc: i128 = 0;
    for (a, b) in pairs {
        let f = same_format(a, b)?;
        if *format.get_or_insert(f) != f {
            return Err(Error::Usage("mixed formats inside one accumulation".into()));
        }
        acc += a.code as i128 * b.code as i128;
    }
    let format = format.ok_or_else(|| Error::Usage("empty accumulation".into()))?;
    let code = round_shift(acc, format.fraction_bits as u32, rounding);
    Ok(FixedValue {
        code: format.saturate(code),
        format,
    })
}
