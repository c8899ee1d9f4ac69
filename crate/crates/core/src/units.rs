//! Decimal size/rate units and exact rational arithmetic.
//!
//! All sizes use decimal prefixes: 1 MB = 10^6 bytes, 1 GB = 10^9 bytes.
//! Durations and rates are exact rationals so that timings such as
//! 2.7 GB / 4.5 MB/s come out as exactly 600 s.

use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serializer};

/// Exact rational number used for seconds, MB/s and ratios.
pub type Rational = Ratio<i128>;

pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;
pub const KIB: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal number {0:?}")]
pub struct DecimalParseError(pub String);

/// Parses a plain decimal literal (`"4.5"`, `"300"`, `"-0.25"`, `"1e3"`) into
/// an exact rational.
pub fn parse_decimal(text: &str) -> Result<Rational, DecimalParseError> {
    let err = || DecimalParseError(text.to_string());
    let s = text.trim();
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| err())?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    let all: String = format!("{int_part}{frac_part}");
    let numer: i128 = if all.is_empty() { 0 } else { all.parse().map_err(|_| err())? };
    let scale = exponent - frac_part.len() as i32;
    if scale.unsigned_abs() > 30 {
        return Err(err());
    }
    let pow = 10i128.pow(scale.unsigned_abs());
    let value = if scale >= 0 {
        Rational::from_integer(numer.checked_mul(pow).ok_or_else(err)?)
    } else {
        Rational::new(numer, pow)
    };
    Ok(if negative { -value } else { value })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid size {0:?} (expected a byte count or a number with B, KB, MB, GB or KiB)")]
pub struct SizeParseError(pub String);

/// Parses `"2.7GB"`, `"700 MB"`, `"512KiB"` or a bare byte count. Fractional
/// byte counts are rejected.
pub fn parse_size(text: &str) -> Result<u64, SizeParseError> {
    let err = || SizeParseError(text.to_string());
    let s = text.trim();
    let split = s.trim_end_matches(|c: char| c.is_ascii_alphabetic()).len();
    let (number, unit) = (s[..split].trim(), &s[split..]);
    let factor = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" => 1000,
        "mb" => MB,
        "gb" => GB,
        "kib" => KIB,
        _ => return Err(err()),
    };
    let value = parse_decimal(number).map_err(|_| err())? * Rational::from_integer(factor as i128);
    if !value.is_integer() || value < Rational::zero() {
        return Err(err());
    }
    value.to_integer().to_u64().ok_or_else(err)
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    // `{:e}` gives a correctly rounded mantissa; parsing it back is exact
    // enough for output purposes and avoids pow() drift.
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Formats a value with six significant digits, trailing zeros stripped
/// (the `%.6g` convention without exponent notation for ordinary ranges).
pub fn fmt_sig6(x: f64) -> String {
    let x = round_sig6(x);
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Display adapter printing a rational with six significant digits.
pub struct Sig6<'a>(pub &'a Rational);

impl fmt::Display for Sig6<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&fmt_sig6(to_f64(self.0)))
    }
}

/// Seconds needed to move `bytes` at `mb_per_s` (decimal megabytes).
pub fn transfer_seconds(bytes: u64, mb_per_s: &Rational) -> Rational {
    assert!(!mb_per_s.is_zero(), "bandwidth must be positive");
    Rational::from_integer(bytes as i128) / (mb_per_s * Rational::from_integer(MB as i128))
}

/// Serde adapter: rationals travel as JSON numbers rounded to six
/// significant digits, and are read back through their decimal form.
pub mod serde_rational {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(round_sig6(to_f64(r)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(i64),
            Float(f64),
            Text(String),
        }
        let text = match Repr::deserialize(d)? {
            Repr::Int(i) => return Ok(Rational::from_integer(i as i128)),
            Repr::Float(f) => format!("{f}"),
            Repr::Text(t) => t,
        };
        parse_decimal(&text).map_err(serde::de::Error::custom)
    }
}

pub mod serde_rational_opt {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => super::serde_rational::serialize(r, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::serde_rational")] Rational);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sizes() {
        assert_eq!(parse_size("2.7GB").unwrap(), 2_700_000_000);
        assert_eq!(parse_size("700 MB").unwrap(), 700_000_000);
        assert_eq!(parse_size("3.9e9").unwrap(), 3_900_000_000);
        assert_eq!(parse_size("4KiB").unwrap(), 4096);
        assert_eq!(parse_size("12b").unwrap(), 12);
        assert!(parse_size("1.5").is_err());
        assert!(parse_size("-1GB").is_err());
        assert!(parse_size("2TB").is_err());
        assert!(parse_size("GB").is_err());
    }

    #[test]
    fn parses_decimals_exactly() {
        assert_eq!(parse_decimal("4.5").unwrap(), Rational::new(9, 2));
        assert_eq!(parse_decimal("0.8").unwrap(), Rational::new(4, 5));
        assert_eq!(parse_decimal("300").unwrap(), Rational::from_integer(300));
        assert_eq!(parse_decimal("-.25").unwrap(), Rational::new(-1, 4));
        assert_eq!(parse_decimal("2.7e9").unwrap(), Rational::from_integer(2_700_000_000));
        assert!(parse_decimal("").is_err());
        assert!(parse_decimal("4,5").is_err());
        assert!(parse_decimal(".").is_err());
    }

    #[test]
    fn lecture_clone_timing_is_exact() {
        let secs = transfer_seconds(2_700_000_000, &Rational::new(9, 2));
        assert_eq!(secs, Rational::from_integer(600));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(29.5), "29.5");
        assert_eq!(fmt_sig6(5400.0), "5400");
        assert_eq!(fmt_sig6(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_sig6(711.111_111), "711.111");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(123_456_789.0), "123457000");
    }
}
