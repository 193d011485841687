//! Exact decimal arithmetic for cost accounting and the ROI model.
//!
//! Amounts are carried as rationals while they are being combined and only
//! rounded (half-to-even) when they are stored as fixed-point values or
//! reported.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Exact rational used for all intermediate arithmetic.
pub type Exact = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalParseError(pub String);

fn pow10(scale: u32) -> i128 {
    10i128.pow(scale)
}

/// Parses a plain decimal literal (`12`, `-0.027`, `1.5e-3` is not accepted).
pub fn parse_decimal(text: &str) -> Result<Exact, DecimalParseError> {
    let err = || DecimalParseError(text.to_string());
    let trimmed = text.trim().replace(['_', ','], "");
    let (neg, body) = match trimmed.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, trimmed.trim_start_matches('+')),
    };
    if body.is_empty() {
        return Err(err());
    }
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(err());
    }
    if frac_part.len() > 30 || int_part.len() > 30 {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
    let value = Exact::new(numer, pow10(frac_part.len() as u32));
    Ok(if neg { -value } else { value })
}

/// Parses either a decimal literal or a quotient `a/b` of two decimal literals.
pub fn parse_quotient(text: &str) -> Result<Exact, DecimalParseError> {
    match text.split_once('/') {
        Some((num, den)) => {
            let num = parse_decimal(num)?;
            let den = parse_decimal(den)?;
            if den == Exact::from_integer(0) {
                return Err(DecimalParseError(text.to_string()));
            }
            Ok(num / den)
        }
        None => parse_decimal(text),
    }
}

/// Rounds `value` to `scale` fractional digits, half-to-even, returning the
/// scaled integer.
pub fn round_half_even(value: &Exact, scale: u32) -> i128 {
    let scaled = value * Exact::from_integer(pow10(scale));
    let floor = scaled.floor();
    let frac = scaled - floor;
    let half = Exact::new(1, 2);
    let base = *floor.numer();
    if frac > half || (frac == half && base.rem_euclid(2) == 1) {
        base + 1
    } else {
        base
    }
}

/// Formats a scaled integer as a decimal string with exactly `scale` digits.
pub fn format_scaled(units: i128, scale: u32) -> String {
    if scale == 0 {
        return units.to_string();
    }
    let p = pow10(scale);
    let sign = if units < 0 { "-" } else { "" };
    let abs = units.abs();
    format!("{sign}{}.{:0width$}", abs / p, abs % p, width = scale as usize)
}

/// A currency amount in integer millionths (6 fractional digits).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Micros(pub i64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub fn from_exact(value: &Exact) -> Self {
        Micros(round_half_even(value, 6) as i64)
    }

    /// Exact value in currency units.
    pub fn to_exact(self) -> Exact {
        Exact::new(self.0 as i128, 1_000_000)
    }

    /// Rounds half-to-even to `digits` fractional digits for reporting.
    pub fn report(self, digits: u32) -> String {
        format_scaled(round_half_even(&self.to_exact(), digits), digits)
    }

    pub fn checked_add(self, other: Micros) -> Option<Micros> {
        self.0.checked_add(other.0).map(Micros)
    }
}

impl std::ops::Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Micros {
    fn sum<I: Iterator<Item = Micros>>(iter: I) -> Micros {
        iter.fold(Micros::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0 as i128, 6))
    }
}

impl Serialize for Micros {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Micros {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = exact_from_any(d)?;
        Ok(Micros(round_half_even(&value, 6) as i64))
    }
}

/// A non-negative price per unit (token or call), kept exact so that rates
/// such as `0.027/5500` reproduce their totals without drift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rate(Exact);

impl Rate {
    pub fn new(per_unit: Exact) -> Self {
        Rate(per_unit)
    }

    pub fn zero() -> Self {
        Rate(Exact::from_integer(0))
    }

    pub fn per_unit(&self) -> &Exact {
        &self.0
    }

    pub fn is_negative(&self) -> bool {
        self.0 < Exact::from_integer(0)
    }

    /// Exact cost of `units` at this rate.
    pub fn cost(&self, units: u64) -> Exact {
        self.0 * Exact::from_integer(units as i128)
    }
}

impl FromStr for Rate {
    type Err = DecimalParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_quotient(s).map(Rate)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let numer = *self.0.numer();
        let denom = *self.0.denom();
        if denom == 1 {
            write!(f, "{numer}")
        } else {
            write!(f, "{numer}/{denom}")
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        exact_from_any(d).map(Rate)
    }
}

/// A fixed-point decimal with an explicit number of fractional digits, used
/// for reported ROI values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fixed {
    pub units: i128,
    pub scale: u32,
}

impl Fixed {
    pub fn from_exact(value: &Exact, scale: u32) -> Self {
        Fixed { units: round_half_even(value, scale), scale }
    }

    pub fn to_exact(self) -> Exact {
        Exact::new(self.units, pow10(self.scale))
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.units, self.scale))
    }
}

impl Serialize for Fixed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Exact decimal input that may be written as a string (`"0.027/5500"`), an
/// integer, or a float literal in configuration files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecimalInput(pub Exact);

impl<'de> Deserialize<'de> for DecimalInput {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        exact_from_any(d).map(DecimalInput)
    }
}

impl Serialize for DecimalInput {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&Rate(self.0).to_string())
    }
}

fn exact_from_any<'de, D: Deserializer<'de>>(d: D) -> Result<Exact, D::Error> {
    struct V;
    impl de::Visitor<'_> for V {
        type Value = Exact;
        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a decimal number or a string such as \"0.027/5500\"")
        }
        fn visit_str<E: de::Error>(self, v: &str) -> Result<Exact, E> {
            parse_quotient(v).map_err(E::custom)
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Exact, E> {
            Ok(Exact::from_integer(v as i128))
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Exact, E> {
            Ok(Exact::from_integer(v as i128))
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Exact, E> {
            if !v.is_finite() {
                return Err(E::custom("non-finite number"));
            }
            // Shortest round-trip representation, so 0.1 stays 1/10.
            parse_decimal(&format!("{v}")).map_err(E::custom)
        }
    }
    d.deserialize_any(V)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimals_and_quotients() {
        assert_eq!(parse_decimal("0.027").unwrap(), Exact::new(27, 1000));
        assert_eq!(parse_decimal("-12").unwrap(), Exact::from_integer(-12));
        assert_eq!(parse_decimal("6,000").unwrap(), Exact::from_integer(6000));
        assert_eq!(parse_quotient("0.027/5500").unwrap(), Exact::new(27, 5_500_000));
        assert!(parse_decimal("abc").is_err());
        assert!(parse_decimal("").is_err());
        assert!(parse_quotient("1/0").is_err());
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(&Exact::new(5, 2), 0), 2);
        assert_eq!(round_half_even(&Exact::new(7, 2), 0), 4);
        assert_eq!(round_half_even(&Exact::new(-5, 2), 0), -2);
        assert_eq!(round_half_even(&Exact::new(1251, 100_000), 3), 13);
        assert_eq!(round_half_even(&Exact::new(125, 10_000), 3), 12);
        assert_eq!(round_half_even(&Exact::new(135, 10_000), 3), 14);
    }

    #[test]
    fn micros_reporting() {
        assert_eq!(Micros(46_000).report(3), "0.046");
        assert_eq!(Micros(45_500).report(3), "0.046");
        assert_eq!(Micros(46_500).report(3), "0.046");
        assert_eq!(Micros(0).report(3), "0.000");
        assert_eq!(Micros(1_234_567).to_string(), "1.234567");
    }

    #[test]
    fn rate_round_trips_through_display() {
        let rate: Rate = "0.018/1200".parse().unwrap();
        let again: Rate = rate.to_string().parse().unwrap();
        assert_eq!(rate, again);
        assert_eq!(Micros::from_exact(&rate.cost(1200)), Micros(18_000));
    }

    #[test]
    fn float_inputs_are_read_via_shortest_repr() {
        let v: DecimalInput = serde_json::from_str("0.1").unwrap();
        assert_eq!(v.0, Exact::new(1, 10));
    }
}
