//! Byte units.
//!
//! Decimal (`KB`, `MB`, `GB`) and binary (`KiB`, `MiB`, `GiB`) multiples are
//! kept apart everywhere: reports print both, and the config parser refuses
//! quantities without an explicit unit.

use std::fmt;

use thiserror::Error;

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;
pub const TB: u64 = 1_000_000_000_000;
pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

pub fn to_mb(bytes: u64) -> f64 {
    bytes as f64 / MB as f64
}

pub fn to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB as f64
}

pub fn to_gb(bytes: u64) -> f64 {
    bytes as f64 / GB as f64
}

pub fn to_gib(bytes: u64) -> f64 {
    bytes as f64 / GIB as f64
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UnitError {
    #[error("byte quantity `{0}` has no unit suffix (expected one of bytes, kb, mb, gb, tb, kib, mib, gib)")]
    MissingUnit(String),
    #[error("unknown byte unit `{unit}` in `{input}`")]
    UnknownUnit { input: String, unit: String },
    #[error("invalid number in byte quantity `{0}`")]
    BadNumber(String),
    #[error("byte quantity `{0}` is negative, fractional below one byte, or too large")]
    OutOfRange(String),
}

/// Parse a quantity such as `"24 gb"`, `"0.6gb"`, `"55 MiB"` or `"1024 bytes"`.
///
/// Units are case-insensitive; a bare number is rejected. Fractional results
/// are rounded to the nearest byte.
pub fn parse_bytes(input: &str) -> Result<u64, UnitError> {
    let s = input.trim();
    let split = s
        .find(|c: char| c.is_ascii_alphabetic())
        .ok_or_else(|| UnitError::MissingUnit(input.to_string()))?;
    let (num, unit) = s.split_at(split);
    let num = num.trim();
    let unit = unit.trim().to_ascii_lowercase();
    let scale = match unit.as_str() {
        "b" | "byte" | "bytes" => 1,
        "kb" => KB,
        "mb" => MB,
        "gb" => GB,
        "tb" => TB,
        "kib" => KIB,
        "mib" => MIB,
        "gib" => GIB,
        _ => {
            return Err(UnitError::UnknownUnit {
                input: input.to_string(),
                unit,
            })
        }
    };
    if num.is_empty() {
        return Err(UnitError::BadNumber(input.to_string()));
    }
    if let Ok(n) = num.parse::<u64>() {
        return n
            .checked_mul(scale)
            .ok_or_else(|| UnitError::OutOfRange(input.to_string()));
    }
    let x: f64 = num
        .parse()
        .map_err(|_| UnitError::BadNumber(input.to_string()))?;
    let bytes = (x * scale as f64).round();
    if !bytes.is_finite() || bytes < 0.0 || bytes > u64::MAX as f64 {
        return Err(UnitError::OutOfRange(input.to_string()));
    }
    Ok(bytes as u64)
}

/// Display wrapper printing a byte count with both decimal and binary units.
#[derive(Clone, Copy, Debug)]
pub struct HumanBytes(pub u64);

impl fmt::Display for HumanBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        if b >= GB {
            write!(f, "{:.2} GB ({:.2} GiB)", to_gb(b), to_gib(b))
        } else if b >= MB {
            write!(f, "{:.2} MB ({:.2} MiB)", to_mb(b), to_mib(b))
        } else {
            write!(f, "{b} B")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimal_and_binary_units() {
        assert_eq!(parse_bytes("24 gb").unwrap(), 24 * GB);
        assert_eq!(parse_bytes("0.6GB").unwrap(), 600_000_000);
        assert_eq!(parse_bytes("55 MiB").unwrap(), 55 * MIB);
        assert_eq!(parse_bytes("1024 bytes").unwrap(), 1024);
        assert_eq!(parse_bytes(" 2 kib ").unwrap(), 2048);
    }

    #[test]
    fn rejects_unitless_and_unknown() {
        assert!(matches!(parse_bytes("24"), Err(UnitError::MissingUnit(_))));
        assert!(matches!(parse_bytes("24 gbit"), Err(UnitError::UnknownUnit { .. })));
        assert!(matches!(parse_bytes("gb"), Err(UnitError::BadNumber(_))));
        assert!(matches!(parse_bytes("-1 gb"), Err(UnitError::OutOfRange(_))));
    }

    #[test]
    fn human_bytes_prints_both_unit_systems() {
        let s = HumanBytes(57_856_000).to_string();
        assert_eq!(s, "57.86 MB (55.18 MiB)");
    }
}
