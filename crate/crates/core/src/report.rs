//! Number formatting shared by every table and JSON writer: six significant
//! digits, no trailing zeros.

use serde::Serializer;

pub fn format_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&exp) {
        let s = format!("{v:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        return format!("{mant}e{e}");
    }
    if exp > 5 {
        let f = 10f64.powi(exp - 5);
        return format!("{}", (v / f).round() * f);
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// `v` rounded to six significant digits (non-finite values pass through).
pub fn round_sig(v: f64) -> f64 {
    if v.is_finite() {
        format_sig(v).parse().unwrap_or(v)
    } else {
        v
    }
}

/// Serde helper: writes an `f64` rounded to six significant digits.
pub fn sig6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(*v))
}

/// Serde helper for optional values.
pub fn sig6_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_some(&round_sig(*x)),
        None => s.serialize_none(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.425812345), "0.425812");
        assert_eq!(format_sig(4.0), "4");
        assert_eq!(format_sig(0.64), "0.64");
        assert_eq!(format_sig(344.6049), "344.605");
        assert_eq!(format_sig(-1.5), "-1.5");
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(0.625), "0.625");
        assert_eq!(format_sig(1234567.0), "1234570");
        assert_eq!(format_sig(2.5e-9), "2.5e-9");
    }

    #[test]
    fn rounding_round_trips() {
        assert_eq!(round_sig(1.0 / 3.0), 0.333333);
        assert!(round_sig(f64::INFINITY).is_infinite());
    }
}
