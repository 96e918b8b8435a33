//! Hexadecimal floating-point literals (`-0x1.8p+1`), the exact text
//! encoding used by checkpoints and round-trip dumps.

use crate::error::{Error, Result};

const MANT_BITS: u32 = 52;

pub fn format_hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp = ((bits >> MANT_BITS) & 0x7ff) as i32;
    let mant = bits & ((1u64 << MANT_BITS) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let digits = format!("{mant:013x}");
    let digits = digits.trim_end_matches('0');
    let esign = if e < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{esign}{}", e.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{esign}{}", e.abs())
    }
}

/// x · 2^e, rounding at most once.
fn ldexp(mut x: f64, mut e: i32) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e)
}

pub fn parse_hex(s: &str) -> Result<f64> {
    let bad = |why: &str| Error::Domain(format!("invalid hex float {s:?}: {why}"));
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let signed = |v: f64| if neg { -v } else { v };
    match body {
        "inf" => return Ok(signed(f64::INFINITY)),
        "nan" => return Ok(f64::NAN),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(|| bad("missing 0x prefix"))?;
    let (mant_str, exp_str) = body
        .split_once(['p', 'P'])
        .ok_or_else(|| bad("missing binary exponent"))?;
    let (int_part, frac_part) = mant_str.split_once('.').unwrap_or((mant_str, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad("empty significand"));
    }
    let exp: i32 = exp_str.parse().map_err(|_| bad("bad exponent"))?;

    let mut sig: u64 = 0;
    let mut shift: i32 = 0;
    let mut sticky = false;
    for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
        let d = c.to_digit(16).ok_or_else(|| bad("non-hex digit"))? as u64;
        let in_frac = i >= int_part.len();
        if sig >> 60 == 0 {
            sig = (sig << 4) | d;
            if in_frac {
                shift -= 4;
            }
        } else {
            // Beyond 64 bits of precision: only the integer scale matters.
            sticky |= d != 0;
            if !in_frac {
                shift += 4;
            }
        }
    }
    if sticky {
        sig |= 1;
    }
    Ok(signed(ldexp(sig as f64, exp.saturating_add(shift))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_literals() {
        assert_eq!(format_hex(1.0), "0x1p+0");
        assert_eq!(format_hex(3.0), "0x1.8p+1");
        assert_eq!(format_hex(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(format_hex(0.0), "0x0p+0");
        assert_eq!(format_hex(-0.0), "-0x0p+0");
        assert_eq!(format_hex(f64::MIN_POSITIVE / 4.0), "0x0.4p-1022");
        assert_eq!(parse_hex("0x1.8p+1").unwrap(), 3.0);
        assert_eq!(parse_hex("0X10p-4").unwrap(), 1.0);
        assert_eq!(parse_hex("0x.8p1").unwrap(), 1.0);
        assert!(parse_hex("1.5").is_err());
        assert!(parse_hex("0x1.g").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back = parse_hex(&format_hex(x)).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
