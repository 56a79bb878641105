//! Serde helpers for `f64` fields that may hold ±∞, which JSON cannot
//! represent as numbers. Infinite values are written as the strings `"inf"`
//! and `"-inf"`; finite values stay numbers.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        Err(serde::ser::Error::custom("NaN is not a valid threshold"))
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Str(String),
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => parse(&s).map_err(de::Error::custom),
    }
}

/// Parses a number, accepting `inf`, `+inf`, `-inf`, `infinity` (any case).
pub fn parse(s: &str) -> Result<f64, String> {
    let t = s.trim().to_ascii_lowercase();
    match t.as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ => t.parse::<f64>().map_err(|e| format!("invalid number `{s}`: {e}")),
    }
}
