//! JSON output with every float written at 17 significant digits, enough
//! to recover the exact binary64 value.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

struct Sig17;

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write!(w, "{:.16e}", f64::from(v))
    }
}

pub fn to_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    value.serialize(&mut Serializer::with_formatter(&mut buf, Sig17))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Writes one JSON document followed by a newline to `out`, or to stdout.
pub fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> io::Result<()> {
    let mut text = to_string(value).map_err(io::Error::other)?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        let v = vec![0.1_f64, -1.0 / 3.0, 1e-300, 12345.678];
        let s = to_string(&v).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn integers_untouched() {
        assert_eq!(to_string(&(3u32, "x")).unwrap(), "[3,\"x\"]");
    }
}
