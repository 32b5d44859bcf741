//! Fixed-precision JSON for solver reports.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

/// Compact JSON writer that prints every float with exactly six decimals.
struct SixDecimals;

impl Formatter for SixDecimals {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.6}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.6}")
    }
}

pub fn six_decimals<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut out = Vec::new();
    value.serialize(&mut serde_json::Serializer::with_formatter(&mut out, SixDecimals))?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}
