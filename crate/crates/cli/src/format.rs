//! Number formatting shared by every table writer.

/// Significant digits of every real written to a table.
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds to [`SIGNIFICANT_DIGITS`] and prints the shortest decimal that
/// reads back to the rounded value. Negative zero prints as `0`.
pub fn real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x);
    if rounded == 0.0 {
        return "0".into();
    }
    format!("{rounded}")
}

/// Empty field for a missing value.
pub fn optional(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}
