//! Locale-free decimal formatting for CSV output.

/// Formats `x` in plain decimal notation with `digits` significant digits.
pub fn sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1) as i32;
    let exp = x.abs().log10().floor() as i32;
    let decimals = (digits - 1 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding may carry into a new leading digit, e.g. 9.99.. -> 10.0..
    let lead = s.trim_start_matches('-').split('.').next().unwrap_or("");
    let int_digits = lead.trim_start_matches('0').len() as i32;
    if decimals > 0 && int_digits > exp + 1 && int_digits > 0 {
        let decimals = decimals - 1;
        return format!("{x:.decimals$}");
    }
    s
}
