//! Minimal UTC timestamp formatting and validation, enough for run
//! manifests and corpus `created_at` checks without pulling in a full
//! datetime dependency.

use std::time::{SystemTime, UNIX_EPOCH};

/// Civil date from days since 1970-01-01 (Howard Hinnant's algorithm).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn split_unix(secs: u64) -> (i64, u32, u32, u32, u32, u32) {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (y, mo, d) = civil_from_days(days);
    (y, mo, d, (rem / 3600) as u32, ((rem % 3600) / 60) as u32, (rem % 60) as u32)
}

/// Current UTC time as RFC 3339, e.g. `2026-08-10T12:34:56Z`.
pub fn utc_now_rfc3339() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
    let (y, mo, d, h, mi, s) = split_unix(secs);
    format!("{y:04}-{mo:02}-{d:02}T{h:02}:{mi:02}:{s:02}Z")
}

/// Current UTC time in the compact form used for run ids, e.g. `20260810T123456Z`.
pub fn utc_now_compact() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
    let (y, mo, d, h, mi, s) = split_unix(secs);
    format!("{y:04}{mo:02}{d:02}T{h:02}{mi:02}{s:02}Z")
}

/// Light ISO-8601 / RFC 3339 shape check for corpus timestamps:
/// `YYYY-MM-DDThh:mm:ss` with optional fractional seconds and a `Z` or
/// `±hh:mm` offset. Validates digits and field ranges, not calendar rules.
pub fn looks_like_iso8601(value: &str) -> bool {
    let bytes = value.as_bytes();
    if bytes.len() < 19 {
        return false;
    }
    let digits = |range: std::ops::Range<usize>| bytes[range].iter().all(|b| b.is_ascii_digit());
    let sep = |idx: usize, ch: u8| bytes.get(idx) == Some(&ch);
    if !(digits(0..4)
        && sep(4, b'-')
        && digits(5..7)
        && sep(7, b'-')
        && digits(8..10)
        && (sep(10, b'T') || sep(10, b't'))
        && digits(11..13)
        && sep(13, b':')
        && digits(14..16)
        && sep(16, b':')
        && digits(17..19))
    {
        return false;
    }
    let field = |range: std::ops::Range<usize>| value[range].parse::<u32>().unwrap_or(99);
    if !(1..=12).contains(&field(5..7)) || !(1..=31).contains(&field(8..10)) {
        return false;
    }
    if field(11..13) > 23 || field(14..16) > 59 || field(17..19) > 60 {
        return false;
    }
    let mut rest = &value[19..];
    if let Some(stripped) = rest.strip_prefix('.') {
        let frac_len = stripped.bytes().take_while(|b| b.is_ascii_digit()).count();
        if frac_len == 0 {
            return false;
        }
        rest = &stripped[frac_len..];
    }
    match rest {
        "" | "Z" | "z" => true,
        _ => {
            let b = rest.as_bytes();
            b.len() == 6
                && (b[0] == b'+' || b[0] == b'-')
                && b[1].is_ascii_digit()
                && b[2].is_ascii_digit()
                && b[3] == b':'
                && b[4].is_ascii_digit()
                && b[5].is_ascii_digit()
        }
    }
}
