/// Formats a timestamp in seconds with up to millisecond resolution,
/// trimming trailing zeros: `10` rather than `10.000`, `85.88` as-is.
pub fn fmt_seconds(v: f64) -> String {
    let rounded = (v * 1000.0).round() / 1000.0;
    let mut s = format!("{rounded:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// FNV-1a over bytes. Stable across runs and platforms, unlike the std
/// hasher, so persisted policy parameters keep their keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seconds_formatting_trims_zeros() {
        assert_eq!(fmt_seconds(10.0), "10");
        assert_eq!(fmt_seconds(85.88), "85.88");
        assert_eq!(fmt_seconds(0.125), "0.125");
        assert_eq!(fmt_seconds(105.24), "105.24");
        assert_eq!(fmt_seconds(0.0), "0");
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
