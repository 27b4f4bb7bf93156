use std::ops::Range;

/// Prefix-style merge policy. `sizes` are component sizes, oldest first.
///
/// Components no larger than `max_bytes` are eligible. Once at least
/// `tolerable` of them exist, the oldest contiguous run of two or more
/// eligible components is merged.
pub fn pick_merge(sizes: &[u64], max_bytes: u64, tolerable: usize) -> Option<Range<usize>> {
    let eligible: Vec<bool> = sizes.iter().map(|&s| s <= max_bytes).collect();
    if eligible.iter().filter(|&&e| e).count() < tolerable {
        return None;
    }
    let mut start = 0;
    while start < sizes.len() {
        if !eligible[start] {
            start += 1;
            continue;
        }
        let end = (start..sizes.len()).find(|&i| !eligible[i]).unwrap_or(sizes.len());
        if end - start >= 2 {
            return Some(start..end);
        }
        start = end;
    }
    None
}
