//! Closed time intervals and interval-union arithmetic.

/// True when the two intervals share a point. Positive-length intervals
/// must overlap on a set of positive length; a zero-length interval
/// overlaps anything that contains it.
pub fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if a.0 == a.1 || b.0 == b.1 {
        lo <= hi
    } else {
        lo < hi
    }
}

/// Length of the overlap between two intervals (0 if disjoint).
pub fn overlap_len(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Merges intervals into a sorted list of disjoint intervals. Touching
/// intervals are joined.
pub fn union<I: IntoIterator<Item = (f64, f64)>>(intervals: I) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = intervals.into_iter().filter(|(s, e)| e >= s).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Total measure of the union of `intervals`.
pub fn union_len<I: IntoIterator<Item = (f64, f64)>>(intervals: I) -> f64 {
    union(intervals).iter().map(|(s, e)| e - s).sum()
}

/// Complement of `intervals` within `[0, total]`, as maximal gaps.
/// Zero-length gaps are omitted.
pub fn complement<I: IntoIterator<Item = (f64, f64)>>(intervals: I, total: f64) -> Vec<(f64, f64)> {
    let mut gaps = Vec::new();
    let mut cursor = 0.0;
    for (s, e) in union(intervals) {
        let s = s.clamp(0.0, total);
        let e = e.clamp(0.0, total);
        if s > cursor {
            gaps.push((cursor, s));
        }
        cursor = cursor.max(e);
    }
    if total > cursor {
        gaps.push((cursor, total));
    }
    gaps
}
