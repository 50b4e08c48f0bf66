use serde::{Deserialize, Serialize};

/// Closed interval of fused-node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
}

impl Interval {
    pub fn new(start: i64, end: i64) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub interval: Interval,
    pub offset: u64,
    pub bytes: u64,
}

/// Lowest offset where `bytes` fit without overlapping any placement whose
/// interval intersects `interval`.
pub fn first_fit(placed: &[Placement], interval: Interval, bytes: u64) -> u64 {
    let mut busy: Vec<(u64, u64)> = placed
        .iter()
        .filter(|p| p.interval.overlaps(&interval) && p.bytes > 0)
        .map(|p| (p.offset, p.offset + p.bytes))
        .collect();
    busy.sort_unstable();
    let mut offset = 0;
    for (start, end) in busy {
        if offset + bytes <= start {
            break;
        }
        offset = offset.max(end);
    }
    offset
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(start: i64, end: i64, offset: u64, bytes: u64) -> Placement {
        Placement {
            interval: Interval::new(start, end),
            offset,
            bytes,
        }
    }

    #[test]
    fn fills_holes_and_skips_disjoint_lifetimes() {
        let placed = [p(0, 3, 0, 100), p(0, 3, 200, 100), p(5, 6, 100, 50)];
        assert_eq!(first_fit(&placed, Interval::new(1, 2), 100), 100);
        assert_eq!(first_fit(&placed, Interval::new(1, 2), 101), 300);
        assert_eq!(first_fit(&placed, Interval::new(4, 4), 500), 0);
    }
}
