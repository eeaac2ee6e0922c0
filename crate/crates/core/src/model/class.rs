use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size category of a request relative to the per-GPU KV capacity `C`.
///
/// Intervals are open below and closed above: L is `(C/2, C]`, M is `(C/3, C/2]`,
/// S is `(C/4, C/3]`, T is `(C/8, C/4]` and Tiny is `(0, C/8]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Tiny,
    T,
    S,
    M,
    L,
}

impl SizeClass {
    pub const ALL: [SizeClass; 5] = [
        SizeClass::Tiny,
        SizeClass::T,
        SizeClass::S,
        SizeClass::M,
        SizeClass::L,
    ];

    /// Classes that label a GPU. Tiny items are always scheduled inside T-sized groups.
    pub const GPU_CATEGORIES: [SizeClass; 4] =
        [SizeClass::L, SizeClass::M, SizeClass::S, SizeClass::T];

    pub fn is_medium_or_small(self) -> bool {
        matches!(self, SizeClass::M | SizeClass::S)
    }

    pub fn is_tiny_or_t(self) -> bool {
        matches!(self, SizeClass::T | SizeClass::Tiny)
    }

    /// The divisor `d` such that the class lower bound is `C/d`.
    fn lower_divisor(self) -> u64 {
        match self {
            SizeClass::L => 2,
            SizeClass::M => 3,
            SizeClass::S => 4,
            SizeClass::T => 8,
            SizeClass::Tiny => u64::MAX,
        }
    }

    /// Whether `size` lies in this class's interval for capacity `capacity`.
    pub fn contains(self, size: u64, capacity: u64) -> bool {
        if size == 0 || size > capacity {
            return false;
        }
        let above_lower = match self {
            SizeClass::Tiny => true,
            c => (size as u128) * (c.lower_divisor() as u128) > capacity as u128,
        };
        let at_most_upper = match self {
            SizeClass::L => true,
            SizeClass::M => (size as u128) * 2 <= capacity as u128,
            SizeClass::S => (size as u128) * 3 <= capacity as u128,
            SizeClass::T => (size as u128) * 4 <= capacity as u128,
            SizeClass::Tiny => (size as u128) * 8 <= capacity as u128,
        };
        above_lower && at_most_upper
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SizeClass::Tiny => "Tiny",
            SizeClass::T => "T",
            SizeClass::S => "S",
            SizeClass::M => "M",
            SizeClass::L => "L",
        };
        f.write_str(s)
    }
}

/// Classifies a KV footprint against capacity `capacity`.
pub fn classify_request(size: u64, capacity: u64) -> Result<SizeClass> {
    if size == 0 {
        return Err(Error::Precondition("request size must be positive".into()));
    }
    if size > capacity {
        return Err(Error::Infeasible { size, capacity });
    }
    Ok(classify_unchecked(size, capacity))
}

pub(crate) fn classify_unchecked(size: u64, capacity: u64) -> SizeClass {
    let (s, c) = (size as u128, capacity as u128);
    if 2 * s > c {
        SizeClass::L
    } else if 3 * s > c {
        SizeClass::M
    } else if 4 * s > c {
        SizeClass::S
    } else if 8 * s > c {
        SizeClass::T
    } else {
        SizeClass::Tiny
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(classify_request(13, 24).unwrap(), SizeClass::L);
        assert_eq!(classify_request(8, 24).unwrap(), SizeClass::S);
        assert_eq!(classify_request(2, 24).unwrap(), SizeClass::Tiny);
    }

    #[test]
    fn boundaries_fall_into_lower_named_class() {
        assert_eq!(classify_request(12, 24).unwrap(), SizeClass::M);
        assert_eq!(classify_request(6, 24).unwrap(), SizeClass::T);
        assert_eq!(classify_request(3, 24).unwrap(), SizeClass::Tiny);
        assert_eq!(classify_request(24, 24).unwrap(), SizeClass::L);
    }

    #[test]
    fn out_of_range_sizes() {
        assert!(matches!(classify_request(25, 24), Err(Error::Infeasible { .. })));
        assert!(matches!(classify_request(0, 24), Err(Error::Precondition(_))));
    }

    proptest::proptest! {
        #[test]
        fn exactly_one_interval_contains_each_size(cap in 1u64..10_000, frac in 0.0f64..1.0) {
            let size = ((cap as f64 * frac).ceil() as u64).clamp(1, cap);
            let holders: Vec<_> = SizeClass::ALL.iter().filter(|c| c.contains(size, cap)).collect();
            proptest::prop_assert_eq!(holders.len(), 1);
            proptest::prop_assert_eq!(*holders[0], classify_request(size, cap).unwrap());
        }
    }
}
