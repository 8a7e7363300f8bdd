//! Left-side boundary extension for causal filters.
//!
//! A causal filter at position `t` reads `x[t - j]` for `j` in `0..k`; indices
//! below zero are resolved here.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PadMode {
    /// Mirror about the first sample without repeating it: `[a,b,c]` padded
    /// by two reads `[c,b,a,b,c]`. Long pads keep reflecting.
    ///
    /// The mirrored samples come from positions `1..=p`, so the first `p`
    /// outputs see later inputs.
    Reflect,
    /// Repeat the first sample. Strictly causal.
    Edge,
    /// Zeros before the start. Strictly causal.
    Zero,
}

impl PadMode {
    /// Whether every output depends only on inputs at or before its position.
    pub fn is_causal(self) -> bool {
        !matches!(self, PadMode::Reflect)
    }
}

/// Resolves a possibly negative position into a sample index of a signal of
/// length `len`. `None` means the padded value is zero.
#[inline]
pub fn source_index(pos: isize, len: usize, mode: PadMode) -> Option<usize> {
    if pos >= 0 {
        return Some(pos as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Edge => Some(0),
        PadMode::Reflect => {
            if len == 1 {
                return Some(0);
            }
            let period = 2 * (len as isize - 1);
            let r = pos.rem_euclid(period);
            Some(if r < len as isize { r } else { period - r } as usize)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_excludes_the_edge_sample() {
        let idx: Vec<_> = (-2..3).map(|p| source_index(p, 3, PadMode::Reflect).unwrap()).collect();
        assert_eq!(idx, vec![2, 1, 0, 1, 2]);
    }

    #[test]
    fn long_reflection_bounces() {
        // [a,b,c] extended by 5 on the left: b a b c b | a b c
        let idx: Vec<_> = (-5..0).map(|p| source_index(p, 3, PadMode::Reflect).unwrap()).collect();
        assert_eq!(idx, vec![1, 0, 1, 2, 1]);
    }

    #[test]
    fn edge_and_zero() {
        assert_eq!(source_index(-4, 3, PadMode::Edge), Some(0));
        assert_eq!(source_index(-1, 3, PadMode::Zero), None);
        assert_eq!(source_index(2, 3, PadMode::Zero), Some(2));
    }
}
