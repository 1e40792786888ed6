// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature layout shared by the scene embedder and the planted model.
//!
//! | dims    | image patches                 | text tokens                     |
//! |---------|-------------------------------|---------------------------------|
//! | 0..8    | shape one-hot (object cells)  | zero                            |
//! | 8..16   | color one-hot (object cells)  | zero                            |
//! | 16..24  | zero                          | token-identity code             |
//! | 24..28  | outlier block, 5.0 each       | zero                            |
//! | 28..32  | background noise              | word-identity bits              |
//!
//! Inside the token-identity code: 16..18 shape-group direction, 18..20
//! color-group direction, 20 readout flag, 21 option flag, 22 function-word
//! flag, 23 always zero (reference dim for zero-sum readers).

use std::ops::Range;

/// Width of a patch feature vector and of the planted model's residual.
pub const FEATURE_DIM: usize = 32;

pub const SHAPE_DIMS: Range<usize> = 0..8;
pub const COLOR_DIMS: Range<usize> = 8..16;
pub const SHAPE_GROUP_DIMS: Range<usize> = 16..18;
pub const COLOR_GROUP_DIMS: Range<usize> = 18..20;
pub const READOUT_FLAG: usize = 20;
pub const OPTION_FLAG: usize = 21;
pub const FUNCTION_FLAG: usize = 22;
pub const ZERO_REF: usize = 23;
pub const OUTLIER_DIMS: Range<usize> = 24..28;
pub const SCRATCH_DIMS: Range<usize> = 28..32;

/// Per-dimension value on outlier cells; four dims give norm 10.
pub const OUTLIER_VALUE: f64 = 5.0;
/// Half-width of the uniform background noise; norm stays below 0.1.
pub const BACKGROUND_NOISE: f64 = 0.04;

/// Residual dimension carrying attribute value `value` of `kind`.
pub fn attribute_dim(kind: crate::vocab::AttributeKind, value: usize) -> usize {
    match kind {
        crate::vocab::AttributeKind::Shape => SHAPE_DIMS.start + value,
        crate::vocab::AttributeKind::Color => COLOR_DIMS.start + value,
    }
}

/// Direction of group `g` in a 2-D plane; distinct groups are orthogonal
/// or opposite.
pub fn group_direction(g: usize) -> [f64; 2] {
    match g % 4 {
        0 => [1.0, 0.0],
        1 => [0.0, 1.0],
        2 => [-1.0, 0.0],
        _ => [0.0, -1.0],
    }
}

/// Unit code of attribute value `v` (eight directions 45° apart). The two
/// members of a group are antipodal, so adjacent dims cancel exactly.
pub fn value_code(v: usize) -> [f64; 2] {
    let angle = std::f64::consts::FRAC_PI_4 * (v / 2) as f64;
    let (c, s) = (angle.cos(), angle.sin());
    if v % 2 == 1 {
        [-c, -s]
    } else {
        [c, s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_codes_are_distinct_units() {
        for a in 0..8 {
            let ca = value_code(a);
            assert!(((ca[0] * ca[0] + ca[1] * ca[1]) - 1.0).abs() < 1e-15);
            for b in 0..8 {
                let cb = value_code(b);
                let dot = ca[0] * cb[0] + ca[1] * cb[1];
                if a != b {
                    assert!(dot < 0.75, "{a} {b} {dot}");
                }
            }
        }
    }

    #[test]
    fn group_members_cancel_exactly() {
        for g in 0..4 {
            let a = value_code(2 * g);
            let b = value_code(2 * g + 1);
            assert_eq!(a[0] + b[0], 0.0);
            assert_eq!(a[1] + b[1], 0.0);
        }
    }
}
