//! The 68-point landmark convention (Multi-PIE ordering).
//!
//! Index ranges: jaw 0-16, brows 17-26, nose bridge 27-30, nostrils 31-35,
//! eyes 36-47, outer lip 48-59, inner lip 60-67.

use std::f64::consts::PI;

pub const LANDMARK_COUNT: usize = 68;

/// Outer eye corners, used for inter-ocular distance.
pub const RIGHT_EYE_OUTER: usize = 36;
pub const LEFT_EYE_OUTER: usize = 45;

/// True for nose (27-35) and mouth (48-67) points.
pub fn mouthnose_mask() -> Vec<bool> {
    (0..LANDMARK_COUNT)
        .map(|i| (27..=35).contains(&i) || (48..=67).contains(&i))
        .collect()
}

/// Canonical frontal 68-point layout in normalized face coordinates:
/// x to the right, y down, roughly within [-1, 1]^2.
pub fn template_2d() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);

    for i in 0..17 {
        let t = i as f64 / 16.0;
        pts.push([-0.95 * (PI * t).cos(), -0.1 + 1.05 * (PI * t).sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { -0.75 + 0.6 * s } else { 0.15 + 0.6 * s };
            pts.push([x, -0.45 - 0.08 * (PI * s).sin()]);
        }
    }
    for i in 0..4 {
        pts.push([0.0, -0.3 + 0.15 * i as f64]);
    }
    for i in 0..5 {
        let x = -0.2 + 0.1 * i as f64;
        pts.push([x, 0.25 + 0.04 * (1.0 - (x / 0.2).powi(2))]);
    }
    let eye_angles = [PI, 2.0 * PI / 3.0, PI / 3.0, 0.0, -PI / 3.0, -2.0 * PI / 3.0];
    for cx in [-0.4, 0.4] {
        for a in eye_angles {
            pts.push([cx + 0.15 * a.cos(), -0.25 - 0.06 * a.sin()]);
        }
    }
    for k in 0..12 {
        let a = PI - k as f64 * PI / 6.0;
        pts.push([0.35 * a.cos(), 0.55 - 0.15 * a.sin()]);
    }
    for k in 0..8 {
        let a = PI - k as f64 * PI / 4.0;
        pts.push([0.25 * a.cos(), 0.55 - 0.06 * a.sin()]);
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}
