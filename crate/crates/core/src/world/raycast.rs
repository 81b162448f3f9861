use super::{AgentPose, GridMap};
use crate::numerics::{Array, Scalar};

/// Bearing of ray `i` of `n`, in radians relative to the heading (positive = right).
pub fn ray_offset(i: usize, n: usize) -> f64 {
    let fov = std::f64::consts::FRAC_PI_2;
    if n == 1 {
        0.0
    } else {
        -fov / 2.0 + fov * i as f64 / (n - 1) as f64
    }
}

/// Center-to-center distance from the agent's cell to the first wall cell hit
/// by a ray leaving the cell center at absolute bearing `angle` (clockwise from
/// north), or `None` beyond `max_range`.
pub fn cast_ray(map: &GridMap, pose: &AgentPose, angle: f64, max_range: f64) -> Option<f64> {
    let (sx, sy) = (pose.cell.x as f64 + 0.5, pose.cell.y as f64 + 0.5);
    let (dx, dy) = (angle.sin(), -angle.cos());
    let (mut cx, mut cy) = (pose.cell.x as isize, pose.cell.y as isize);
    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    let inv = |d: f64| if d.abs() < 1e-12 { f64::INFINITY } else { 1.0 / d.abs() };
    let (delta_x, delta_y) = (inv(dx), inv(dy));
    let next_boundary = |s: f64, c: isize, step: isize| {
        if step > 0 {
            (c + 1) as f64 - s
        } else {
            s - c as f64
        }
    };
    let mut t_x = next_boundary(sx, cx, step_x) * delta_x;
    let mut t_y = next_boundary(sy, cy, step_y) * delta_y;
    loop {
        if t_x < t_y {
            cx += step_x;
            t_x += delta_x;
        } else {
            cy += step_y;
            t_y += delta_y;
        }
        let ddx = (cx - pose.cell.x as isize) as f64;
        let ddy = (cy - pose.cell.y as isize) as f64;
        let dist = (ddx * ddx + ddy * ddy).sqrt();
        if map.is_wall_at(cx, cy) {
            return if dist > max_range { None } else { Some(dist) };
        }
        if dist > max_range + 1.5 {
            return None;
        }
    }
}

/// `[1, height, width]` depth image: `width` rays over a 90 degree field of view,
/// normalized by `max_range` and clamped to `[0, 1]`, replicated over rows.
pub fn raycast_depth<T: Scalar>(map: &GridMap, pose: &AgentPose, height: usize, width: usize, max_range: f64) -> Array<T> {
    let base = pose.heading.index() as f64 * std::f64::consts::FRAC_PI_2;
    let row: Vec<T> = (0..width)
        .map(|i| {
            let d = cast_ray(map, pose, base + ray_offset(i, width), max_range);
            T::from_f64_lossy(d.map_or(1.0, |d| (d / max_range).clamp(0.0, 1.0)))
        })
        .collect();
    Array::from_fn(&[1, height, width], |i| row[i % width])
}
