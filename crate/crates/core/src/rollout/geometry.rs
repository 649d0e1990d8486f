//! Oriented-box overlap, box separation and drivable-area tests.

use crate::scenario::{AgentDims, MapContext, Pose};

/// Lateral slack beyond half the lane width before a point counts as off-road.
pub const OFF_ROAD_TOLERANCE: f64 = 0.5;

/// Corners of an oriented rectangle, counter-clockwise from rear-right.
pub fn box_corners(pose: Pose, dims: AgentDims) -> [[f64; 2]; 4] {
    let (s, c) = pose.heading.sin_cos();
    let hl = 0.5 * dims.length;
    let hw = 0.5 * dims.width;
    let corner = |l: f64, w: f64| [pose.x + l * c - w * s, pose.y + l * s + w * c];
    [corner(-hl, -hw), corner(hl, -hw), corner(hl, hw), corner(-hl, hw)]
}

fn half_extent(axis: [f64; 2], heading: f64, dims: AgentDims) -> f64 {
    let (s, c) = heading.sin_cos();
    0.5 * dims.length * (axis[0] * c + axis[1] * s).abs() + 0.5 * dims.width * (-axis[0] * s + axis[1] * c).abs()
}

/// Separating-axis overlap test for two oriented rectangles. Touching
/// boxes count as overlapping.
pub fn obb_collision(a: Pose, dims_a: AgentDims, b: Pose, dims_b: AgentDims) -> bool {
    let d = [b.x - a.x, b.y - a.y];
    let axes = {
        let (sa, ca) = a.heading.sin_cos();
        let (sb, cb) = b.heading.sin_cos();
        [[ca, sa], [-sa, ca], [cb, sb], [-sb, cb]]
    };
    axes.iter().all(|&ax| {
        let dist = (d[0] * ax[0] + d[1] * ax[1]).abs();
        dist <= half_extent(ax, a.heading, dims_a) + half_extent(ax, b.heading, dims_b)
    })
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

/// Distance from `p` to a polyline.
pub fn point_polyline_distance(p: [f64; 2], points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest gap between two rectangles; zero when they overlap.
pub fn box_gap(a: Pose, dims_a: AgentDims, b: Pose, dims_b: AgentDims) -> f64 {
    if obb_collision(a, dims_a, b, dims_b) {
        return 0.0;
    }
    let ca = box_corners(a, dims_a);
    let cb = box_corners(b, dims_b);
    let mut best = f64::INFINITY;
    for (pts, poly) in [(&ca, &cb), (&cb, &ca)] {
        for p in pts.iter() {
            for i in 0..4 {
                best = best.min(point_segment_distance(*p, poly[i], poly[(i + 1) % 4]));
            }
        }
    }
    best
}

/// True iff `pos` lies farther than half-width plus tolerance from every
/// lane centerline.
pub fn off_road(pos: [f64; 2], map: &MapContext) -> bool {
    map.lanes
        .iter()
        .all(|lane| point_polyline_distance(pos, &lane.points) > 0.5 * lane.width + OFF_ROAD_TOLERANCE)
}

/// The front half of an agent's footprint as its own rectangle.
pub fn front_half(pose: Pose, dims: AgentDims) -> (Pose, AgentDims) {
    let (s, c) = pose.heading.sin_cos();
    let q = 0.25 * dims.length;
    (
        Pose::new(pose.x + q * c, pose.y + q * s, pose.heading),
        AgentDims {
            length: 0.5 * dims.length,
            width: dims.width,
        },
    )
}
