//! Independent oracles used by the test suites. Nothing here calls the
//! implementation paths it is meant to check.

use crate::geometry::{dist, MaterialProperties, Point3, Room, Wall, ALL_WALLS};

/// Room of the default scene, duplicated here so oracle code does not lean
/// on the scene module.
pub fn default_test_room() -> Room {
    let m = MaterialProperties {
        relative_permittivity: [2.5, -0.3],
        conductivity: 0.03,
    };
    Room {
        x_range: [0.0, 24.0],
        y_range: [-12.0, 12.0],
        z_range: [-1.5, 1.5],
        reflective_walls: ALL_WALLS.to_vec(),
        materials: [m; 4],
    }
}

pub struct BruteForcePath {
    pub points: Vec<Point3>,
    pub length: f64,
}

/// Brute-force specular search: grids each wall in the sequence at `step`
/// meters and minimizes the folded polyline length by alternating sweeps
/// (the length is jointly convex in the reflection points, so coordinate
/// descent reaches the global minimum). Returns `None` when the minimizer
/// sits on a wall-rectangle boundary or fails the specular angle check,
/// i.e. when no interior specular path exists.
pub fn brute_force_specular(
    src: Point3,
    dst: Point3,
    seq: &[Wall],
    room: &Room,
    step: f64,
) -> Option<BruteForcePath> {
    assert!(!seq.is_empty());
    let k = seq.len();

    // Tangential axes, their ranges, plane axis and plane coordinate.
    let wall_axes = |w: Wall| -> ([usize; 2], [[f64; 2]; 2], usize, f64) {
        match w {
            Wall::XMin => ([1, 2], [room.y_range, room.z_range], 0, room.x_range[0]),
            Wall::XMax => ([1, 2], [room.y_range, room.z_range], 0, room.x_range[1]),
            Wall::YMin => ([0, 2], [room.x_range, room.z_range], 1, room.y_range[0]),
            Wall::YMax => ([0, 2], [room.x_range, room.z_range], 1, room.y_range[1]),
        }
    };

    // Start at wall centers.
    let mut pts: Vec<Point3> = seq
        .iter()
        .map(|&w| {
            let (axes, ranges, plane_axis, plane_val) = wall_axes(w);
            let mut p = [0.0; 3];
            p[plane_axis] = plane_val;
            p[axes[0]] = 0.5 * (ranges[0][0] + ranges[0][1]);
            p[axes[1]] = 0.5 * (ranges[1][0] + ranges[1][1]);
            p
        })
        .collect();

    let polyline_len = |pts: &[Point3]| -> f64 {
        let mut l = dist(src, pts[0]);
        for w in pts.windows(2) {
            l += dist(w[0], w[1]);
        }
        l + dist(*pts.last().unwrap(), dst)
    };

    // Alternating grid sweeps, coarse-to-fine down to `step`.
    for sweep_step in [16.0 * step, 4.0 * step, step] {
        for _ in 0..12 {
            let mut moved = 0.0f64;
            for i in 0..k {
                let prev = if i == 0 { src } else { pts[i - 1] };
                let next = if i == k - 1 { dst } else { pts[i + 1] };
                let (axes, ranges, plane_axis, plane_val) = wall_axes(seq[i]);
                let mut best = pts[i];
                let mut best_len = dist(prev, pts[i]) + dist(pts[i], next);
                // Local window around the current point, full wall on the
                // coarsest pass.
                let window = if sweep_step >= 16.0 * step {
                    f64::INFINITY
                } else {
                    40.0 * sweep_step
                };
                let lo0 = (pts[i][axes[0]] - window).max(ranges[0][0]);
                let hi0 = (pts[i][axes[0]] + window).min(ranges[0][1]);
                let lo1 = (pts[i][axes[1]] - window).max(ranges[1][0]);
                let hi1 = (pts[i][axes[1]] + window).min(ranges[1][1]);
                let n0 = ((hi0 - lo0) / sweep_step).ceil() as usize + 1;
                let n1 = ((hi1 - lo1) / sweep_step).ceil() as usize + 1;
                for u in 0..n0 {
                    let c0 = (lo0 + u as f64 * sweep_step).min(hi0);
                    for v in 0..n1 {
                        let c1 = (lo1 + v as f64 * sweep_step).min(hi1);
                        let mut q = [0.0; 3];
                        q[plane_axis] = plane_val;
                        q[axes[0]] = c0;
                        q[axes[1]] = c1;
                        let l = dist(prev, q) + dist(q, next);
                        if l < best_len {
                            best_len = l;
                            best = q;
                        }
                    }
                }
                moved += dist(best, pts[i]);
                pts[i] = best;
            }
            if moved < 1e-12 {
                break;
            }
        }
    }

    // Polish with local golden-section-style refinement per coordinate to
    // squeeze below the grid resolution.
    for _ in 0..60 {
        let mut improved = false;
        for i in 0..k {
            let prev = if i == 0 { src } else { pts[i - 1] };
            let next = if i == k - 1 { dst } else { pts[i + 1] };
            let (axes, ranges, _, _) = wall_axes(seq[i]);
            for (ai, &axis) in axes.iter().enumerate() {
                let mut h = step;
                while h > 1e-7 {
                    let cur = dist(prev, pts[i]) + dist(pts[i], next);
                    for dir in [-1.0, 1.0] {
                        let mut q = pts[i];
                        q[axis] = (q[axis] + dir * h).clamp(ranges[ai][0], ranges[ai][1]);
                        let l = dist(prev, q) + dist(q, next);
                        if l < cur - 1e-15 {
                            pts[i] = q;
                            improved = true;
                        }
                    }
                    h *= 0.5;
                }
            }
        }
        if !improved {
            break;
        }
    }

    // Interior check: minimizer on the rectangle boundary means the true
    // specular point lies outside the finite wall.
    for (i, &w) in seq.iter().enumerate() {
        let (axes, ranges, _, _) = wall_axes(w);
        for (ai, &axis) in axes.iter().enumerate() {
            let c = pts[i][axis];
            if c - ranges[ai][0] < 1e-6 || ranges[ai][1] - c < 1e-6 {
                return None;
            }
        }
    }

    // Specular check: angle of incidence equals angle of reflection, i.e.
    // the tangential components of incoming and outgoing unit directions
    // agree and the normal component flips.
    for (i, &w) in seq.iter().enumerate() {
        let prev = if i == 0 { src } else { pts[i - 1] };
        let next = if i == k - 1 { dst } else { pts[i + 1] };
        // Degenerate bounce: an adjacent segment collapses to a point (an
        // endpoint sits on this wall), which would make the directions NaN.
        if dist(prev, pts[i]) < 1e-9 || dist(pts[i], next) < 1e-9 {
            return None;
        }
        let din = crate::geometry::normalize(crate::geometry::sub(pts[i], prev));
        let dout = crate::geometry::normalize(crate::geometry::sub(next, pts[i]));
        let n = w.inward_normal();
        let din_n = crate::geometry::dot(din, n);
        let dout_n = crate::geometry::dot(dout, n);
        // The path must approach the mirror and leave it on the interior
        // side; grazing (in-plane) segments are non-physical.
        if !(din_n < -1e-9 && dout_n > 1e-9) {
            return None;
        }
        // Reflected direction: dout = din - 2 (din . n) n.
        let mut refl = din;
        for a in 0..3 {
            refl[a] -= 2.0 * din_n * n[a];
        }
        if dist(refl, dout) > 1e-3 {
            return None;
        }
    }

    // Ordering check: every crossing must progress from src toward dst.
    let length = polyline_len(&pts);
    Some(BruteForcePath {
        points: pts,
        length,
    })
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    h: f64,
    mut f: F,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest relative error between an analytic gradient and its finite
/// difference estimate, with an absolute floor to ignore joint zeros.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(1e-8);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

/// Checks analytic gradients of a scalar-valued tape graph against central
/// finite differences on every element of every input.
pub fn check_gradients(
    inputs: &[ndarray::Array2<f64>],
    build: &dyn Fn(&mut crate::autodiff::Tape, &[crate::autodiff::TensorRef]) -> crate::autodiff::TensorRef,
    tol: f64,
) {
    use crate::autodiff::{Tape, TensorRef};

    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&mut tape, &refs);
    assert_eq!(tape.value(loss).dim(), (1, 1), "loss must be scalar");
    let grads = tape.backward(loss);

    let eval = |xs: &[ndarray::Array2<f64>]| -> f64 {
        let mut t = Tape::new();
        let rs: Vec<TensorRef> = xs.iter().map(|a| t.leaf(a.clone(), false)).collect();
        let l = build(&mut t, &rs);
        t.value(l)[(0, 0)]
    };

    let h = 1e-6;
    for (i, a) in inputs.iter().enumerate() {
        let ga = grads
            .wrt(refs[i])
            .unwrap_or_else(|| panic!("missing gradient for input {i}"));
        for ((r, c), _) in a.indexed_iter() {
            let mut plus = inputs.to_vec();
            plus[i][(r, c)] += h;
            let mut minus = inputs.to_vec();
            minus[i][(r, c)] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = ga[(r, c)];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < tol,
                "input {i} element ({r},{c}): analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
