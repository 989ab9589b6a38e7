//! Specular multipath enumeration inside a rectangular room via the
//! image-source method.
//!
//! A propagation path is identified by the ordered sequence of walls it
//! reflects off. Mirroring the source across each wall in sequence yields a
//! chain of image points; the path is recovered by backtracking straight
//! segments from the destination toward successive images. A candidate is
//! valid iff every reflection point lands on the finite wall rectangle and
//! every plane crossing happens strictly inside the segment. The room is
//! convex, so folded segments can never leave it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-D point or vector in meters, room coordinates.
pub type Point3 = [f64; 3];

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

pub fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Identifier of a vertical wall. Ceiling and floor are non-reflective and
/// intentionally absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wall {
    XMin,
    XMax,
    YMin,
    YMax,
}

pub const ALL_WALLS: [Wall; 4] = [Wall::XMin, Wall::XMax, Wall::YMin, Wall::YMax];

impl Wall {
    /// Coordinate axis the wall plane is orthogonal to (0 = x, 1 = y).
    pub fn axis(self) -> usize {
        match self {
            Wall::XMin | Wall::XMax => 0,
            Wall::YMin | Wall::YMax => 1,
        }
    }

    /// Unit normal pointing from the wall into the room.
    pub fn inward_normal(self) -> Point3 {
        match self {
            Wall::XMin => [1.0, 0.0, 0.0],
            Wall::XMax => [-1.0, 0.0, 0.0],
            Wall::YMin => [0.0, 1.0, 0.0],
            Wall::YMax => [0.0, -1.0, 0.0],
        }
    }
}

/// Electromagnetic surface properties of one wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialProperties {
    /// Relative permittivity, possibly complex (`[re, im]`).
    pub relative_permittivity: [f64; 2],
    /// Conductivity in S/m.
    pub conductivity: f64,
}

impl MaterialProperties {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.relative_permittivity[0] < 1.0 {
            return Err(GeometryError::InvalidMaterial(
                "Re(relative permittivity) must be >= 1".into(),
            ));
        }
        if self.conductivity < 0.0 {
            return Err(GeometryError::InvalidMaterial(
                "conductivity must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned rectangular room with a reflective subset of its four
/// vertical walls. Ceiling and floor never reflect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Room {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub reflective_walls: Vec<Wall>,
    /// Material per wall, in `ALL_WALLS` order.
    pub materials: [MaterialProperties; 4],
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate room range: {0}")]
    DegenerateRange(String),
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("point {0:?} outside the room")]
    PointOutsideRoom(Point3),
    #[error("arrival direction is from behind the surface")]
    ArrivalFromBehind,
    #[error("duplicate wall in reflective set")]
    DuplicateWall,
}

impl Room {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, r) in [
            ("x", self.x_range),
            ("y", self.y_range),
            ("z", self.z_range),
        ] {
            if !(r[1] > r[0]) {
                return Err(GeometryError::DegenerateRange(format!(
                    "{name}_range [{}, {}]",
                    r[0], r[1]
                )));
            }
        }
        let mut seen = [false; 4];
        for w in &self.reflective_walls {
            let i = *w as usize;
            if seen[i] {
                return Err(GeometryError::DuplicateWall);
            }
            seen[i] = true;
        }
        for m in &self.materials {
            m.validate()?;
        }
        Ok(())
    }

    /// Plane coordinate of a wall along its axis.
    pub fn wall_plane(&self, wall: Wall) -> f64 {
        match wall {
            Wall::XMin => self.x_range[0],
            Wall::XMax => self.x_range[1],
            Wall::YMin => self.y_range[0],
            Wall::YMax => self.y_range[1],
        }
    }

    pub fn material(&self, wall: Wall) -> &MaterialProperties {
        &self.materials[wall as usize]
    }

    /// Closed-box containment.
    pub fn contains(&self, p: Point3) -> bool {
        p[0] >= self.x_range[0]
            && p[0] <= self.x_range[1]
            && p[1] >= self.y_range[0]
            && p[1] <= self.y_range[1]
            && p[2] >= self.z_range[0]
            && p[2] <= self.z_range[1]
    }

    /// True iff `p` lies on the plane of `wall` within its finite extent.
    fn on_wall_rect(&self, wall: Wall, p: Point3) -> bool {
        match wall.axis() {
            0 => {
                p[1] >= self.y_range[0]
                    && p[1] <= self.y_range[1]
                    && p[2] >= self.z_range[0]
                    && p[2] <= self.z_range[1]
            }
            _ => {
                p[0] >= self.x_range[0]
                    && p[0] <= self.x_range[1]
                    && p[2] >= self.z_range[0]
                    && p[2] <= self.z_range[1]
            }
        }
    }
}

/// One specular propagation path between two endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGeometry {
    /// Walls hit in order of travel from source to destination.
    pub wall_sequence: Vec<Wall>,
    /// Reflection point on each wall, same order.
    pub reflection_points: Vec<Point3>,
    /// Unit direction of each straight segment, source to destination.
    /// One more entry than reflections.
    pub segment_directions: Vec<Point3>,
    /// Total unfolded length in meters.
    pub total_length: f64,
    /// Incidence angle at each reflection, measured from the wall normal.
    pub incidence_angles: Vec<f64>,
}

/// All wall sequences of length `0..=max_reflections` with no immediate
/// repetition, in lexicographic (depth-first, prefix-first) order.
pub fn enumerate_reflection_sequences(max_reflections: usize, walls: &[Wall]) -> Vec<Vec<Wall>> {
    assert!(!walls.is_empty(), "walls must be non-empty");
    let mut sorted = walls.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn recurse(
        prefix: &mut Vec<Wall>,
        walls: &[Wall],
        remaining: usize,
        out: &mut Vec<Vec<Wall>>,
    ) {
        out.push(prefix.clone());
        if remaining == 0 {
            return;
        }
        for &w in walls {
            if prefix.last() == Some(&w) {
                continue;
            }
            prefix.push(w);
            recurse(prefix, walls, remaining - 1, out);
            prefix.pop();
        }
    }
    recurse(&mut prefix, &sorted, max_reflections, &mut out);
    out
}

/// Mirror `point` successively across each wall plane in sequence order.
pub fn image_source(point: Point3, wall_sequence: &[Wall], room: &Room) -> Point3 {
    let mut p = point;
    for &w in wall_sequence {
        let v = room.wall_plane(w);
        p[w.axis()] = 2.0 * v - p[w.axis()];
    }
    p
}

/// Trace the specular path `src -> wall_sequence -> dst`. Returns `None`
/// when any reflection point misses its wall rectangle or a plane crossing
/// falls outside the open segment.
pub fn trace_path(
    src: Point3,
    dst: Point3,
    wall_sequence: &[Wall],
    room: &Room,
) -> Option<PathGeometry> {
    debug_assert!(room.contains(src) && room.contains(dst));
    let k = wall_sequence.len();
    if k == 0 {
        let d = dist(src, dst);
        let dir = if d > 0.0 {
            normalize(sub(dst, src))
        } else {
            [0.0, 0.0, 0.0]
        };
        return Some(PathGeometry {
            wall_sequence: Vec::new(),
            reflection_points: Vec::new(),
            segment_directions: vec![dir],
            total_length: d,
            incidence_angles: Vec::new(),
        });
    }

    // Image chain: images[i] is src mirrored across the first i walls.
    let mut images = Vec::with_capacity(k + 1);
    images.push(src);
    for i in 0..k {
        images.push(image_source(images[i], &wall_sequence[i..i + 1], room));
    }
    let total_length = dist(dst, images[k]);

    // Backtrack from dst toward successive images.
    let mut points_rev = Vec::with_capacity(k);
    let mut q = dst;
    for i in (0..k).rev() {
        let wall = wall_sequence[i];
        let target = images[i + 1];
        let axis = wall.axis();
        let plane = room.wall_plane(wall);
        let denom = target[axis] - q[axis];
        if denom == 0.0 {
            return None;
        }
        let t = (plane - q[axis]) / denom;
        if t <= 0.0 || t >= 1.0 {
            return None;
        }
        let mut r = [0.0; 3];
        for a in 0..3 {
            r[a] = q[a] + t * (target[a] - q[a]);
        }
        r[axis] = plane;
        if !room.on_wall_rect(wall, r) {
            return None;
        }
        points_rev.push(r);
        q = r;
    }
    points_rev.reverse();
    let reflection_points = points_rev;

    // Folded polyline src -> r_1 -> ... -> r_k -> dst.
    let mut vertices = Vec::with_capacity(k + 2);
    vertices.push(src);
    vertices.extend_from_slice(&reflection_points);
    vertices.push(dst);

    let mut segment_directions = Vec::with_capacity(k + 1);
    for w in vertices.windows(2) {
        let d = sub(w[1], w[0]);
        if norm(d) == 0.0 {
            return None;
        }
        segment_directions.push(normalize(d));
    }

    let mut incidence_angles = Vec::with_capacity(k);
    for (i, &wall) in wall_sequence.iter().enumerate() {
        let c = dot(segment_directions[i], wall.inward_normal()).abs();
        incidence_angles.push(c.clamp(0.0, 1.0).acos());
    }

    Some(PathGeometry {
        wall_sequence: wall_sequence.to_vec(),
        reflection_points,
        segment_directions,
        total_length,
        incidence_angles,
    })
}

/// Position and orthonormal local frame of a planar surface. The normal
/// points into the room; columns run along `u_col`, rows along `u_row`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurfacePose {
    pub position: Point3,
    pub normal: Point3,
    pub u_col: Point3,
    pub u_row: Point3,
}

impl SurfacePose {
    /// Frame of a surface mounted flush on `wall`: columns along the wall's
    /// horizontal tangent, rows along z.
    pub fn on_wall(position: Point3, wall: Wall) -> Self {
        let (u_col, u_row) = match wall {
            Wall::XMin => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            Wall::XMax => ([0.0, -1.0, 0.0], [0.0, 0.0, 1.0]),
            Wall::YMin => ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            Wall::YMax => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        };
        SurfacePose {
            position,
            normal: wall.inward_normal(),
            u_col,
            u_row,
        }
    }
}

/// Azimuth/elevation `(phi, psi)` of a path's arrival at a surface, from the
/// decomposition `u_col = sin(phi) cos(psi)`, `u_row = sin(psi)` of the final
/// segment's unit direction in the surface frame.
pub fn arrival_direction(
    path: &PathGeometry,
    pose: &SurfacePose,
) -> Result<(f64, f64), GeometryError> {
    let u = *path
        .segment_directions
        .last()
        .expect("path has at least one segment");
    direction_angles(u, pose)
}

/// Angle decomposition of an incoming unit direction `u` (`u` points toward
/// the surface, so `u . normal < 0`).
pub fn direction_angles(u: Point3, pose: &SurfacePose) -> Result<(f64, f64), GeometryError> {
    if dot(u, pose.normal) >= 0.0 {
        return Err(GeometryError::ArrivalFromBehind);
    }
    let uy = dot(u, pose.u_col);
    let uz = dot(u, pose.u_row);
    let psi = uz.clamp(-1.0, 1.0).asin();
    let cos_psi = psi.cos();
    let phi = if cos_psi > 0.0 {
        (uy / cos_psi).clamp(-1.0, 1.0).asin()
    } else {
        0.0
    };
    Ok((phi, psi))
}
