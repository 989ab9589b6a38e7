//! A complete measurement setup: room, access point, wall-mounted RIS, UE
//! region, and radio parameters, plus derived quantities cached at
//! construction (reflection sequences, the position-independent RIS-AP
//! channel).

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{
    arrival_direction, direction_angles, dist, dot, enumerate_reflection_sequences, normalize,
    sub, trace_path, MaterialProperties, PathGeometry, Point3, Room, SurfacePose, Wall, ALL_WALLS,
};
use crate::propagation::{
    dbm_to_watts, departure_angles, los_gain, path_channel, steering_vector, PathChannel,
    PropagationError, RadioConfig, RisGeometry,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Rectangular slab of candidate UE positions at a fixed height.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UeRegion {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z: f64,
}

impl UeRegion {
    /// In-plane containment; the height is scene-fixed and not checked.
    pub fn contains(&self, p: Point3) -> bool {
        p[0] >= self.x_range[0]
            && p[0] <= self.x_range[1]
            && p[1] >= self.y_range[0]
            && p[1] <= self.y_range[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_range[0] + self.x_range[1]),
            0.5 * (self.y_range[0] + self.y_range[1]),
        ]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Point3 {
        [
            rng.gen_range(self.x_range[0]..self.x_range[1]),
            rng.gen_range(self.y_range[0]..self.y_range[1]),
            self.z,
        ]
    }

    /// Square blocks of side `step` tiling the region from the low corner.
    /// Centers are listed row-major: y ascending in the outer loop, x
    /// ascending in the inner loop.
    pub fn grid(&self, step: f64) -> RegionGrid {
        assert!(step > 0.0, "grid step must be positive");
        let count = |lo: f64, hi: f64| (((hi - lo) / step) + 1e-9).floor().max(1.0) as usize;
        let nx = count(self.x_range[0], self.x_range[1]);
        let ny = count(self.y_range[0], self.y_range[1]);
        let mut centers = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            let y = self.y_range[0] + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let x = self.x_range[0] + (ix as f64 + 0.5) * step;
                centers.push([x, y, self.z]);
            }
        }
        RegionGrid {
            nx,
            ny,
            step,
            centers,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.x_range[1] > self.x_range[0]) || !(self.y_range[1] > self.y_range[0]) {
            return Err("UE region ranges must be non-degenerate".into());
        }
        Ok(())
    }
}

/// Block centers tiling a [`UeRegion`].
#[derive(Debug, Clone)]
pub struct RegionGrid {
    pub nx: usize,
    pub ny: usize,
    pub step: f64,
    pub centers: Vec<Point3>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Scene {
    pub room: Room,
    pub ap_position: Point3,
    pub ris: RisGeometry,
    pub ue_region: UeRegion,
    pub radio: RadioConfig,
    pub max_reflections: usize,
    /// Drop the UE-AP zero-bounce path.
    pub ap_los_blocked: bool,
    /// Drop the UE-RIS zero-bounce path (the default: that path is blocked).
    pub ris_los_blocked: bool,
    #[serde(skip)]
    sequences: Vec<Vec<Wall>>,
    #[serde(skip)]
    g_r: Vec<Complex64>,
}

impl Scene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        room: Room,
        ap_position: Point3,
        ris: RisGeometry,
        ue_region: UeRegion,
        radio: RadioConfig,
        max_reflections: usize,
        ap_los_blocked: bool,
        ris_los_blocked: bool,
    ) -> Result<Scene, SceneError> {
        room.validate().map_err(|e| SceneError::Invalid(e.to_string()))?;
        radio.validate().map_err(SceneError::Invalid)?;
        ris.validate().map_err(SceneError::Invalid)?;
        ue_region.validate().map_err(SceneError::Invalid)?;

        let lambda = radio.wavelength();
        if (ris.carrier_wavelength - lambda).abs() > 1e-9 * lambda {
            return Err(SceneError::Invalid(format!(
                "RIS wavelength {} disagrees with the carrier's {}",
                ris.carrier_wavelength, lambda
            )));
        }
        for (name, u) in [
            ("normal", ris.pose.normal),
            ("u_col", ris.pose.u_col),
            ("u_row", ris.pose.u_row),
        ] {
            if (dot(u, u) - 1.0).abs() > 1e-9 {
                return Err(SceneError::Invalid(format!("RIS {name} is not unit length")));
            }
        }
        if dot(ris.pose.normal, ris.pose.u_col).abs() > 1e-9
            || dot(ris.pose.normal, ris.pose.u_row).abs() > 1e-9
            || dot(ris.pose.u_col, ris.pose.u_row).abs() > 1e-9
        {
            return Err(SceneError::Invalid("RIS frame is not orthogonal".into()));
        }
        if !room.contains(ris.pose.position) {
            return Err(SceneError::Invalid("RIS position outside the room".into()));
        }
        if !room.contains(ap_position) {
            return Err(SceneError::Invalid("AP position outside the room".into()));
        }
        if dot(sub(ap_position, ris.pose.position), ris.pose.normal) <= 0.0 {
            return Err(SceneError::Invalid(
                "AP must lie strictly in front of the RIS".into(),
            ));
        }
        let in_x = ue_region.x_range[0] >= room.x_range[0] && ue_region.x_range[1] <= room.x_range[1];
        let in_y = ue_region.y_range[0] >= room.y_range[0] && ue_region.y_range[1] <= room.y_range[1];
        let in_z = ue_region.z >= room.z_range[0] && ue_region.z <= room.z_range[1];
        if !(in_x && in_y && in_z) {
            return Err(SceneError::Invalid("UE region exceeds the room".into()));
        }

        let sequences = enumerate_reflection_sequences(max_reflections, &room.reflective_walls);

        // RIS-AP line of sight: position-independent, computed once.
        let d = dist(ris.pose.position, ap_position);
        let gain = los_gain(d, &radio).map_err(|e| SceneError::Invalid(e.to_string()))?;
        let (eta, vartheta) = departure_angles(&ris.pose, ap_position)
            .map_err(|e| SceneError::Invalid(e.to_string()))?;
        let coeff = gain.coefficient();
        let g_r = steering_vector(eta, vartheta, &ris)
            .into_iter()
            .map(|an| coeff * an.conj())
            .collect();

        Ok(Scene {
            room,
            ap_position,
            ris,
            ue_region,
            radio,
            max_reflections,
            ap_los_blocked,
            ris_los_blocked,
            sequences,
            g_r,
        })
    }

    /// The benchmark setup: 24 m x 24 m x 3 m room with the RIS centered on
    /// the x=0 wall, AP near the opposite corner of the y axis, lossy walls,
    /// 15 dBm uplink at 5.8 GHz against -100 dBm noise.
    pub fn benchmark_default() -> Scene {
        let material = MaterialProperties {
            relative_permittivity: [2.5, -0.3],
            conductivity: 0.03,
        };
        let room = Room {
            x_range: [0.0, 24.0],
            y_range: [-12.0, 12.0],
            z_range: [-1.5, 1.5],
            reflective_walls: ALL_WALLS.to_vec(),
            materials: [material; 4],
        };
        let radio = RadioConfig {
            transmit_power: dbm_to_watts(15.0),
            noise_power: dbm_to_watts(-100.0),
            carrier_frequency: 5.8e9,
            pilot_symbol: [1.0, 0.0],
        };
        let lambda = radio.wavelength();
        let ris = RisGeometry {
            num_columns: 16,
            num_rows: 4,
            element_spacing: lambda / 2.0,
            carrier_wavelength: lambda,
            pose: SurfacePose::on_wall([0.0, 0.0, 0.0], Wall::XMin),
        };
        let ue_region = UeRegion {
            x_range: [4.0, 24.0],
            y_range: [-8.0, 12.0],
            z: -0.5,
        };
        Scene::new(
            room,
            [12.0, -11.5, 0.0],
            ris,
            ue_region,
            radio,
            4,
            false,
            true,
        )
        .expect("default scene is valid")
    }

    /// SHA-256 over the canonical JSON of the scene parameters.
    pub fn scene_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scene serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_digest(&hasher.finalize())
    }

    /// All wall sequences up to `max_reflections`, lexicographic.
    pub fn reflection_sequences(&self) -> &[Vec<Wall>] {
        &self.sequences
    }

    /// Position-independent RIS-AP line-of-sight channel, length M.
    pub fn ris_ap_channel(&self) -> &[Complex64] {
        &self.g_r
    }

    pub fn sample_ue(&self, rng: &mut impl Rng) -> Point3 {
        self.ue_region.sample(rng)
    }

    pub fn ue_ap_paths(&self, ue: Point3) -> Vec<PathGeometry> {
        self.sequences
            .iter()
            .filter(|s| !(self.ap_los_blocked && s.is_empty()))
            .filter_map(|s| trace_path(ue, self.ap_position, s, &self.room))
            .collect()
    }

    pub fn ue_ris_paths(&self, ue: Point3) -> Vec<PathGeometry> {
        self.sequences
            .iter()
            .filter(|s| !(self.ris_los_blocked && s.is_empty()))
            .filter_map(|s| trace_path(ue, self.ris.pose.position, s, &self.room))
            .collect()
    }

    pub fn ue_ap_path_channels(&self, ue: Point3) -> Result<Vec<PathChannel>, PropagationError> {
        self.ue_ap_paths(ue)
            .iter()
            .map(|p| path_channel(p, &self.room, &self.radio))
            .collect()
    }

    /// UE-RIS path parameters with arrival angles attached.
    pub fn ue_ris_path_channels(&self, ue: Point3) -> Result<Vec<PathChannel>, PropagationError> {
        let mut out = Vec::new();
        for path in self.ue_ris_paths(ue) {
            let mut ch = path_channel(&path, &self.room, &self.radio)?;
            ch.arrival = Some(arrival_direction(&path, &self.ris.pose)?);
            out.push(ch);
        }
        Ok(out)
    }

    /// Hypothetical unblocked single-bounce p -> RIS -> AP cascade, used to
    /// visualize what a RIS configuration illuminates. `p` must be strictly
    /// in front of the RIS.
    pub fn los_probe_cascade(&self, p: Point3) -> Result<Vec<Complex64>, PropagationError> {
        let pose = &self.ris.pose;
        let gain = los_gain(dist(p, pose.position), &self.radio)?;
        let u = normalize(sub(pose.position, p));
        let (phi, psi) = direction_angles(u, pose)?;
        let coeff = gain.coefficient();
        Ok(steering_vector(phi, psi, &self.ris)
            .into_iter()
            .zip(&self.g_r)
            .map(|(an, g)| coeff * an * g)
            .collect())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
