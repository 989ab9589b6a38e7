//! Run configuration: a single strict-schema JSON file covering scene,
//! radio, pilots, model sizes, and training hyperparameters. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::geometry::{MaterialProperties, Room, SurfacePose, Wall, ALL_WALLS};
use crate::propagation::{dbm_to_watts, RadioConfig, RisGeometry};
use crate::scene::{hex_digest, Scene, SceneError, UeRegion};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub pilots: PilotSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub seeds: SeedSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub room: RoomSection,
    pub ap_position: [f64; 3],
    pub ris: RisSection,
    pub ue_region: UeRegion,
    pub radio: RadioSection,
    pub max_reflections: usize,
    pub ap_los_blocked: bool,
    pub ris_los_blocked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSection {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub reflective_walls: Vec<Wall>,
    pub materials: MaterialSection,
}

/// One material per wall.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub x_min: MaterialProperties,
    pub x_max: MaterialProperties,
    pub y_min: MaterialProperties,
    pub y_max: MaterialProperties,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisSection {
    pub num_columns: usize,
    pub num_rows: usize,
    /// Element spacing in meters; omit for half-wavelength.
    #[serde(default)]
    pub element_spacing: Option<f64>,
    pub position: [f64; 3],
    /// Which wall the surface is mounted on (sets its local frame).
    pub wall: Wall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    pub transmit_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub carrier_frequency_hz: f64,
    #[serde(default = "default_pilot_symbol")]
    pub pilot_symbol: [f64; 2],
}

fn default_pilot_symbol() -> [f64; 2] {
    [1.0, 0.0]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSection {
    /// Number of sensing stages T.
    pub stages: usize,
    /// Pilots per stage L.
    pub per_stage: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub ris_head_widths: Vec<usize>,
    pub loc_head_widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub data: u64,
    pub noise: u64,
    pub init: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The reference benchmark setup (default room, radio, and model sizes).
    pub fn benchmark_default() -> RunConfig {
        let scene = Scene::benchmark_default();
        let material = MaterialProperties {
            relative_permittivity: [2.5, -0.3],
            conductivity: 0.03,
        };
        RunConfig {
            scene: SceneSection {
                room: RoomSection {
                    x_range: scene.room.x_range,
                    y_range: scene.room.y_range,
                    z_range: scene.room.z_range,
                    reflective_walls: ALL_WALLS.to_vec(),
                    materials: MaterialSection {
                        x_min: material,
                        x_max: material,
                        y_min: material,
                        y_max: material,
                    },
                },
                ap_position: scene.ap_position,
                ris: RisSection {
                    num_columns: 16,
                    num_rows: 4,
                    element_spacing: None,
                    position: [0.0, 0.0, 0.0],
                    wall: Wall::XMin,
                },
                ue_region: scene.ue_region,
                radio: RadioSection {
                    transmit_power_dbm: 15.0,
                    noise_power_dbm: -100.0,
                    carrier_frequency_hz: 5.8e9,
                    pilot_symbol: [1.0, 0.0],
                },
                max_reflections: 4,
                ap_los_blocked: false,
                ris_los_blocked: true,
            },
            pilots: PilotSection {
                stages: 3,
                per_stage: 6,
            },
            model: ModelSection {
                hidden_size: 256,
                ris_head_widths: vec![512],
                loc_head_widths: vec![512],
            },
            train: TrainSection {
                batch_size: 1024,
                iterations: 20_000,
                learning_rate: 1e-3,
            },
            seeds: SeedSection {
                data: 1,
                noise: 2,
                init: 3,
            },
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        // JSON happily yields infinities ("1e999") and absurd magnitudes;
        // reject them up front so nothing downstream sizes an allocation
        // from a bogus number.
        let s = &self.scene;
        let mut floats: Vec<f64> = Vec::new();
        floats.extend(s.room.x_range);
        floats.extend(s.room.y_range);
        floats.extend(s.room.z_range);
        floats.extend(s.ap_position);
        floats.extend(s.ris.position);
        floats.extend(s.ris.element_spacing);
        floats.extend(s.ue_region.x_range);
        floats.extend(s.ue_region.y_range);
        floats.push(s.ue_region.z);
        floats.extend([
            s.radio.transmit_power_dbm,
            s.radio.noise_power_dbm,
            s.radio.carrier_frequency_hz,
        ]);
        floats.extend(s.radio.pilot_symbol);
        for m in [
            &s.room.materials.x_min,
            &s.room.materials.x_max,
            &s.room.materials.y_min,
            &s.room.materials.y_max,
        ] {
            floats.extend(m.relative_permittivity);
            floats.push(m.conductivity);
        }
        floats.push(self.train.learning_rate);
        if floats.iter().any(|v| !v.is_finite()) {
            return bad("all numeric config values must be finite".into());
        }
        for (name, r) in [
            ("room.x_range", s.room.x_range),
            ("room.y_range", s.room.y_range),
            ("room.z_range", s.room.z_range),
        ] {
            if !(r[1] - r[0] <= 1000.0) {
                return bad(format!("{name} spans more than 1000 m"));
            }
        }
        if s.ris.num_columns == 0 || s.ris.num_rows == 0 {
            return bad("scene.ris must have at least one element".into());
        }
        if s.ris.num_columns.saturating_mul(s.ris.num_rows) > 16_384 {
            return bad("scene.ris exceeds 16384 elements".into());
        }
        if self.pilots.stages.saturating_mul(self.pilots.per_stage) > 10_000 {
            return bad("pilot budget stages*per_stage exceeds 10000".into());
        }
        let widths_ok = |ws: &[usize]| ws.len() <= 16 && ws.iter().all(|&w| w <= 16_384);
        if self.model.hidden_size > 16_384
            || !widths_ok(&self.model.ris_head_widths)
            || !widths_ok(&self.model.loc_head_widths)
        {
            return bad("model sizes capped at 16384 units / 16 layers".into());
        }
        if self.train.batch_size > 1 << 20 {
            return bad("train.batch_size exceeds 2^20".into());
        }
        if self.train.iterations > 1_000_000_000 {
            return bad("train.iterations exceeds 1e9".into());
        }
        if self.pilots.stages == 0 || self.pilots.per_stage == 0 {
            return bad("pilots.stages and pilots.per_stage must be >= 1".into());
        }
        if self.model.hidden_size == 0 {
            return bad("model.hidden_size must be >= 1".into());
        }
        if self.model.ris_head_widths.iter().any(|&w| w == 0)
            || self.model.loc_head_widths.iter().any(|&w| w == 0)
        {
            return bad("model head widths must be >= 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive".into());
        }
        if self.scene.max_reflections > 8 {
            return bad(format!(
                "scene.max_reflections = {} enumerates too many sequences (max 8)",
                self.scene.max_reflections
            ));
        }
        if let Some(s) = self.scene.ris.element_spacing {
            if !(s > 0.0) {
                return bad("scene.ris.element_spacing must be positive".into());
            }
        }
        // Scene-level consistency (region inside room, AP in front of the
        // RIS, material ranges, ...) comes from the scene constructor.
        self.scene()?;
        Ok(())
    }

    /// Builds the validated physical scene.
    pub fn scene(&self) -> Result<Scene, ConfigError> {
        let s = &self.scene;
        let room = Room {
            x_range: s.room.x_range,
            y_range: s.room.y_range,
            z_range: s.room.z_range,
            reflective_walls: s.room.reflective_walls.clone(),
            materials: [
                s.room.materials.x_min,
                s.room.materials.x_max,
                s.room.materials.y_min,
                s.room.materials.y_max,
            ],
        };
        let radio = RadioConfig {
            transmit_power: dbm_to_watts(s.radio.transmit_power_dbm),
            noise_power: dbm_to_watts(s.radio.noise_power_dbm),
            carrier_frequency: s.radio.carrier_frequency_hz,
            pilot_symbol: s.radio.pilot_symbol,
        };
        let lambda = radio.wavelength();
        let plane = room_wall_plane(&room, s.ris.wall);
        if (s.ris.position[s.ris.wall.axis()] - plane).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "RIS position {:?} is not on the {:?} wall plane ({plane})",
                s.ris.position, s.ris.wall
            )));
        }
        let ris = RisGeometry {
            num_columns: s.ris.num_columns,
            num_rows: s.ris.num_rows,
            element_spacing: s.ris.element_spacing.unwrap_or(lambda / 2.0),
            carrier_wavelength: lambda,
            pose: SurfacePose::on_wall(s.ris.position, s.ris.wall),
        };
        Ok(Scene::new(
            room,
            s.ap_position,
            ris,
            s.ue_region,
            radio,
            s.max_reflections,
            s.ap_los_blocked,
            s.ris_los_blocked,
        )?)
    }

    /// SHA-256 over the canonical (parsed, re-serialized) JSON; independent
    /// of input formatting.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_digest(&h.finalize())
    }

    pub fn transmit_power_dbm(&self) -> f64 {
        self.scene.radio.transmit_power_dbm
    }
}

fn room_wall_plane(room: &Room, wall: Wall) -> f64 {
    match wall {
        Wall::XMin => room.x_range[0],
        Wall::XMax => room.x_range[1],
        Wall::YMin => room.y_range[0],
        Wall::YMax => room.y_range[1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::watts_to_dbm;

    #[test]
    fn default_round_trips_and_builds_scene() {
        let cfg = RunConfig::benchmark_default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back.digest(), cfg.digest());
        let scene = back.scene().unwrap();
        assert_eq!(scene.ris.num_elements(), 64);
        assert!((scene.ris.element_spacing - scene.radio.wavelength() / 2.0).abs() < 1e-15);
        assert_eq!(scene.scene_hash(), cfg.scene().unwrap().scene_hash());
    }

    #[test]
    fn absurd_magnitudes_are_rejected() {
        // "1e999" deserializes to +inf.
        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.radio.carrier_frequency_hz = f64::INFINITY;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.ris.num_columns = 1 << 40;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.room.x_range = [0.0, 1e6];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.model.loc_head_widths = vec![1 << 30];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.train.learning_rate = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_ignores_formatting_but_not_values() {
        let cfg = RunConfig::benchmark_default();
        let pretty = serde_json::to_string_pretty(&cfg).unwrap();
        let compact = serde_json::to_string(&cfg).unwrap();
        let a = RunConfig::from_json(&pretty).unwrap().digest();
        let b = RunConfig::from_json(&compact).unwrap().digest();
        assert_eq!(a, b);

        let mut other = RunConfig::benchmark_default();
        other.pilots.stages = 6;
        other.pilots.per_stage = 3;
        assert_ne!(other.digest(), a);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        let cfg = RunConfig::benchmark_default();
        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v["surprise"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v["scene"]["room"]["color"] = "blue".into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v["train"]["optimizer"] = "sgd".into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn cross_field_violations_rejected() {
        let mut cfg = RunConfig::benchmark_default();
        cfg.pilots.stages = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.ue_region.x_range = [4.0, 30.0];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.ris.position = [1.0, 0.0, 0.0]; // off the x_min plane
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.scene.max_reflections = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::benchmark_default();
        cfg.train.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn power_conversions() {
        assert!((dbm_to_watts(15.0) - 0.0316227766).abs() < 1e-9);
        assert!((dbm_to_watts(-100.0) - 1e-13).abs() < 1e-25);
        assert!((watts_to_dbm(1e-3) - 0.0).abs() < 1e-12);
        for dbm in [-120.0, -30.0, 0.0, 15.0, 40.0] {
            assert!((watts_to_dbm(dbm_to_watts(dbm)) - dbm).abs() < 1e-9);
        }
    }

    #[test]
    fn load_reads_files_and_reports_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&RunConfig::benchmark_default()).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.pilots.stages, 3);
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.json")),
            Err(ConfigError::Io { .. })
        ));
    }
}
