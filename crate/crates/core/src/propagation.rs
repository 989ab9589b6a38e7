//! Complex channel coefficients from path geometry.
//!
//! Each specular path contributes an amplitude `lambda / (4 pi d)` over its
//! unfolded length times the product of Fresnel reflection magnitudes, and a
//! phase from the electrical length plus the reflection phases. Paths that
//! terminate on the RIS additionally carry a per-element spatial phase
//! profile (the steering vector of their arrival direction). The cascade
//! `v_r = diag(h_r 1) g_r` is what the RIS phase vector inner-products
//! against in the received pilot.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dist, normalize, sub, GeometryError, PathGeometry, Point3, Room, SurfacePose};
use crate::scene::Scene;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_817e-12;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("zero-length path")]
    ZeroLengthPath,
    #[error("RIS reflection coefficient {index} has modulus {modulus}, expected 1")]
    NonUnitModulus { index: usize, modulus: f64 },
    #[error("UE position outside the configured region or room")]
    UeOutsideRegion,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Uniform rectangular RIS: `num_columns` along the surface's column axis,
/// `num_rows` along its row axis, `element_spacing` meters apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RisGeometry {
    pub num_columns: usize,
    pub num_rows: usize,
    pub element_spacing: f64,
    pub carrier_wavelength: f64,
    pub pose: SurfacePose,
}

impl RisGeometry {
    pub fn num_elements(&self) -> usize {
        self.num_columns * self.num_rows
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_columns == 0 || self.num_rows == 0 {
            return Err("RIS must have at least one row and column".into());
        }
        if !(self.element_spacing > 0.0) {
            return Err("element spacing must be positive".into());
        }
        if !(self.carrier_wavelength > 0.0) {
            return Err("carrier wavelength must be positive".into());
        }
        Ok(())
    }
}

/// Amplitude/phase of one path, plus the arrival angles at the RIS for
/// RIS-terminated paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathChannel {
    /// Dimensionless amplitude gain, >= 0.
    pub amplitude: f64,
    /// Phase in [0, 2 pi).
    pub phase: f64,
    /// (azimuth, elevation) of arrival, RIS paths only.
    pub arrival: Option<(f64, f64)>,
}

impl PathChannel {
    pub fn coefficient(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase)
    }
}

/// Transmit power, noise power (both watts) and carrier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadioConfig {
    pub transmit_power: f64,
    pub noise_power: f64,
    pub carrier_frequency: f64,
    /// Known pilot symbol, unit by default.
    pub pilot_symbol: [f64; 2],
}

impl RadioConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn pilot(&self) -> Complex64 {
        Complex64::new(self.pilot_symbol[0], self.pilot_symbol[1])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.transmit_power > 0.0) {
            return Err("transmit power must be positive".into());
        }
        if !(self.noise_power > 0.0) {
            return Err("noise power must be positive".into());
        }
        if !(self.carrier_frequency > 0.0) {
            return Err("carrier frequency must be positive".into());
        }
        Ok(())
    }
}

/// Unit-modulus RIS reflection coefficients, one per element.
#[derive(Debug, Clone, PartialEq)]
pub struct RisConfig(Vec<Complex64>);

impl RisConfig {
    pub fn from_phases(phases: &[f64]) -> Self {
        RisConfig(phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect())
    }

    /// Validates unit modulus to 1e-6.
    pub fn try_from_coefficients(coeffs: Vec<Complex64>) -> Result<Self, PropagationError> {
        for (i, c) in coeffs.iter().enumerate() {
            if (c.norm() - 1.0).abs() > 1e-6 {
                return Err(PropagationError::NonUnitModulus {
                    index: i,
                    modulus: c.norm(),
                });
            }
        }
        Ok(RisConfig(coeffs))
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// All channel terms for one UE position under quasi-static fading.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Per-path UE-AP gains, length `N_d`.
    pub h_d: Vec<Complex64>,
    /// UE-RIS channel, one column (length M) per path, `N_r` columns.
    pub h_r: Vec<Vec<Complex64>>,
    /// RIS-AP channel, length M.
    pub g_r: Vec<Complex64>,
    /// Cascaded channel `diag(h_r 1) g_r`, length M.
    pub v_r: Vec<Complex64>,
    /// `h_d^T 1`.
    pub direct_sum: Complex64,
}

impl ChannelRealization {
    pub fn num_direct_paths(&self) -> usize {
        self.h_d.len()
    }

    pub fn num_ris_paths(&self) -> usize {
        self.h_r.len()
    }
}

/// Permittivity with the conductivity loss term folded in:
/// `eps_r - j sigma / (2 pi f eps_0)`.
pub fn effective_permittivity(material: &crate::geometry::MaterialProperties, frequency: f64) -> Complex64 {
    debug_assert!(frequency > 0.0);
    let eps = Complex64::new(
        material.relative_permittivity[0],
        material.relative_permittivity[1],
    );
    eps - Complex64::new(0.0, material.conductivity / (TWO_PI * frequency * VACUUM_PERMITTIVITY))
}

/// Perpendicular-polarization Fresnel reflection coefficient at a dielectric
/// half-space, incidence measured from the wall normal.
pub fn fresnel_reflection(eps_eff: Complex64, incidence_angle: f64) -> Complex64 {
    debug_assert!((0.0..std::f64::consts::FRAC_PI_2).contains(&incidence_angle));
    let c = incidence_angle.cos();
    let s = incidence_angle.sin();
    let root = (eps_eff - s * s).sqrt();
    (c - root) / (c + root)
}

/// Amplitude and phase of one path: free-space gain over the unfolded
/// length, one Fresnel factor per bounce.
pub fn path_channel(
    path: &PathGeometry,
    room: &Room,
    radio: &RadioConfig,
) -> Result<PathChannel, PropagationError> {
    if path.total_length <= 0.0 {
        return Err(PropagationError::ZeroLengthPath);
    }
    let lambda = radio.wavelength();
    let mut amplitude = lambda / (4.0 * std::f64::consts::PI * path.total_length);
    let mut phase = -TWO_PI * path.total_length / lambda;
    for (&wall, &theta) in path.wall_sequence.iter().zip(&path.incidence_angles) {
        let eps = effective_permittivity(room.material(wall), radio.carrier_frequency);
        let gamma = fresnel_reflection(eps, theta);
        amplitude *= gamma.norm();
        phase += gamma.arg();
    }
    Ok(PathChannel {
        amplitude,
        phase: phase.rem_euclid(TWO_PI),
        arrival: None,
    })
}

/// Spatial phase profile of a plane wave from `(phi, psi)` across the RIS,
/// element n (1-based): column index `(n-1) mod N_c`, row index
/// `floor((n-1)/N_c)`.
pub fn steering_vector(phi: f64, psi: f64, ris: &RisGeometry) -> Vec<Complex64> {
    let m = ris.num_elements();
    let k = TWO_PI * ris.element_spacing / ris.carrier_wavelength;
    let horiz = phi.sin() * psi.cos();
    let vert = psi.sin();
    (0..m)
        .map(|n| {
            let v1 = (n % ris.num_columns) as f64;
            let v2 = (n / ris.num_columns) as f64;
            Complex64::from_polar(1.0, k * (v1 * horiz + v2 * vert))
        })
        .collect()
}

/// Builds every channel term of the cascaded signal model for one UE
/// position: direct paths, RIS columns with their steering profiles, the
/// single line-of-sight RIS-AP channel, and the cascade.
pub fn assemble_channels(
    ue_position: Point3,
    scene: &Scene,
) -> Result<ChannelRealization, PropagationError> {
    if !scene.ue_region.contains(ue_position) || !scene.room.contains(ue_position) {
        return Err(PropagationError::UeOutsideRegion);
    }
    let ap_paths = scene.ue_ap_path_channels(ue_position)?;
    let ris_paths = scene.ue_ris_path_channels(ue_position)?;
    channels_from_path_params(&ap_paths, &ris_paths, scene)
}

/// Reconstructs a [`ChannelRealization`] from per-path parameters (as stored
/// in datasets). The RIS-AP term is scene-determined.
pub fn channels_from_path_params(
    ap_paths: &[PathChannel],
    ris_paths: &[PathChannel],
    scene: &Scene,
) -> Result<ChannelRealization, PropagationError> {
    let h_d: Vec<Complex64> = ap_paths.iter().map(|p| p.coefficient()).collect();
    let direct_sum: Complex64 = h_d.iter().sum();

    let m = scene.ris.num_elements();
    let mut h_r = Vec::with_capacity(ris_paths.len());
    for p in ris_paths {
        let (phi, psi) = p
            .arrival
            .expect("RIS-terminated path must carry arrival angles");
        let a = steering_vector(phi, psi, &scene.ris);
        let coeff = p.coefficient();
        h_r.push(a.into_iter().map(|an| coeff * an).collect::<Vec<_>>());
    }

    let g_r = scene.ris_ap_channel().to_vec();
    debug_assert_eq!(g_r.len(), m);

    let mut v_r = vec![Complex64::new(0.0, 0.0); m];
    for (mi, v) in v_r.iter_mut().enumerate() {
        let row_sum: Complex64 = h_r.iter().map(|col| col[mi]).sum();
        *v = row_sum * g_r[mi];
    }

    Ok(ChannelRealization {
        h_d,
        h_r,
        g_r,
        v_r,
        direct_sum,
    })
}

/// One received pilot: `sqrt(P_u) (h_d^T 1 + v_r^T theta) x + n`.
pub fn receive_pilot(
    channel: &ChannelRealization,
    theta: &RisConfig,
    radio: &RadioConfig,
    noise: Complex64,
) -> Result<Complex64, PropagationError> {
    for (i, c) in theta.coefficients().iter().enumerate() {
        if (c.norm() - 1.0).abs() > 1e-6 {
            return Err(PropagationError::NonUnitModulus {
                index: i,
                modulus: c.norm(),
            });
        }
    }
    let cascade: Complex64 = channel
        .v_r
        .iter()
        .zip(theta.coefficients())
        .map(|(v, t)| v * t)
        .sum();
    Ok(radio.transmit_power.sqrt() * (channel.direct_sum + cascade) * radio.pilot() + noise)
}

/// Received power of a noiseless pilot under `theta`, in watts.
pub fn noiseless_received_power(
    channel: &ChannelRealization,
    theta: &RisConfig,
    radio: &RadioConfig,
) -> Result<f64, PropagationError> {
    let y = receive_pilot(channel, theta, radio, Complex64::new(0.0, 0.0))?;
    Ok(y.norm_sqr())
}

pub fn watts_to_dbm(power_w: f64) -> f64 {
    10.0 * (power_w.max(1e-300) * 1000.0).log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

/// Departure-angle decomposition for a ray leaving a surface toward `target`
/// (which must be strictly in front of it). Uses the same convention as
/// arrival angles by decomposing the reversed ray, so that `conj(a(eta,
/// vartheta))` is the outgoing phase profile.
pub fn departure_angles(
    pose: &SurfacePose,
    target: Point3,
) -> Result<(f64, f64), GeometryError> {
    let v = normalize(sub(target, pose.position));
    crate::geometry::direction_angles([-v[0], -v[1], -v[2]], pose)
}

/// Free-space line-of-sight gain over `d` meters.
pub fn los_gain(d: f64, radio: &RadioConfig) -> Result<PathChannel, PropagationError> {
    if d <= 0.0 {
        return Err(PropagationError::ZeroLengthPath);
    }
    let lambda = radio.wavelength();
    Ok(PathChannel {
        amplitude: lambda / (4.0 * std::f64::consts::PI * d),
        phase: (-TWO_PI * d / lambda).rem_euclid(TWO_PI),
        arrival: None,
    })
}

pub fn los_distance(a: Point3, b: Point3) -> f64 {
    dist(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{MaterialProperties, Wall};
    use crate::scene::Scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn radio() -> RadioConfig {
        RadioConfig {
            transmit_power: dbm_to_watts(15.0),
            noise_power: dbm_to_watts(-100.0),
            carrier_frequency: 5.8e9,
            pilot_symbol: [1.0, 0.0],
        }
    }

    fn concrete_material() -> MaterialProperties {
        MaterialProperties {
            relative_permittivity: [2.5, -0.3],
            conductivity: 0.03,
        }
    }

    #[test]
    fn effective_permittivity_matches_constant_arithmetic() {
        let m = concrete_material();
        let f = 5.8e9;
        // Oracle: direct arithmetic.
        let loss = 0.03 / (2.0 * std::f64::consts::PI * f * 8.854187817e-12);
        assert!((loss - 0.0929).abs() < 1e-3);
        let eps = effective_permittivity(&m, f);
        assert!((eps.re - 2.5).abs() < 1e-12);
        assert!((eps.im - (-0.3 - loss)).abs() < 1e-12);
        // Zero conductivity leaves the permittivity unchanged.
        let m0 = MaterialProperties {
            conductivity: 0.0,
            ..m
        };
        assert_eq!(
            effective_permittivity(&m0, f),
            Complex64::new(2.5, -0.3)
        );
        // Doubling the frequency halves the loss term.
        let eps2 = effective_permittivity(&m, 2.0 * f);
        assert!(((eps.im + 0.3) - 2.0 * (eps2.im + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn fresnel_limits_and_normal_incidence() {
        let eps = effective_permittivity(&concrete_material(), 5.8e9);
        // Grazing limit.
        let g = fresnel_reflection(eps, std::f64::consts::FRAC_PI_2 - 1e-9);
        assert!((g - Complex64::new(-1.0, 0.0)).norm() < 1e-6);
        // Conductor limit.
        let c = fresnel_reflection(Complex64::new(1e14, -1e14), 0.7);
        assert!((c - Complex64::new(-1.0, 0.0)).norm() < 1e-6);
        // Normal incidence against the closed form (1 - sqrt(eps)) / (1 + sqrt(eps)).
        let g0 = fresnel_reflection(eps, 0.0);
        let oracle = (Complex64::new(1.0, 0.0) - eps.sqrt()) / (Complex64::new(1.0, 0.0) + eps.sqrt());
        assert!((g0 - oracle).norm() < 1e-14);
        assert!((g0.norm() - 0.23).abs() < 0.01);
        assert!(g0.arg().abs() > 2.9); // near pi
    }

    #[test]
    fn fresnel_passivity_over_random_draws() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let eps = Complex64::new(rng.gen_range(1.0..20.0), -rng.gen_range(0.0..10.0));
            let theta = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2 - 1e-9);
            let g = fresnel_reflection(eps, theta);
            assert!(g.norm() <= 1.0 + 1e-12, "|Gamma| = {} > 1", g.norm());
        }
    }

    #[test]
    fn path_channel_free_space_and_bounce() {
        let room = crate::testkit::default_test_room();
        let r = radio();
        let lambda = r.wavelength();
        // One wavelength of free space: A = 1/(4 pi), phase 0.
        let p = crate::geometry::PathGeometry {
            wall_sequence: vec![],
            reflection_points: vec![],
            segment_directions: vec![[1.0, 0.0, 0.0]],
            total_length: lambda,
            incidence_angles: vec![],
        };
        let ch = path_channel(&p, &room, &r).unwrap();
        assert!((ch.amplitude - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!(ch.phase.min(TWO_PI - ch.phase) < 1e-9);

        // Adding one normal-incidence bounce at the same length multiplies
        // the amplitude by |Gamma| < 1.
        let pb = crate::geometry::PathGeometry {
            wall_sequence: vec![Wall::XMax],
            reflection_points: vec![[24.0, 0.0, 0.0]],
            segment_directions: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            total_length: lambda,
            incidence_angles: vec![0.0],
        };
        let chb = path_channel(&pb, &room, &r).unwrap();
        let eps = effective_permittivity(room.material(Wall::XMax), r.carrier_frequency);
        let gamma = fresnel_reflection(eps, 0.0);
        assert!(gamma.norm() < 1.0);
        assert!((chb.amplitude - ch.amplitude * gamma.norm()).abs() < 1e-15);

        // The traced one-bounce 32 m path: composed closed forms.
        let traced = crate::geometry::trace_path(
            [4.0, 0.0, -0.5],
            [12.0, 0.0, -0.5],
            &[Wall::XMax],
            &room,
        )
        .unwrap();
        let cht = path_channel(&traced, &room, &r).unwrap();
        let expect = gamma.norm() * lambda / (4.0 * std::f64::consts::PI * 32.0);
        assert!((cht.amplitude - expect).abs() < 1e-12 * expect.max(1.0));

        // Zero-length path errors.
        let z = crate::geometry::PathGeometry {
            total_length: 0.0,
            ..p.clone()
        };
        assert!(matches!(
            path_channel(&z, &room, &r),
            Err(PropagationError::ZeroLengthPath)
        ));
    }

    fn test_ris() -> RisGeometry {
        let lambda = radio().wavelength();
        RisGeometry {
            num_columns: 16,
            num_rows: 4,
            element_spacing: lambda / 2.0,
            carrier_wavelength: lambda,
            pose: SurfacePose::on_wall([0.0, 0.0, 0.0], Wall::XMin),
        }
    }

    #[test]
    fn steering_vector_reference_cases() {
        let ris = test_ris();
        let a = steering_vector(0.0, 0.0, &ris);
        assert_eq!(a.len(), 64);
        for an in &a {
            assert!((an - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        // Element 1 is the phase reference for any angles.
        let b = steering_vector(0.7, -0.3, &ris);
        assert!((b[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        // Half-wavelength endfire: element n=2 is exp(j pi) = -1.
        let e = steering_vector(std::f64::consts::FRAC_PI_2, 0.0, &ris);
        assert!((e[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn steering_vector_unit_modulus_property() {
        let ris = test_ris();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..200 {
            let phi = rng.gen_range(-1.5..1.5);
            let psi = rng.gen_range(-1.5..1.5);
            for an in steering_vector(phi, psi, &ris) {
                assert!((an.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn synthetic_channel(m: usize, seed: u64) -> ChannelRealization {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rand_c = |scale: f64| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale
        };
        let h_d: Vec<Complex64> = (0..3).map(|_| rand_c(1e-4)).collect();
        let col: Vec<Complex64> = (0..m).map(|_| rand_c(1e-5)).collect();
        let g_r: Vec<Complex64> = (0..m).map(|_| rand_c(1e-4)).collect();
        let v_r: Vec<Complex64> = col.iter().zip(&g_r).map(|(h, g)| h * g).collect();
        ChannelRealization {
            direct_sum: h_d.iter().sum(),
            h_d,
            h_r: vec![col],
            g_r,
            v_r,
        }
    }

    #[test]
    fn receive_pilot_reference_and_oracle() {
        let r = radio();
        let m = 16;
        let mut ch = synthetic_channel(m, 3);

        // Degenerate cascade: v_r = 0 reduces to the direct term.
        ch.v_r = vec![Complex64::new(0.0, 0.0); m];
        let theta = RisConfig::from_phases(&vec![0.0; m]);
        let y = receive_pilot(&ch, &theta, &r, Complex64::new(0.0, 0.0)).unwrap();
        let expect = r.transmit_power.sqrt() * ch.direct_sum;
        assert!((y - expect).norm() < 1e-18);

        // Random theta, noiseless: term-by-term recomputation.
        let ch = synthetic_channel(m, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let phases: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..TWO_PI)).collect();
        let theta = RisConfig::from_phases(&phases);
        let y = receive_pilot(&ch, &theta, &r, Complex64::new(1e-9, -2e-9)).unwrap();
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, t) in theta.coefficients().iter().enumerate() {
            acc += ch.v_r[i] * t;
        }
        let oracle =
            r.transmit_power.sqrt() * (ch.direct_sum + acc) * Complex64::new(1.0, 0.0)
                + Complex64::new(1e-9, -2e-9);
        assert!((y - oracle).norm() <= 1e-12 * oracle.norm());

        // Non-unit modulus is rejected.
        let bad = RisConfig(vec![Complex64::new(0.5, 0.0); m]);
        assert!(receive_pilot(&ch, &bad, &r, Complex64::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn coherent_combining_bound() {
        let r = radio();
        let ch = synthetic_channel(32, 9);
        let budget: f64 = ch.v_r.iter().map(|v| v.norm()).sum();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let phases: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..TWO_PI)).collect();
            let theta = RisConfig::from_phases(&phases);
            let cascade: Complex64 = ch
                .v_r
                .iter()
                .zip(theta.coefficients())
                .map(|(v, t)| v * t)
                .sum();
            assert!(cascade.norm() <= budget * (1.0 + 1e-12));
        }
        // Phase-conjugate alignment achieves the bound.
        let aligned: Vec<f64> = ch.v_r.iter().map(|v| -v.arg()).collect();
        let theta = RisConfig::from_phases(&aligned);
        let cascade: Complex64 = ch
            .v_r
            .iter()
            .zip(theta.coefficients())
            .map(|(v, t)| v * t)
            .sum();
        assert!((cascade.norm() - budget).abs() < 1e-9 * budget);

        // Energy sanity under any theta.
        let y = receive_pilot(&ch, &theta, &r, Complex64::new(0.0, 0.0)).unwrap();
        let cap = r.transmit_power * (ch.direct_sum.norm() + budget).powi(2);
        assert!(y.norm_sqr() <= cap * (1.0 + 1e-12));
    }

    #[test]
    fn assemble_matches_term_by_term_recomputation() {
        let scene = Scene::benchmark_default();
        let ue = [12.0, 0.0, -0.5];
        let ch = assemble_channels(ue, &scene).unwrap();

        assert!(ch.num_direct_paths() > 0);
        assert!(ch.num_ris_paths() > 0);
        // LoS to the RIS is blocked by default: shortest RIS path reflects.
        let straight = los_distance(ue, scene.ris.pose.position);
        let ris_path_params = scene.ue_ris_path_channels(ue).unwrap();
        let lambda = scene.radio.wavelength();
        for p in &ris_path_params {
            // amplitude < free-space at the straight-line distance
            assert!(p.amplitude < lambda / (4.0 * std::f64::consts::PI * straight));
        }

        // Term-by-term: v_r[m] = (sum_i h_r[m][i]) * g_r[m], direct_sum = sum h_d.
        let sum_d: Complex64 = ch.h_d.iter().sum();
        assert!((sum_d - ch.direct_sum).norm() <= 1e-15);
        for mi in 0..scene.ris.num_elements() {
            let mut row = Complex64::new(0.0, 0.0);
            for col in &ch.h_r {
                row += col[mi];
            }
            let expect = row * ch.g_r[mi];
            let denom = expect.norm().max(1e-300);
            assert!((expect - ch.v_r[mi]).norm() / denom < 1e-12);
        }

        // Independent column reconstruction via the steering closed form.
        assert_eq!(ris_path_params.len(), ch.h_r.len());
        let k = TWO_PI * scene.ris.element_spacing / scene.ris.carrier_wavelength;
        for (p, col) in ris_path_params.iter().zip(&ch.h_r) {
            let (phi, psi) = p.arrival.unwrap();
            for (n, c) in col.iter().enumerate() {
                let v1 = (n % scene.ris.num_columns) as f64;
                let v2 = (n / scene.ris.num_columns) as f64;
                let phase = p.phase + k * (v1 * phi.sin() * psi.cos() + v2 * psi.sin());
                let oracle = Complex64::from_polar(p.amplitude, phase);
                assert!((oracle - c).norm() <= 1e-12 * p.amplitude);
            }
        }

        // Determinism: identical inputs give bit-identical outputs.
        let ch2 = assemble_channels(ue, &scene).unwrap();
        assert_eq!(ch.direct_sum, ch2.direct_sum);
        assert_eq!(ch.v_r, ch2.v_r);
    }
}
