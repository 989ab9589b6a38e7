//! Non-adaptive baselines: fingerprinting and the frozen random-RIS model.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;

use crate::io::FingerprintDb;
use crate::model::{random_frozen_control, CompactChannel, ModelDims, RisControl};
use crate::propagation::{assemble_channels, watts_to_dbm, RadioConfig, RisConfig};
use crate::scene::Scene;
use crate::training::{LoadedDataset, Metrics, TrainError};

/// Fingerprint block edge; 0.1 m covers the default region with 200x200
/// blocks.
pub const FINGERPRINT_GRID_STEP: f64 = 0.1;
pub const DISSIMILARITY_CANDIDATES: usize = 1000;
const DISSIMILARITY_SAMPLE_BLOCKS: usize = 500;
/// Noise streams for fingerprint queries, disjoint from the model pipeline.
const QUERY_STREAM_BASE: u64 = (1 << 62) | (1 << 60);

/// Noiseless received power for one configuration, direct term included.
pub fn noiseless_rss_dbm(ch: &CompactChannel, theta: &[Complex64], radio: &RadioConfig) -> f64 {
    let resp = cascade_response(ch, theta);
    watts_to_dbm(radio.transmit_power * radio.pilot().norm_sqr() * resp.norm_sqr())
}

fn cascade_response(ch: &CompactChannel, theta: &[Complex64]) -> Complex64 {
    debug_assert_eq!(ch.v_r.len(), theta.len());
    ch.direct_sum
        + ch.v_r
            .iter()
            .zip(theta)
            .map(|(v, t)| v * t)
            .sum::<Complex64>()
}

pub fn random_config(rng: &mut impl Rng, elements: usize) -> RisConfig {
    let phases: Vec<f64> = (0..elements).map(|_| rng.gen_range(0.0..TAU)).collect();
    RisConfig::from_phases(&phases)
}

fn block_channels(scene: &Scene, centers: &[[f64; 3]]) -> Result<Vec<CompactChannel>, TrainError> {
    centers
        .par_iter()
        .map(|&c| Ok(CompactChannel::from(&assemble_channels(c, scene)?)))
        .collect()
}

/// Maps every grid block to its noiseless RSS vector under `configs`.
pub fn build_fingerprint_db(
    scene: &Scene,
    configs: &[RisConfig],
    grid_step: f64,
    seed: u64,
) -> Result<FingerprintDb, TrainError> {
    if configs.is_empty() {
        return Err(TrainError::Invalid("empty fingerprint config set".into()));
    }
    for c in configs {
        if c.len() != scene.ris.num_elements() {
            return Err(TrainError::Invalid(
                "config length does not match the surface".into(),
            ));
        }
    }
    let grid = scene.ue_region.grid(grid_step);
    let channels = block_channels(scene, &grid.centers)?;
    let flat: Vec<f64> = channels
        .par_iter()
        .flat_map_iter(|ch| {
            configs
                .iter()
                .map(|cfg| noiseless_rss_dbm(ch, cfg.coefficients(), &scene.radio))
        })
        .collect();
    let features = Array2::from_shape_vec((grid.centers.len(), configs.len()), flat)
        .expect("row-major feature layout");
    Ok(FingerprintDb {
        scene_hash: scene.scene_hash(),
        seed,
        grid_step,
        configs: configs.iter().map(|c| c.coefficients().to_vec()).collect(),
        block_centers: grid.centers.iter().map(|c| [c[0], c[1]]).collect(),
        features,
    })
}

/// Mean pairwise Euclidean distance between feature vectors; higher means
/// the blocks are easier to tell apart.
pub fn mean_pairwise_dissimilarity(features: &[Vec<f64>]) -> f64 {
    let n = features.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d2.sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub struct ConfigSelection {
    pub configs: Vec<RisConfig>,
    /// Dissimilarity score of every candidate set, in draw order.
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// Draws `num_candidates` random configuration sets and keeps the one whose
/// RSS features best separate a random subsample of grid blocks.
pub fn select_configs_dissimilarity(
    scene: &Scene,
    set_size: usize,
    num_candidates: usize,
    grid_step: f64,
    seed: u64,
) -> Result<ConfigSelection, TrainError> {
    if set_size == 0 || num_candidates == 0 {
        return Err(TrainError::Invalid(
            "need at least one candidate and one config per set".into(),
        ));
    }
    let grid = scene.ue_region.grid(grid_step);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let take = DISSIMILARITY_SAMPLE_BLOCKS.min(grid.centers.len());
    let sample = rand::seq::index::sample(&mut rng, grid.centers.len(), take);
    let centers: Vec<[f64; 3]> = sample.iter().map(|i| grid.centers[i]).collect();
    let channels = block_channels(scene, &centers)?;

    let m = scene.ris.num_elements();
    let candidates: Vec<Vec<RisConfig>> = (0..num_candidates)
        .map(|_| (0..set_size).map(|_| random_config(&mut rng, m)).collect())
        .collect();

    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|set| {
            let feats: Vec<Vec<f64>> = channels
                .iter()
                .map(|ch| {
                    set.iter()
                        .map(|cfg| noiseless_rss_dbm(ch, cfg.coefficients(), &scene.radio))
                        .collect()
                })
                .collect();
            mean_pairwise_dissimilarity(&feats)
        })
        .collect();

    let chosen = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
        .map(|(i, _)| i)
        .expect("at least one candidate");
    Ok(ConfigSelection {
        configs: candidates[chosen].clone(),
        scores,
        chosen,
    })
}

/// Inverse-distance-weighted average of the k nearest block centers in
/// feature space. An exact feature match short-circuits to that center.
pub fn fingerprint_localize(
    query: &[f64],
    db: &FingerprintDb,
    k: usize,
) -> Result<[f64; 2], TrainError> {
    let n = db.block_centers.len();
    if query.len() != db.features.ncols() {
        return Err(TrainError::Invalid(format!(
            "query length {} != feature length {}",
            query.len(),
            db.features.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(TrainError::Invalid(format!(
            "k={k} out of range for {n} blocks"
        )));
    }
    let mut dist: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d2: f64 = db
                .features
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2.sqrt(), i)
        })
        .collect();
    dist.select_nth_unstable_by(k - 1, |a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
    let neighbors = &dist[..k];
    if let Some(&(_, i)) = neighbors.iter().find(|(d, _)| *d == 0.0) {
        return Ok(db.block_centers[i]);
    }
    let mut acc = [0.0, 0.0];
    let mut wsum = 0.0;
    for &(d, i) in neighbors {
        let w = 1.0 / d;
        acc[0] += w * db.block_centers[i][0];
        acc[1] += w * db.block_centers[i][1];
        wsum += w;
    }
    Ok([acc[0] / wsum, acc[1] / wsum])
}

/// One noisy RSS query: each configuration's pilot observation plus
/// receiver noise, converted to dBm.
pub fn noisy_query(
    ch: &CompactChannel,
    configs: &[Vec<Complex64>],
    radio: &RadioConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let amp = radio.transmit_power.sqrt();
    let sigma = (radio.noise_power / 2.0).sqrt();
    configs
        .iter()
        .map(|cfg| {
            let y = amp * cascade_response(ch, cfg) * radio.pilot()
                + Complex64::new(
                    sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                );
            watts_to_dbm(y.norm_sqr())
        })
        .collect()
}

/// Localization error metrics of the fingerprint matcher over a test set,
/// one noisy query per record.
pub fn evaluate_fingerprint(
    scene: &Scene,
    db: &FingerprintDb,
    data: &LoadedDataset,
    k: usize,
    noise_seed: u64,
) -> Result<Metrics, TrainError> {
    if db.scene_hash != scene.scene_hash() {
        return Err(TrainError::Invalid(
            "fingerprint database was built for a different scene".into(),
        ));
    }
    let errors: Result<Vec<f64>, TrainError> = data
        .channels
        .par_iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (ch, label))| {
            let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
            rng.set_stream(QUERY_STREAM_BASE + i as u64);
            let q = noisy_query(ch, &db.configs, &scene.radio, &mut rng);
            let p = fingerprint_localize(&q, db, k)?;
            let (dx, dy) = (p[0] - label[0], p[1] - label[1]);
            Ok((dx * dx + dy * dy).sqrt())
        })
        .collect();
    Ok(Metrics::from_errors(errors?))
}

// ---------------------------------------------------------------------------
// Model-shaped baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Frozen uniformly random configurations; the recurrent estimator still
    /// trains, with its location head widened to match the adaptive model's
    /// parameter count.
    RandomRisLstm,
    /// The adaptive model restricted to one pilot per stage at the same
    /// total budget.
    SinglePilot,
}

pub struct BaselineModel {
    pub dims: ModelDims,
    pub control: RisControl,
}

/// Trainable parameter count implied by the dimensions, without
/// materializing the tensors.
pub fn param_count_for(dims: &ModelDims, learned_control: bool) -> usize {
    let h = dims.hidden;
    let mut n = dims.lstm_input() * 4 * h + 4 * h;
    if learned_control {
        for (i, o) in dims.ris_layer_dims() {
            n += i * o + o;
        }
        n += dims.theta_width();
    }
    for (i, o) in dims.loc_layer_dims() {
        n += i * o + o;
    }
    n
}

pub fn make_baseline_model(
    kind: BaselineKind,
    proposed: &ModelDims,
    seed: u64,
) -> Result<BaselineModel, TrainError> {
    match kind {
        BaselineKind::SinglePilot => {
            let mut dims = proposed.clone();
            dims.stages = proposed.stages * proposed.pilots_per_stage;
            dims.pilots_per_stage = 1;
            Ok(BaselineModel {
                dims,
                control: RisControl::Learned,
            })
        }
        BaselineKind::RandomRisLstm => {
            let target = param_count_for(proposed, true);
            let mut dims = proposed.clone();
            dims.ris_widths = Vec::new();
            if dims.loc_widths.is_empty() {
                dims.loc_widths.push(dims.hidden);
            }
            // The configuration head is gone; absorb its parameters into the
            // first location-head width, whose count is linear in the width.
            let mut best = (usize::MAX, dims.loc_widths[0]);
            for w in 1..=4 * target / dims.hidden.max(1) + dims.loc_widths[0] {
                dims.loc_widths[0] = w;
                let count = param_count_for(&dims, false);
                let gap = count.abs_diff(target);
                if gap < best.0 {
                    best = (gap, w);
                }
                if count > target {
                    break;
                }
            }
            dims.loc_widths[0] = best.1;
            let achieved = param_count_for(&dims, false);
            if achieved.abs_diff(target) * 100 > target {
                return Err(TrainError::Invalid(format!(
                    "could not match parameter count: target {target}, best {achieved}"
                )));
            }
            let control = random_frozen_control(&dims, seed);
            Ok(BaselineModel { dims, control })
        }
    }
}
