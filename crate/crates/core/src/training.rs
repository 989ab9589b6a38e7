//! Dataset generation, the training loop, evaluation, timing benchmarks,
//! and heatmap export.
//!
//! Determinism contract: every random draw comes from a ChaCha20 stream
//! keyed by (seed, purpose-specific stream id), so reruns are bit-identical
//! and resuming from a snapshot consumes exactly the randomness the
//! uninterrupted run would have.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::autodiff::{Adam, Tape};
use crate::io::{
    append_ndjson, write_checkpoint, AdamState, Checkpoint, CheckpointMeta, ControlKind,
    DatasetHeader, DatasetReader, DatasetRecord, DatasetWriter, IoError, FORMAT_VERSION,
};
use crate::model::{
    build_episode_graph, calibrate_pilot_scale, draw_noise, init_model, stage_payloads,
    CompactChannel, ModelDims, ModelParams, RisControl,
};
use crate::propagation::{
    channels_from_path_params, watts_to_dbm, PropagationError, RisConfig,
};
use crate::scene::{RegionGrid, Scene};

/// Noise streams: training iterations use the iteration index directly;
/// validation and test evaluation live in disjoint high ranges.
const VAL_STREAM_BASE: u64 = 1 << 62;
const EVAL_STREAM_BASE: u64 = (1 << 62) | (1 << 61);

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: u64, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Dataset generation and loading

fn record_at_index(scene: &Scene, seed: u64, index: u64) -> Result<DatasetRecord, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let ue = scene.sample_ue(&mut rng);
    Ok(DatasetRecord {
        ue,
        ap_paths: scene.ue_ap_path_channels(ue)?,
        ris_paths: scene.ue_ris_path_channels(ue)?,
    })
}

/// Streams `count` records to `path`. Record i depends only on (scene,
/// seed, i), so generation parallelizes freely and reruns are identical.
pub fn generate_dataset(
    scene: &Scene,
    count: u64,
    seed: u64,
    kind: &str,
    path: &Path,
) -> Result<(), TrainError> {
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        scene_hash: scene.scene_hash(),
        seed,
        count,
    };
    let mut writer = DatasetWriter::create(path, &header)?;
    const CHUNK: u64 = 2048;
    let mut start = 0u64;
    while start < count {
        let end = (start + CHUNK).min(count);
        let chunk: Result<Vec<DatasetRecord>, TrainError> = (start..end)
            .into_par_iter()
            .map(|i| record_at_index(scene, seed, i))
            .collect();
        for rec in chunk? {
            writer.push(&rec)?;
        }
        start = end;
    }
    writer.finish()?;
    Ok(())
}

/// A dataset expanded to the channel terms training needs.
pub struct LoadedDataset {
    pub kind: String,
    pub seed: u64,
    pub labels: Vec<[f64; 2]>,
    pub channels: Vec<CompactChannel>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

pub fn load_dataset(path: &Path, scene: &Scene) -> Result<LoadedDataset, TrainError> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header.clone();
    if header.scene_hash != scene.scene_hash() {
        return Err(TrainError::Invalid(format!(
            "dataset {} was generated for scene {}, current scene is {}",
            path.display(),
            header.scene_hash,
            scene.scene_hash()
        )));
    }
    let mut labels = Vec::with_capacity(header.count as usize);
    let mut channels = Vec::with_capacity(header.count as usize);
    for rec in reader {
        let rec = rec?;
        let ch = channels_from_path_params(&rec.ap_paths, &rec.ris_paths, scene)?;
        labels.push([rec.ue[0], rec.ue[1]]);
        channels.push(CompactChannel::from(&ch));
    }
    Ok(LoadedDataset {
        kind: header.kind,
        seed: header.seed,
        labels,
        channels,
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_every: u64,
    /// Minibatch index sampling.
    pub data_seed: u64,
    /// Pilot noise (training, validation, evaluation all derive disjoint
    /// streams from it).
    pub noise_seed: u64,
    /// Weight initialization and pilot-scale calibration.
    pub init_seed: u64,
    pub calibration_draws: usize,
    pub config_digest: String,
    pub metrics_path: Option<PathBuf>,
    pub best_checkpoint_path: Option<PathBuf>,
    /// Resumable snapshot (includes optimizer state), refreshed at every
    /// validation point.
    pub last_checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Execute at most this many optimizer steps in this invocation, then
    /// snapshot and return. `iterations` stays the schedule's total target,
    /// so a halted-and-resumed run matches an uninterrupted one bit for bit.
    pub halt_after: Option<u64>,
    pub quiet: bool,
}

impl TrainOptions {
    pub fn new(iterations: u64, batch_size: usize, learning_rate: f64) -> TrainOptions {
        TrainOptions {
            iterations,
            batch_size,
            learning_rate,
            val_every: 500,
            data_seed: 1,
            noise_seed: 2,
            init_seed: 3,
            calibration_draws: 10_000,
            config_digest: String::new(),
            metrics_path: None,
            best_checkpoint_path: None,
            last_checkpoint_path: None,
            resume: None,
            halt_after: None,
            quiet: true,
        }
    }
}

/// One validation log line. The loss is the batch-mean squared Euclidean
/// error (m²); its square root is logged alongside and must agree. No wall
/// time in here: the log must be byte-reproducible across reruns.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricPoint {
    pub iteration: u64,
    pub train_loss_m2: f64,
    pub train_rmse_m: f64,
    pub val_rmse_m: f64,
    pub learning_rate: f64,
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub last: ModelParams,
    pub control: RisControl,
    pub best_val_rmse: f64,
    pub best_iteration: u64,
    pub history: Vec<MetricPoint>,
}

fn control_kind(control: &RisControl) -> ControlKind {
    match control {
        RisControl::Learned => ControlKind::Learned,
        RisControl::Frozen(_) => ControlKind::Frozen,
    }
}

fn snapshot(
    params: &ModelParams,
    control: &RisControl,
    scene: &Scene,
    config_digest: &str,
    iteration: u64,
    adam: Option<&Adam>,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            dims: params.dims.clone(),
            pilot_scale: params.pilot_scale,
            control: control_kind(control),
            iteration,
            scene_hash: scene.scene_hash(),
            config_digest: config_digest.to_string(),
            adam_step: adam.map(|a| a.step_count()),
        },
        params: params.clone(),
        control: control.clone(),
        adam: adam.map(AdamState::capture),
    }
}

fn schedule_lr(base: f64, iteration: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let quarter = ((4 * iteration) / total).min(3);
    base * 0.5f64.powi(quarter as i32)
}

/// Forward pass over a whole dataset in chunks; returns per-sample
/// Euclidean errors in dataset order.
fn forward_errors(
    scene: &Scene,
    params: &ModelParams,
    control: &RisControl,
    data: &LoadedDataset,
    noise_seed: u64,
    stream_base: u64,
) -> Vec<f64> {
    const CHUNK: usize = 512;
    let dims = &params.dims;
    let mut errors = Vec::with_capacity(data.len());
    for (ci, chunk_start) in (0..data.len()).step_by(CHUNK).enumerate() {
        let chunk_end = (chunk_start + CHUNK).min(data.len());
        let b = chunk_end - chunk_start;
        let refs: Vec<&CompactChannel> = data.channels[chunk_start..chunk_end].iter().collect();
        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        rng.set_stream(stream_base + ci as u64);
        let noise = draw_noise(
            &mut rng,
            b,
            dims.stages,
            dims.pilots_per_stage,
            scene.radio.noise_power,
        );
        let payloads = stage_payloads(&refs, &noise, &scene.radio, params.pilot_scale);
        let mut tape = Tape::new();
        let graph = build_episode_graph(&mut tape, params, control, &payloads, None, false);
        let pred = tape.value(graph.pred);
        for (row, label) in (0..b).zip(&data.labels[chunk_start..chunk_end]) {
            let dx = pred[(row, 0)] - label[0];
            let dy = pred[(row, 1)] - label[1];
            errors.push((dx * dx + dy * dy).sqrt());
        }
    }
    errors
}

fn rmse_of(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Iteration `it`'s minibatch, drawn from its own counter-keyed stream.
fn sample_minibatch<'a>(
    data: &'a LoadedDataset,
    batch: usize,
    data_seed: u64,
    it: u64,
) -> (Vec<&'a CompactChannel>, Array2<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(data_seed);
    rng.set_stream(it);
    let indices: Vec<usize> = (0..batch)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..data.len()))
        .collect();
    let refs: Vec<&CompactChannel> = indices.iter().map(|&i| &data.channels[i]).collect();
    let labels = Array2::from_shape_fn((indices.len(), 2), |(r, c)| data.labels[indices[r]][c]);
    (refs, labels)
}

/// Minibatch Adam on the mean squared Euclidean position error.
pub fn train(
    scene: &Scene,
    dims: &ModelDims,
    control: &RisControl,
    train_data: &LoadedDataset,
    val_data: &LoadedDataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    if train_data.is_empty() {
        return Err(TrainError::Invalid("empty training dataset".into()));
    }
    if dims.elements != scene.ris.num_elements() {
        return Err(TrainError::Invalid(format!(
            "model expects {} RIS elements, scene has {}",
            dims.elements,
            scene.ris.num_elements()
        )));
    }

    let (mut params, mut adam, start_iteration) = match &opts.resume {
        Some(ckpt) => {
            if ckpt.meta.dims != *dims {
                return Err(TrainError::Invalid(
                    "resume checkpoint dims do not match the requested model".into(),
                ));
            }
            if ckpt.meta.scene_hash != scene.scene_hash() {
                return Err(TrainError::Invalid(
                    "resume checkpoint was trained on a different scene".into(),
                ));
            }
            let params = ckpt.params.clone();
            let mut adam = Adam::new(opts.learning_rate, &params.shapes());
            match (&ckpt.adam, ckpt.meta.adam_step) {
                (Some(state), Some(step)) => {
                    adam.restore(step, state.first.clone(), state.second.clone())
                }
                _ => {
                    return Err(TrainError::Invalid(
                        "resume checkpoint lacks optimizer state".into(),
                    ))
                }
            }
            (params, adam, ckpt.meta.iteration)
        }
        None => {
            let mut params = init_model(
                dims,
                scene.ue_region.center(),
                control,
                opts.init_seed,
            );
            params.pilot_scale =
                calibrate_pilot_scale(scene, opts.calibration_draws, opts.init_seed);
            let adam = Adam::new(opts.learning_rate, &params.shapes());
            (params, adam, 0)
        }
    };

    let started = Instant::now();
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_val_rmse = f64::INFINITY;
    let mut best_iteration = start_iteration;

    if start_iteration == 0 && opts.iterations > 0 {
        // Untrained baseline: forward-only loss on iteration 0's batch plus
        // a validation pass, logged before the first update.
        let (refs, labels) = sample_minibatch(train_data, opts.batch_size, opts.data_seed, 0);
        let mut noise_rng = ChaCha20Rng::seed_from_u64(opts.noise_seed);
        noise_rng.set_stream(0);
        let noise = draw_noise(
            &mut noise_rng,
            refs.len(),
            dims.stages,
            dims.pilots_per_stage,
            scene.radio.noise_power,
        );
        let payloads = stage_payloads(&refs, &noise, &scene.radio, params.pilot_scale);
        let mut tape = Tape::new();
        let graph = build_episode_graph(&mut tape, &params, control, &payloads, Some(&labels), false);
        let loss = tape.value(graph.loss.expect("labels were supplied"))[(0, 0)];
        let val_errors = forward_errors(
            scene,
            &params,
            control,
            val_data,
            opts.noise_seed,
            VAL_STREAM_BASE - 1,
        );
        let val_rmse = rmse_of(&val_errors);
        if !loss.is_finite() || !val_rmse.is_finite() {
            return Err(TrainError::Diverged { iteration: 0, loss });
        }
        let point = MetricPoint {
            iteration: 0,
            train_loss_m2: loss,
            train_rmse_m: loss.sqrt(),
            val_rmse_m: val_rmse,
            learning_rate: schedule_lr(opts.learning_rate, 0, opts.iterations),
        };
        if let Some(p) = &opts.metrics_path {
            append_ndjson(p, &point)?;
        }
        if !opts.quiet {
            eprintln!(
                "iter {:>7}  loss {:>10.4} m^2  val rmse {:>8.4} m  lr {:.2e}  [{:.1}s]",
                point.iteration,
                point.train_loss_m2,
                point.val_rmse_m,
                point.learning_rate,
                started.elapsed().as_secs_f64()
            );
        }
        history.push(point);
        best_val_rmse = val_rmse;
        if let Some(p) = &opts.best_checkpoint_path {
            write_checkpoint(
                p,
                &snapshot(&params, control, scene, &opts.config_digest, 0, None),
            )?;
        }
    }

    for it in start_iteration..opts.iterations {
        adam.learning_rate = schedule_lr(opts.learning_rate, it, opts.iterations);

        let (refs, labels) = sample_minibatch(train_data, opts.batch_size, opts.data_seed, it);
        let mut noise_rng = ChaCha20Rng::seed_from_u64(opts.noise_seed);
        noise_rng.set_stream(it);
        let noise = draw_noise(
            &mut noise_rng,
            refs.len(),
            dims.stages,
            dims.pilots_per_stage,
            scene.radio.noise_power,
        );
        let payloads = stage_payloads(&refs, &noise, &scene.radio, params.pilot_scale);

        let mut tape = Tape::new();
        let graph = build_episode_graph(&mut tape, &params, control, &payloads, Some(&labels), true);
        let loss_ref = graph.loss.expect("labels were supplied");
        let loss = tape.value(loss_ref)[(0, 0)];
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                iteration: it + 1,
                loss,
            });
        }
        let grads = tape.backward(loss_ref);
        let ordered = graph.params.gradients(&grads);
        let mut tensors = params.tensors_mut();
        let mut slots: Vec<&mut Array2<f64>> = tensors.iter_mut().map(|(_, t)| &mut **t).collect();
        adam.step(&mut slots, &ordered);
        drop(tensors);

        let done = it + 1;
        let mut wrote_last = false;
        if done % opts.val_every == 0 || done == opts.iterations {
            let val_errors = forward_errors(
                scene,
                &params,
                control,
                val_data,
                opts.noise_seed,
                VAL_STREAM_BASE + it,
            );
            let val_rmse = rmse_of(&val_errors);
            if !val_rmse.is_finite() {
                return Err(TrainError::Diverged {
                    iteration: done,
                    loss: val_rmse,
                });
            }
            let point = MetricPoint {
                iteration: done,
                train_loss_m2: loss,
                train_rmse_m: loss.sqrt(),
                val_rmse_m: val_rmse,
                learning_rate: adam.learning_rate,
            };
            if let Some(p) = &opts.metrics_path {
                append_ndjson(p, &point)?;
            }
            if !opts.quiet {
                eprintln!(
                    "iter {:>7}  loss {:>10.4} m^2  val rmse {:>8.4} m  lr {:.2e}  [{:.1}s]",
                    point.iteration,
                    point.train_loss_m2,
                    point.val_rmse_m,
                    point.learning_rate,
                    started.elapsed().as_secs_f64()
                );
            }
            history.push(point);

            if val_rmse < best_val_rmse {
                best_val_rmse = val_rmse;
                best_iteration = done;
                best = params.clone();
                if let Some(p) = &opts.best_checkpoint_path {
                    write_checkpoint(
                        p,
                        &snapshot(&best, control, scene, &opts.config_digest, done, None),
                    )?;
                }
            }
            if let Some(p) = &opts.last_checkpoint_path {
                write_checkpoint(
                    p,
                    &snapshot(&params, control, scene, &opts.config_digest, done, Some(&adam)),
                )?;
                wrote_last = true;
            }
        }

        if let Some(h) = opts.halt_after {
            if done - start_iteration >= h {
                if !wrote_last {
                    if let Some(p) = &opts.last_checkpoint_path {
                        write_checkpoint(
                            p,
                            &snapshot(&params, control, scene, &opts.config_digest, done, Some(&adam)),
                        )?;
                    }
                }
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best,
        last: params,
        control: control.clone(),
        best_val_rmse,
        best_iteration,
        history,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone)]
pub struct Metrics {
    pub count: usize,
    pub rmse: f64,
    pub median: f64,
    pub p90: f64,
    /// Sorted ascending.
    pub errors: Vec<f64>,
}

impl Metrics {
    pub fn from_errors(mut errors: Vec<f64>) -> Metrics {
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let rmse = rmse_of(&errors);
        Metrics {
            count: errors.len(),
            rmse,
            median: percentile(&errors, 0.5),
            p90: percentile(&errors, 0.9),
            errors,
        }
    }

    /// (error_m, cumulative_probability) rows for CDF export.
    pub fn cdf_rows(&self) -> Vec<Vec<f64>> {
        let n = self.errors.len() as f64;
        self.errors
            .iter()
            .enumerate()
            .map(|(i, &e)| vec![e, (i + 1) as f64 / n])
            .collect()
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Test-set metrics with fresh noise drawn from `noise_seed` (disjoint from
/// all training/validation streams).
pub fn evaluate(
    scene: &Scene,
    params: &ModelParams,
    control: &RisControl,
    data: &LoadedDataset,
    noise_seed: u64,
) -> Metrics {
    let errors = forward_errors(scene, params, control, data, noise_seed, EVAL_STREAM_BASE);
    Metrics::from_errors(errors)
}

// ---------------------------------------------------------------------------
// Timing bench

#[derive(Debug, Clone, serde::Serialize)]
pub struct TimingRow {
    pub stages: usize,
    pub pilots_per_stage: usize,
    pub serial_depth: usize,
    pub wall_ms_per_iter: f64,
}

/// Measures one forward+backward pass per (T, L) at fixed batch size and
/// reports the serial LSTM-cell depth alongside.
pub fn bench_timing(
    scene: &Scene,
    combos: &[(usize, usize)],
    hidden: usize,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<TimingRow>, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let channels: Vec<CompactChannel> = (0..batch)
        .map(|_| {
            let ue = scene.sample_ue(&mut rng);
            Ok(CompactChannel::from(&crate::propagation::assemble_channels(
                ue, scene,
            )?))
        })
        .collect::<Result<_, TrainError>>()?;
    let refs: Vec<&CompactChannel> = channels.iter().collect();
    let labels = Array2::from_shape_fn((batch, 2), |_| rand::Rng::gen_range(&mut rng, 4.0..24.0));

    let mut rows = Vec::with_capacity(combos.len());
    for &(t, l) in combos {
        let dims = ModelDims {
            elements: scene.ris.num_elements(),
            stages: t,
            pilots_per_stage: l,
            hidden,
            ris_widths: vec![hidden],
            loc_widths: vec![hidden],
        };
        let params = init_model(&dims, scene.ue_region.center(), &RisControl::Learned, seed);
        let noise = draw_noise(&mut rng, batch, t, l, scene.radio.noise_power);
        let payloads = stage_payloads(&refs, &noise, &scene.radio, 1e-6);

        // Warm-up pass (also captures the measured serial depth).
        let mut tape = Tape::new();
        let graph = build_episode_graph(
            &mut tape,
            &params,
            &RisControl::Learned,
            &payloads,
            Some(&labels),
            true,
        );
        let serial_depth = graph.serial_cell_evals;
        let _ = tape.backward(graph.loss.unwrap());

        let start = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let graph = build_episode_graph(
                &mut tape,
                &params,
                &RisControl::Learned,
                &payloads,
                Some(&labels),
                true,
            );
            let _ = tape.backward(graph.loss.unwrap());
        }
        let wall_ms_per_iter = start.elapsed().as_secs_f64() * 1e3 / reps.max(1) as f64;
        rows.push(TimingRow {
            stages: t,
            pilots_per_stage: l,
            serial_depth,
            wall_ms_per_iter,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Received-power map (dBm) of one configuration over the region grid: the
/// hypothetical unblocked single-bounce p→RIS→AP cascade probed at every
/// block center. Row-major in grid order.
pub fn heatmap_for_config(
    scene: &Scene,
    grid: &RegionGrid,
    theta: &RisConfig,
) -> Result<Vec<f64>, TrainError> {
    let coeffs = theta.coefficients();
    grid.centers
        .iter()
        .map(|&p| {
            let v = scene.los_probe_cascade(p)?;
            let resp: Complex64 = v.iter().zip(coeffs).map(|(a, b)| a * b).sum();
            Ok(watts_to_dbm(
                scene.radio.transmit_power * resp.norm_sqr(),
            ))
        })
        .collect()
}

/// Index of the strongest block in a heatmap.
pub fn argmax_block(map: &[f64]) -> usize {
    map.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite powers"))
        .map(|(i, _)| i)
        .expect("non-empty map")
}
