//! Omni-supervised annotation generation: detector/tracker cross-checking
//! with a reliability gate, the ensemble training loss, and the retraining
//! loops for both models.
//!
//! Per frame pair the detector proposes shapes for both frames, the tracker
//! tracks forward from the previous detection, and both proposals are tracked
//! backward. Their normalized discrepancies against the previous detection
//! gate whether the frame yields a new annotation and for whom: reliable
//! frames where tracking disagrees more feed the tracker pool with the
//! detector's shape, otherwise the detector pool receives the tracker's.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{mix_seed, LoadedSequence};
use crate::error::{Error, Result};
use crate::eval::normalized_rmse;
use crate::image::GrayImage;
use crate::nn::{
    backward_and_step, init_stack_params, run_stack, stack_param_shapes, LayerSpec, ParamStore,
    Tape, TensorF,
};
use crate::shape::{ComponentPartition, LandmarkShape};
use crate::spatial::ShapeInput;
use crate::tracker::{Direction, TrackerModel, Tracking};

/// Position of a frame inside a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub sequence: usize,
    pub frame: usize,
}

/// A per-frame landmark detector.
pub trait Detector: Sync {
    fn name(&self) -> &str;
    fn trainable(&self) -> bool;
    fn landmark_count(&self) -> usize;
    /// Detect on one frame. Must be deterministic per `(frame, at)`.
    fn detect(&self, frame: &GrayImage, at: FrameRef) -> Result<LandmarkShape>;
    /// Supervised retraining on `(frame, shape)` pairs.
    fn retrain(
        &mut self,
        data: &[(&GrayImage, &LandmarkShape)],
        cfg: &DetectorTrainConfig,
    ) -> Result<()> {
        let _ = (data, cfg);
        Err(Error::Capability(format!(
            "detector {:?} is not trainable",
            self.name()
        )))
    }
}

/// Ground-truth accessor with per-coordinate Gaussian noise. Detections are
/// deterministic in `(seed, sequence, frame)` regardless of call order.
pub struct OracleDetector {
    gt: Vec<Vec<LandmarkShape>>,
    sigma: f64,
    seed: u64,
    landmarks: usize,
}

impl OracleDetector {
    pub fn new(gt: Vec<Vec<LandmarkShape>>, sigma: f64, seed: u64) -> Result<Self> {
        let landmarks = gt
            .first()
            .and_then(|s| s.first())
            .map(LandmarkShape::landmark_count)
            .ok_or_else(|| Error::Input("oracle needs at least one ground-truth shape".into()))?;
        if sigma < 0.0 {
            return Err(Error::Config("oracle noise sigma must be non-negative".into()));
        }
        Ok(OracleDetector {
            gt,
            sigma,
            seed,
            landmarks,
        })
    }

    /// Build from a corpus whose every frame is annotated.
    pub fn from_corpus(corpus: &[LoadedSequence], sigma: f64, seed: u64) -> Result<Self> {
        let gt = corpus
            .iter()
            .map(|seq| {
                seq.annotations
                    .iter()
                    .enumerate()
                    .map(|(t, a)| {
                        a.clone().ok_or_else(|| {
                            Error::Input(format!(
                                "oracle detector needs ground truth, sequence {:?} frame {t} is unlabeled",
                                seq.id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        OracleDetector::new(gt, sigma, seed)
    }
}

const ORACLE_STREAM: u64 = 0x0DE7;

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn trainable(&self) -> bool {
        false
    }

    fn landmark_count(&self) -> usize {
        self.landmarks
    }

    fn detect(&self, _frame: &GrayImage, at: FrameRef) -> Result<LandmarkShape> {
        let shape = self
            .gt
            .get(at.sequence)
            .and_then(|s| s.get(at.frame))
            .ok_or_else(|| {
                Error::Input(format!(
                    "oracle has no ground truth for sequence {} frame {}",
                    at.sequence, at.frame
                ))
            })?;
        if self.sigma == 0.0 {
            return Ok(shape.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.seed ^ ORACLE_STREAM,
            at.sequence as u64,
            at.frame as u64,
        ));
        let normal = Normal::new(0.0, self.sigma)
            .map_err(|e| Error::Config(format!("oracle noise: {e}")))?;
        let coords = shape
            .coords()
            .iter()
            .map(|c| c + normal.sample(&mut rng))
            .collect();
        LandmarkShape::new(coords)
    }
}

/// Dense regression detector: downscaled frame pixels to `2L` coordinates.
#[derive(Debug, Clone)]
pub struct SimpleRegressorDetector {
    landmarks: usize,
    input_side: usize,
    params: ParamStore,
    specs: Vec<LayerSpec>,
}

const DETECTOR_PREFIX: &str = "detector.net";

impl SimpleRegressorDetector {
    pub fn new(
        landmarks: usize,
        input_side: usize,
        hidden: usize,
        frame_size: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if input_side < 4 || hidden == 0 || landmarks < 3 {
            return Err(Error::Config(
                "regressor needs input_side >= 4, hidden > 0, landmarks >= 3".into(),
            ));
        }
        let specs = vec![
            LayerSpec::Dense {
                input: input_side * input_side,
                output: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: hidden,
                output: 2 * landmarks,
            },
        ];
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_stack_params(&mut params, &specs, DETECTOR_PREFIX, true, &mut rng)?;
        // Zero-initialized output layer plus a frame-center bias: the fresh
        // detector predicts the frame center for every landmark.
        let (w, h) = frame_size;
        let bias_name = format!("{DETECTOR_PREFIX}.2.b");
        let center: Vec<f64> = (0..2 * landmarks)
            .map(|i| {
                if i % 2 == 0 {
                    w as f64 / 2.0
                } else {
                    h as f64 / 2.0
                }
            })
            .collect();
        *params.value_mut(&bias_name)? = TensorF::vector(center);
        Ok(SimpleRegressorDetector {
            landmarks,
            input_side,
            params,
            specs,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Rebuild from loaded checkpoint parameters, validating names and shapes.
    pub fn from_params(
        landmarks: usize,
        input_side: usize,
        hidden: usize,
        loaded: &std::collections::BTreeMap<String, TensorF>,
    ) -> Result<Self> {
        let mut detector =
            SimpleRegressorDetector::new(landmarks, input_side, hidden, (1, 1), 0)?;
        let expected = stack_param_shapes(&detector.specs, DETECTOR_PREFIX);
        if loaded.len() != expected.len() {
            return Err(Error::Input(format!(
                "detector checkpoint has {} parameters, expected {}",
                loaded.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let tensor = loaded
                .get(name)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing {name:?}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("checkpoint parameter {name:?}"),
                    tensor.shape(),
                    shape,
                ));
            }
            *detector.params.value_mut(name)? = tensor.clone();
        }
        Ok(detector)
    }

    /// Box-average the frame down to the network's input resolution.
    fn downscale(&self, frame: &GrayImage) -> Vec<f64> {
        let s = self.input_side;
        let mut out = vec![0.0; s * s];
        let (w, h) = (frame.width(), frame.height());
        for oy in 0..s {
            for ox in 0..s {
                let x0 = ox * w / s;
                let x1 = (((ox + 1) * w).div_ceil(s)).min(w).max(x0 + 1);
                let y0 = oy * h / s;
                let y1 = (((oy + 1) * h).div_ceil(s)).min(h).max(y0 + 1);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += frame.get(x, y);
                    }
                }
                out[oy * s + ox] = acc / ((x1 - x0) * (y1 - y0)) as f64;
            }
        }
        out
    }
}

impl Detector for SimpleRegressorDetector {
    fn name(&self) -> &str {
        "regressor"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn landmark_count(&self) -> usize {
        self.landmarks
    }

    fn detect(&self, frame: &GrayImage, _at: FrameRef) -> Result<LandmarkShape> {
        let mut tape = Tape::new();
        let input = tape.input(TensorF::vector(self.downscale(frame)));
        let out = run_stack(&mut tape, &self.params, &self.specs, DETECTOR_PREFIX, input)?;
        LandmarkShape::new(tape.value(out).values().to_vec())
    }

    fn retrain(
        &mut self,
        data: &[(&GrayImage, &LandmarkShape)],
        cfg: &DetectorTrainConfig,
    ) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let (frame, target) = data[i];
                if target.landmark_count() != self.landmarks {
                    return Err(Error::Protocol(format!(
                        "training label has {} landmarks, detector expects {}",
                        target.landmark_count(),
                        self.landmarks
                    )));
                }
                let mut tape = Tape::new();
                let input = tape.input(TensorF::vector(self.downscale(frame)));
                let out = run_stack(&mut tape, &self.params, &self.specs, DETECTOR_PREFIX, input)?;
                let t = tape.input(TensorF::vector(target.coords().to_vec()));
                let loss = tape.mse(out, t)?;
                backward_and_step(&tape, loss, &mut self.params, cfg.lr)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gate and distilled sets
// ---------------------------------------------------------------------------

/// Which annotation pool an accepted frame feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    /// `D_det`: the detector's retraining pool (receives the tracked shape).
    DetectorPool,
    /// `D_tck`: the tracker's retraining pool (receives the detected shape).
    TrackerPool,
}

/// Where an accepted annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Detected,
    Tracked,
}

/// The reliability gate: both losses must fall below the threshold; the
/// noisier proposal teaches the other model. Ties route to the detector pool.
pub fn gate_decision(l_det: f64, l_tck: f64, threshold: f64) -> Option<Destination> {
    if l_det < threshold && l_tck < threshold {
        if l_tck > l_det {
            Some(Destination::TrackerPool)
        } else {
            Some(Destination::DetectorPool)
        }
    } else {
        None
    }
}

/// One accepted annotation.
#[derive(Debug, Clone)]
pub struct DistilledEntry {
    pub frame: FrameRef,
    pub annotation: LandmarkShape,
    pub destination: Destination,
    pub provenance: Provenance,
    /// Normalized RMSE of the backward-tracked detection vs the anchor.
    pub l_det: f64,
    /// Normalized RMSE of the backward-tracked tracking vs the anchor.
    pub l_tck: f64,
    pub round: usize,
    /// The previous-frame detection that seeded this frame's losses.
    pub anchor: LandmarkShape,
}

/// The annotation pools generated by one distillation pass.
#[derive(Debug, Clone, Default)]
pub struct DistilledSets {
    pub entries: Vec<DistilledEntry>,
}

impl DistilledSets {
    pub fn detector_pool(&self) -> impl Iterator<Item = &DistilledEntry> {
        self.entries
            .iter()
            .filter(|e| e.destination == Destination::DetectorPool)
    }

    pub fn tracker_pool(&self) -> impl Iterator<Item = &DistilledEntry> {
        self.entries
            .iter()
            .filter(|e| e.destination == Destination::TrackerPool)
    }

    pub fn accepted(&self) -> usize {
        self.entries.len()
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What seeds the forward track inside the distillation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedMode {
    /// The previous frame's detection (the pseudocode's choice).
    #[default]
    Detection,
    /// The previous frame's tracked output (tracking-by-previous-result).
    Tracked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Include the cycle-consistency term.
    pub use_cycle: bool,
    /// Include the detection-anchored backward term on every frame.
    pub use_anchor: bool,
}

impl Default for TrackerTrainConfig {
    fn default() -> Self {
        TrackerTrainConfig {
            lr: 2e-4,
            epochs: 6,
            seed: 0,
            use_cycle: true,
            use_anchor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            lr: 1e-6,
            epochs: 20,
            seed: 0,
        }
    }
}

/// Configuration of the full distillation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Ensemble weight of the detector-agreement terms.
    pub lambda: f64,
    /// Reliability gate threshold on the normalized RMSE.
    pub threshold: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Trailing sequences held out of training for per-round metrics.
    pub holdout: usize,
    pub seed_mode: SeedMode,
    pub tracker: TrackerTrainConfig,
    pub detector: DetectorTrainConfig,
    /// Sequence-level parallelism of the distillation pass.
    pub jobs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.4,
            threshold: 0.02,
            rounds: 2,
            seed: 0,
            holdout: 0,
            seed_mode: SeedMode::Detection,
            tracker: TrackerTrainConfig::default(),
            detector: DetectorTrainConfig::default(),
            jobs: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.threshold <= 0.0 {
            return Err(Error::Config("threshold must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("at least one round is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// The ensemble objective: `sum(tck) + lambda * sum(det)`.
pub fn ensemble_loss(tck_losses: &[f64], det_losses: &[f64], lambda: f64) -> Result<f64> {
    if tck_losses.len() != det_losses.len() {
        return Err(Error::shape(
            "ensemble loss",
            &[tck_losses.len()],
            &[det_losses.len()],
        ));
    }
    Ok(tck_losses.iter().sum::<f64>() + lambda * det_losses.iter().sum::<f64>())
}

// ---------------------------------------------------------------------------
// Distillation pass
// ---------------------------------------------------------------------------

/// Everything computed for one frame pair.
#[derive(Debug, Clone)]
pub struct FrameDistillation {
    pub detection_prev: LandmarkShape,
    pub detection_cur: LandmarkShape,
    pub tracked_cur: LandmarkShape,
    pub l_det: f64,
    pub l_tck: f64,
    pub accepted: Option<Destination>,
}

/// Run the per-frame cross-check: detect both frames, track forward from the
/// seed, re-track both proposals backward, score both against the previous
/// detection and apply the gate. `forward_seed` defaults to the previous
/// detection.
#[allow(clippy::too_many_arguments)]
pub fn distill_frame(
    prev_frame: &GrayImage,
    cur_frame: &GrayImage,
    at: FrameRef,
    detector: &dyn Detector,
    tracker: &dyn Tracking,
    partition: &ComponentPartition,
    threshold: f64,
    forward_seed: Option<&LandmarkShape>,
) -> Result<FrameDistillation> {
    if at.frame == 0 {
        return Err(Error::Usage("distill_frame needs a previous frame".into()));
    }
    let prev_ref = FrameRef {
        sequence: at.sequence,
        frame: at.frame - 1,
    };
    let detection_prev = detector.detect(prev_frame, prev_ref)?;
    let detection_cur = detector.detect(cur_frame, at)?;
    for d in [&detection_prev, &detection_cur] {
        if d.landmark_count() != partition.landmark_count() {
            return Err(Error::Protocol(format!(
                "detector produced {} landmarks, partition expects {}",
                d.landmark_count(),
                partition.landmark_count()
            )));
        }
    }
    let seed = forward_seed.unwrap_or(&detection_prev);
    let tracked_cur = tracker.track(cur_frame, seed, Direction::Forward)?;
    let returned_det = tracker.track(prev_frame, &detection_cur, Direction::Backward)?;
    let returned_tck = tracker.track(prev_frame, &tracked_cur, Direction::Backward)?;
    let l_det = normalized_rmse(&returned_det, &detection_prev, partition)?;
    let l_tck = normalized_rmse(&returned_tck, &detection_prev, partition)?;
    Ok(FrameDistillation {
        detection_prev,
        detection_cur,
        tracked_cur,
        l_det,
        l_tck,
        accepted: gate_decision(l_det, l_tck, threshold),
    })
}

/// Distill one sequence: apply [`distill_frame`] over `t = 1..T`. Returns the
/// accepted entries plus the per-frame detections (the anchors reused by
/// tracker training).
pub fn distill_video(
    seq: &LoadedSequence,
    seq_index: usize,
    detector: &dyn Detector,
    tracker: &dyn Tracking,
    partition: &ComponentPartition,
    cfg: &DistillConfig,
    round: usize,
) -> Result<(Vec<DistilledEntry>, Vec<LandmarkShape>)> {
    if seq.len() < 2 {
        return Err(Error::Input(format!(
            "sequence {:?} has {} frames, distillation needs at least 2",
            seq.id,
            seq.len()
        )));
    }
    let mut entries = Vec::new();
    let mut detections = Vec::with_capacity(seq.len());
    detections.push(detector.detect(&seq.frames[0], FrameRef { sequence: seq_index, frame: 0 })?);
    let mut last_tracked: Option<LandmarkShape> = None;
    for t in 1..seq.len() {
        let at = FrameRef {
            sequence: seq_index,
            frame: t,
        };
        let seed = match cfg.seed_mode {
            SeedMode::Detection => None,
            SeedMode::Tracked => last_tracked.clone(),
        };
        let frame = distill_frame(
            &seq.frames[t - 1],
            &seq.frames[t],
            at,
            detector,
            tracker,
            partition,
            cfg.threshold,
            seed.as_ref(),
        )?;
        if let Some(destination) = frame.accepted {
            let (annotation, provenance) = match destination {
                Destination::TrackerPool => (frame.detection_cur.clone(), Provenance::Detected),
                Destination::DetectorPool => (frame.tracked_cur.clone(), Provenance::Tracked),
            };
            entries.push(DistilledEntry {
                frame: at,
                annotation,
                destination,
                provenance,
                l_det: frame.l_det,
                l_tck: frame.l_tck,
                round,
                anchor: frame.detection_prev.clone(),
            });
        }
        last_tracked = Some(frame.tracked_cur);
        detections.push(frame.detection_cur);
    }
    Ok((entries, detections))
}

// ---------------------------------------------------------------------------
// Tracker training
// ---------------------------------------------------------------------------

/// Summary of one tracker training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

struct TrainItem {
    seq: usize,
    t: usize,
}

/// Build one frame's training loss on a tape and return
/// `(loss_var, cycle_value, det_value)`.
#[allow(clippy::too_many_arguments)]
fn frame_loss(
    tape: &mut Tape,
    model: &TrackerModel,
    store: &ParamStore,
    seq: &LoadedSequence,
    t: usize,
    anchors: &[LandmarkShape],
    annotation: Option<&LandmarkShape>,
    lambda: f64,
    cfg: &TrackerTrainConfig,
) -> Result<(crate::nn::Var, f64, f64)> {
    let anchor = &anchors[t - 1];
    let det_cur = &anchors[t];
    let anchor_node = tape.input(TensorF::vector(anchor.coords().to_vec()));

    let mut terms: Vec<crate::nn::Var> = Vec::new();
    let mut cycle_value = 0.0;
    let mut det_value = 0.0;

    let forward = model.build_track(tape, store, &seq.frames[t], ShapeInput::Node(anchor_node))?;

    if cfg.use_cycle {
        let back = model.build_track(tape, store, &seq.frames[t - 1], ShapeInput::Node(forward))?;
        let cycle = tape.mse(back, anchor_node)?;
        cycle_value = tape.value(cycle).item()?;
        terms.push(cycle);
    }

    let mut det_terms: Vec<crate::nn::Var> = Vec::new();
    if cfg.use_anchor {
        let back_det =
            model.build_track(tape, store, &seq.frames[t - 1], ShapeInput::Fixed(det_cur))?;
        det_terms.push(tape.mse(back_det, anchor_node)?);
    }
    if let Some(ann) = annotation {
        let ann_node = tape.input(TensorF::vector(ann.coords().to_vec()));
        det_terms.push(tape.mse(forward, ann_node)?);
    }
    if !det_terms.is_empty() {
        let mut det_sum = det_terms[0];
        for &extra in &det_terms[1..] {
            det_sum = tape.add(det_sum, extra)?;
        }
        det_value = tape.value(det_sum).item()?;
        terms.push(tape.scale(det_sum, lambda));
    }

    let mut loss = *terms.first().ok_or_else(|| {
        Error::Usage("tracker training with every loss term disabled".into())
    })?;
    for &extra in &terms[1..] {
        loss = tape.add(loss, extra)?;
    }
    Ok((loss, cycle_value, det_value))
}

/// Minimize the ensemble objective over the tracker parameters: per eligible
/// frame, the cycle-consistency loss seeded by the previous detection, the
/// backward-tracked detection-agreement term weighted by `lambda`, and a
/// supervised term toward the tracker pool's annotation where one exists.
/// One SGD step per frame, in seeded shuffled order.
pub fn train_tracker(
    model: &mut TrackerModel,
    tracker_pool: &[&DistilledEntry],
    videos: &[&LoadedSequence],
    anchors: &[Vec<LandmarkShape>],
    lambda: f64,
    cfg: &TrackerTrainConfig,
) -> Result<TrainStats> {
    if videos.len() != anchors.len() {
        return Err(Error::shape(
            "train_tracker anchors",
            &[videos.len()],
            &[anchors.len()],
        ));
    }
    if !cfg.use_cycle && !cfg.use_anchor && tracker_pool.is_empty() {
        return Err(Error::Usage(
            "tracker training needs the cycle term, the anchor term or a non-empty pool".into(),
        ));
    }
    let annotations: HashMap<(usize, usize), &LandmarkShape> = tracker_pool
        .iter()
        .map(|e| ((e.frame.sequence, e.frame.frame), &e.annotation))
        .collect();

    let mut items = Vec::new();
    for (s, seq) in videos.iter().enumerate() {
        if anchors[s].len() != seq.len() {
            return Err(Error::shape(
                "anchor table",
                &[anchors[s].len()],
                &[seq.len()],
            ));
        }
        for t in 1..seq.len() {
            items.push(TrainItem { seq: s, t });
        }
    }
    if items.is_empty() {
        return Err(Error::Input("no eligible training frames".into()));
    }

    let eval_total = |model: &TrackerModel| -> Result<f64> {
        let mut tck = Vec::with_capacity(items.len());
        let mut det = Vec::with_capacity(items.len());
        for item in &items {
            let mut tape = Tape::new();
            let (_, cycle_value, det_value) = frame_loss(
                &mut tape,
                model,
                model.params(),
                videos[item.seq],
                item.t,
                &anchors[item.seq],
                annotations.get(&(item.seq, item.t)).copied(),
                lambda,
                cfg,
            )?;
            tck.push(cycle_value);
            det.push(det_value);
        }
        ensemble_loss(&tck, &det, lambda)
    };

    let initial_loss = eval_total(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let item = &items[i];
            let mut tape = Tape::new();
            let (loss, _, _) = frame_loss(
                &mut tape,
                model,
                model.params(),
                videos[item.seq],
                item.t,
                &anchors[item.seq],
                annotations.get(&(item.seq, item.t)).copied(),
                lambda,
                cfg,
            )?;
            backward_and_step(&tape, loss, model.params_mut(), cfg.lr)?;
            steps += 1;
        }
    }
    let final_loss = eval_total(model)?;
    Ok(TrainStats {
        initial_loss,
        final_loss,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Detector retraining
// ---------------------------------------------------------------------------

/// Seeded selection of labeled frames for semi-supervised runs: shuffle all
/// annotated `(sequence, frame)` pairs and keep the first
/// `ceil(fraction * n)`, returned in sorted order.
pub fn labeled_subset(corpus: &[LoadedSequence], fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            seq.annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.is_some())
                .map(move |(t, _)| (s, t))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1AB, 0));
    all.shuffle(&mut rng);
    let keep = ((fraction * all.len() as f64).ceil() as usize).min(all.len());
    all.truncate(keep);
    all.sort_unstable();
    all
}

/// Supervised retraining on the union of the distilled detector pool and the
/// original labeled set. Rejected by non-trainable detectors.
pub fn retrain_detector(
    detector: &mut dyn Detector,
    detector_pool: &[(&GrayImage, &LandmarkShape)],
    labeled: &[(&GrayImage, &LandmarkShape)],
    cfg: &DetectorTrainConfig,
) -> Result<()> {
    if !detector.trainable() {
        return Err(Error::Capability(format!(
            "detector {:?} is not trainable",
            detector.name()
        )));
    }
    let mut union: Vec<(&GrayImage, &LandmarkShape)> =
        Vec::with_capacity(detector_pool.len() + labeled.len());
    union.extend_from_slice(detector_pool);
    union.extend_from_slice(labeled);
    detector.retrain(&union, cfg)
}

// ---------------------------------------------------------------------------
// Full rounds
// ---------------------------------------------------------------------------

/// Per-round bookkeeping.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub eligible: usize,
    pub accepted_detector_pool: usize,
    pub accepted_tracker_pool: usize,
    pub train_initial_loss: f64,
    pub train_final_loss: f64,
    /// Mean normalized RMSE of per-frame detections on the holdout split.
    pub holdout_detector_nrmse: Option<f64>,
    /// Mean normalized RMSE of tracked sequences on the holdout split.
    pub holdout_tracker_nrmse: Option<f64>,
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<DistilledSets>,
    pub metrics: Vec<RoundMetrics>,
}

/// Mean per-frame detection error over a split (the detector baseline).
pub fn detector_baseline_nrmse(
    corpus: &[LoadedSequence],
    first_index: usize,
    detector: &dyn Detector,
    partition: &ComponentPartition,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (offset, seq) in corpus.iter().enumerate() {
        for (t, annotation) in seq.annotations.iter().enumerate() {
            let gt = annotation.as_ref().ok_or_else(|| {
                Error::Input(format!("sequence {:?} frame {t} lacks ground truth", seq.id))
            })?;
            let det = detector.detect(
                &seq.frames[t],
                FrameRef {
                    sequence: first_index + offset,
                    frame: t,
                },
            )?;
            total += normalized_rmse(&det, gt, partition)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("empty evaluation split".into()));
    }
    Ok(total / count as f64)
}

/// Mean tracked-sequence error over a split, each sequence seeded by the
/// detector on its first frame.
pub fn tracker_holdout_nrmse(
    corpus: &[LoadedSequence],
    first_index: usize,
    detector: &dyn Detector,
    tracker: &TrackerModel,
    partition: &ComponentPartition,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (offset, seq) in corpus.iter().enumerate() {
        let init = detector.detect(
            &seq.frames[0],
            FrameRef {
                sequence: first_index + offset,
                frame: 0,
            },
        )?;
        let steps = tracker.track_sequence(&seq.frames, &init, Direction::Forward)?;
        for step in &steps {
            let gt = seq.annotations[step.frame_index].as_ref().ok_or_else(|| {
                Error::Input(format!(
                    "sequence {:?} frame {} lacks ground truth",
                    seq.id, step.frame_index
                ))
            })?;
            total += normalized_rmse(&step.predicted, gt, partition)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("empty evaluation split".into()));
    }
    Ok(total / count as f64)
}

fn distill_split(
    train: &[LoadedSequence],
    detector: &dyn Detector,
    tracker: &TrackerModel,
    cfg: &DistillConfig,
    round: usize,
) -> Result<(DistilledSets, Vec<Vec<LandmarkShape>>)> {
    let partition = tracker.partition();
    let per_seq: Vec<Result<(Vec<DistilledEntry>, Vec<LandmarkShape>)>> = if cfg.jobs <= 1 {
        train
            .iter()
            .enumerate()
            .map(|(s, seq)| distill_video(seq, s, detector, tracker, partition, cfg, round))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = train
                .iter()
                .enumerate()
                .map(|(s, seq)| {
                    scope.spawn(move || {
                        distill_video(seq, s, detector, tracker, partition, cfg, round)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("distill worker")).collect()
        })
    };
    let mut sets = DistilledSets::default();
    let mut anchors = Vec::with_capacity(train.len());
    for result in per_seq {
        let (entries, detections) = result?;
        sets.entries.extend(entries);
        anchors.push(detections);
    }
    Ok((sets, anchors))
}

/// Alternate distillation, detector retraining and tracker training for the
/// configured number of rounds. The trailing `holdout` sequences are never
/// trained on; they provide per-round metrics. `labeled` lists
/// `(sequence, frame)` pairs whose ground truth the detector may train on.
pub fn run_rounds(
    corpus: &[LoadedSequence],
    labeled: &[(usize, usize)],
    detector: &mut dyn Detector,
    tracker: &mut TrackerModel,
    cfg: &DistillConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.holdout >= corpus.len() {
        return Err(Error::Config(format!(
            "holdout {} swallows the whole corpus of {}",
            cfg.holdout,
            corpus.len()
        )));
    }
    let split = corpus.len() - cfg.holdout;
    let (train, holdout) = corpus.split_at(split);
    let partition = tracker.partition().clone();

    let mut history = Vec::with_capacity(cfg.rounds);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let (sets, anchors) = distill_split(train, detector, tracker, cfg, round)?;

        if detector.trainable() {
            let pool: Vec<(&GrayImage, &LandmarkShape)> = sets
                .detector_pool()
                .map(|e| {
                    (
                        &train[e.frame.sequence].frames[e.frame.frame],
                        &e.annotation,
                    )
                })
                .collect();
            let labeled_items: Vec<(&GrayImage, &LandmarkShape)> = labeled
                .iter()
                .map(|&(s, t)| {
                    let seq = corpus.get(s).ok_or_else(|| {
                        Error::Input(format!("labeled reference to unknown sequence {s}"))
                    })?;
                    let gt = seq
                        .annotations
                        .get(t)
                        .and_then(Option::as_ref)
                        .ok_or_else(|| {
                            Error::Input(format!("labeled frame ({s},{t}) lacks ground truth"))
                        })?;
                    Ok((&seq.frames[t], gt))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut det_cfg = cfg.detector.clone();
            det_cfg.seed = mix_seed(cfg.detector.seed, 0xD3, round as u64);
            retrain_detector(detector, &pool, &labeled_items, &det_cfg)?;
        }

        let pool: Vec<&DistilledEntry> = sets.tracker_pool().collect();
        let videos: Vec<&LoadedSequence> = train.iter().collect();
        let mut tck_cfg = cfg.tracker.clone();
        tck_cfg.seed = mix_seed(cfg.tracker.seed, 0x7C6, round as u64);
        let stats = train_tracker(tracker, &pool, &videos, &anchors, cfg.lambda, &tck_cfg)?;

        let (holdout_detector_nrmse, holdout_tracker_nrmse) = if holdout.is_empty() {
            (None, None)
        } else {
            (
                Some(detector_baseline_nrmse(holdout, split, detector, &partition)?),
                Some(tracker_holdout_nrmse(holdout, split, detector, tracker, &partition)?),
            )
        };

        metrics.push(RoundMetrics {
            round,
            eligible: train.iter().map(|s| s.len() - 1).sum(),
            accepted_detector_pool: sets.detector_pool().count(),
            accepted_tracker_pool: sets.tracker_pool().count(),
            train_initial_loss: stats.initial_loss,
            train_final_loss: stats.final_loss,
            holdout_detector_nrmse,
            holdout_tracker_nrmse,
        });
        history.push(sets);
    }
    Ok(RunOutcome { history, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_sequence, SyntheticConfig};
    use crate::spatial::SpatialConfig;
    use crate::tracker::{HeadKind, PredictionMode, TrackerConfig, TrackerInit};
    use rand::Rng;

    fn tiny_tracker(landmarks: usize, seed: u64, init: TrackerInit) -> TrackerModel {
        TrackerModel::new(
            TrackerConfig {
                spatial: SpatialConfig {
                    patch_size: 5,
                    appearance_dim: 6,
                    geometry_dim: 4,
                    log_eps: 1e-3,
                },
                head: HeadKind::Dense { hidden: 16 },
                mode: PredictionMode::Offset,
            },
            ComponentPartition::synthetic(landmarks).unwrap(),
            seed,
            init,
        )
        .unwrap()
    }

    fn synth_corpus(seqs: usize, frames: usize, noise: f64, seed: u64) -> Vec<LoadedSequence> {
        let cfg = SyntheticConfig {
            landmarks: 8,
            width: 32,
            height: 32,
            frames,
            pixel_noise: noise,
            seed,
            ..SyntheticConfig::default()
        };
        (0..seqs)
            .map(|s| {
                let (frames, shapes) = generate_sequence(&cfg, s).unwrap();
                LoadedSequence {
                    id: format!("seq{s:03}"),
                    frames,
                    annotations: shapes.into_iter().map(Some).collect(),
                }
            })
            .collect()
    }

    fn static_corpus(seqs: usize, frames: usize, seed: u64) -> Vec<LoadedSequence> {
        let cfg = SyntheticConfig {
            landmarks: 8,
            width: 32,
            height: 32,
            frames,
            rot_amplitude: 0.0,
            scale_step: 0.0,
            translation_step: 0.0,
            pixel_noise: 0.0,
            seed,
            ..SyntheticConfig::default()
        };
        (0..seqs)
            .map(|s| {
                let (frames, shapes) = generate_sequence(&cfg, s).unwrap();
                LoadedSequence {
                    id: format!("seq{s:03}"),
                    frames,
                    annotations: shapes.into_iter().map(Some).collect(),
                }
            })
            .collect()
    }

    struct FnTracker<F>(F);

    impl<F> Tracking for FnTracker<F>
    where
        F: Fn(&GrayImage, &LandmarkShape, Direction) -> Result<LandmarkShape> + Sync,
    {
        fn track(
            &self,
            frame: &GrayImage,
            init: &LandmarkShape,
            direction: Direction,
        ) -> Result<LandmarkShape> {
            (self.0)(frame, init, direction)
        }
    }

    #[test]
    fn ensemble_loss_examples() {
        assert!((ensemble_loss(&[1.0, 2.0], &[3.0, 4.0], 0.4).unwrap() - 5.8).abs() < 1e-12);
        assert_eq!(ensemble_loss(&[1.0, 2.0], &[9.0, 9.0], 0.0).unwrap(), 3.0);
        assert!(ensemble_loss(&[1.0], &[1.0, 2.0], 0.4).is_err());
    }

    #[test]
    fn ensemble_loss_matches_hand_sum_and_is_affine_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tck: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        let det: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        let hand = tck.iter().sum::<f64>() + 0.4 * det.iter().sum::<f64>();
        assert!((ensemble_loss(&tck, &det, 0.4).unwrap() - hand).abs() < 1e-12);

        let base = ensemble_loss(&tck, &det, 0.0).unwrap();
        let at1 = ensemble_loss(&tck, &det, 1.0).unwrap();
        let at2 = ensemble_loss(&tck, &det, 2.0).unwrap();
        assert!((at2 - base - 2.0 * (at1 - base)).abs() < 1e-9);
    }

    #[test]
    fn gate_branch_examples() {
        assert_eq!(
            gate_decision(0.010, 0.015, 0.02),
            Some(Destination::TrackerPool)
        );
        assert_eq!(
            gate_decision(0.015, 0.010, 0.02),
            Some(Destination::DetectorPool)
        );
        assert_eq!(gate_decision(0.030, 0.010, 0.02), None);
        assert_eq!(gate_decision(0.010, 0.030, 0.02), None);
        // Ties route to the detector pool (strict inequality).
        assert_eq!(
            gate_decision(0.010, 0.010, 0.02),
            Some(Destination::DetectorPool)
        );
    }

    /// Stub-driven distill_frame with controlled losses: nrmse equals the
    /// injected offset divided by the anchor's inter-pupil distance.
    fn run_stub_frame(l_det: f64, l_tck: f64, threshold: f64) -> FrameDistillation {
        let partition = ComponentPartition::synthetic(8).unwrap();
        let anchor = LandmarkShape::from_points(&[
            (4.0, 10.0),
            (6.0, 8.0),
            (8.0, 10.0),
            (16.0, 10.0),
            (18.0, 8.0),
            (20.0, 10.0),
            (12.0, 14.0),
            (12.0, 18.0),
        ])
        .unwrap();
        let ((rx, ry), (lx, ly)) = partition.eye_centroids(&anchor).unwrap();
        let ipd = ((rx - lx).powi(2) + (ry - ly).powi(2)).sqrt();
        let detection_cur = anchor.translated(0.0, 1.0);
        let tracked_cur = anchor.translated(0.0, 2.0);

        struct StubDetector {
            prev: LandmarkShape,
            cur: LandmarkShape,
        }
        impl Detector for StubDetector {
            fn name(&self) -> &str {
                "stub"
            }
            fn trainable(&self) -> bool {
                false
            }
            fn landmark_count(&self) -> usize {
                self.prev.landmark_count()
            }
            fn detect(&self, _frame: &GrayImage, at: FrameRef) -> Result<LandmarkShape> {
                Ok(if at.frame == 0 {
                    self.prev.clone()
                } else {
                    self.cur.clone()
                })
            }
        }

        let detector = StubDetector {
            prev: anchor.clone(),
            cur: detection_cur.clone(),
        };
        let fwd_out = tracked_cur.clone();
        let ret_det = anchor.translated(l_det * ipd, 0.0);
        let ret_tck = anchor.translated(l_tck * ipd, 0.0);
        let det_cur = detection_cur.clone();
        let tracker = FnTracker(move |_f: &GrayImage, init: &LandmarkShape, dir: Direction| {
            Ok(match dir {
                Direction::Forward => fwd_out.clone(),
                Direction::Backward => {
                    if init.coords() == det_cur.coords() {
                        ret_det.clone()
                    } else {
                        ret_tck.clone()
                    }
                }
            })
        });

        let frame = GrayImage::new(24, 24).unwrap();
        distill_frame(
            &frame,
            &frame,
            FrameRef { sequence: 0, frame: 1 },
            &detector,
            &tracker,
            &partition,
            threshold,
            None,
        )
        .unwrap()
    }

    #[test]
    fn distill_frame_examples_via_stubs() {
        let a = run_stub_frame(0.010, 0.015, 0.02);
        assert!((a.l_det - 0.010).abs() < 1e-9 && (a.l_tck - 0.015).abs() < 1e-9);
        assert_eq!(a.accepted, Some(Destination::TrackerPool));

        let b = run_stub_frame(0.015, 0.010, 0.02);
        assert_eq!(b.accepted, Some(Destination::DetectorPool));

        let c = run_stub_frame(0.030, 0.010, 0.02);
        assert_eq!(c.accepted, None);
    }

    #[test]
    fn stub_destinations_match_independent_branch_table() {
        // Independent re-implementation of the branch table, written as a
        // direct transliteration of the acceptance conditions.
        fn branch_table(l_det: f64, l_tck: f64, t: f64) -> Option<Destination> {
            match (l_det < t, l_tck < t) {
                (true, true) if l_tck > l_det => Some(Destination::TrackerPool),
                (true, true) => Some(Destination::DetectorPool),
                _ => None,
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let l_det = rng.gen_range(0.0..0.04);
            let l_tck = rng.gen_range(0.0..0.04);
            let t = rng.gen_range(0.005..0.035);
            let got = run_stub_frame(l_det, l_tck, t);
            assert_eq!(got.accepted, branch_table(got.l_det, got.l_tck, t));
        }
    }

    #[test]
    fn static_video_perfect_oracle_zero_tracker_accepts_everything() {
        let corpus = static_corpus(1, 6, 3);
        let detector = OracleDetector::from_corpus(&corpus, 0.0, 1).unwrap();
        let tracker = tiny_tracker(8, 2, TrackerInit::Identity);
        let cfg = DistillConfig::default();
        let (entries, detections) = distill_video(
            &corpus[0],
            0,
            &detector,
            &tracker,
            tracker.partition(),
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(entries.len(), 5);
        assert_eq!(detections.len(), 6);
        for e in &entries {
            assert_eq!(e.l_det, 0.0);
            assert_eq!(e.l_tck, 0.0);
            // Ties route to the detector pool with the tracked annotation.
            assert_eq!(e.destination, Destination::DetectorPool);
            assert_eq!(e.provenance, Provenance::Tracked);
        }
    }

    #[test]
    fn huge_detector_noise_closes_the_gate() {
        let corpus = static_corpus(1, 5, 4);
        let detector = OracleDetector::from_corpus(&corpus, 8.0, 1).unwrap();
        let tracker = tiny_tracker(8, 2, TrackerInit::Identity);
        let cfg = DistillConfig::default();
        let (entries, _) = distill_video(
            &corpus[0],
            0,
            &detector,
            &tracker,
            tracker.partition(),
            &cfg,
            1,
        )
        .unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn distill_video_rejects_single_frame() {
        let corpus = static_corpus(1, 1, 5);
        let detector = OracleDetector::from_corpus(&corpus, 0.0, 1).unwrap();
        let tracker = tiny_tracker(8, 2, TrackerInit::Identity);
        assert!(distill_video(
            &corpus[0],
            0,
            &detector,
            &tracker,
            tracker.partition(),
            &DistillConfig::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn distillation_is_deterministic() {
        let corpus = synth_corpus(2, 5, 0.01, 6);
        let detector = OracleDetector::from_corpus(&corpus, 0.3, 9).unwrap();
        let tracker = tiny_tracker(8, 3, TrackerInit::Identity);
        let cfg = DistillConfig {
            threshold: 0.1,
            ..DistillConfig::default()
        };
        let run = || {
            corpus
                .iter()
                .enumerate()
                .flat_map(|(s, seq)| {
                    distill_video(seq, s, &detector, &tracker, tracker.partition(), &cfg, 1)
                        .unwrap()
                        .0
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.annotation.coords(), y.annotation.coords());
            assert_eq!(x.l_det, y.l_det);
            assert_eq!(x.l_tck, y.l_tck);
            assert_eq!(x.destination, y.destination);
        }
    }

    #[test]
    fn gate_soundness_and_branch_recheck_from_recorded_losses() {
        let corpus = synth_corpus(3, 6, 0.01, 7);
        let detector = OracleDetector::from_corpus(&corpus, 0.2, 11).unwrap();
        let tracker = tiny_tracker(8, 4, TrackerInit::Identity);
        let cfg = DistillConfig {
            threshold: 0.08,
            ..DistillConfig::default()
        };
        let mut total = 0;
        for (s, seq) in corpus.iter().enumerate() {
            let (entries, _) =
                distill_video(seq, s, &detector, &tracker, tracker.partition(), &cfg, 1).unwrap();
            for e in &entries {
                assert!(e.l_det.max(e.l_tck) < cfg.threshold);
                let expected = if e.l_tck > e.l_det {
                    Destination::TrackerPool
                } else {
                    Destination::DetectorPool
                };
                assert_eq!(e.destination, expected);
                let expected_prov = match e.destination {
                    Destination::TrackerPool => Provenance::Detected,
                    Destination::DetectorPool => Provenance::Tracked,
                };
                assert_eq!(e.provenance, expected_prov);
            }
            total += entries.len();
        }
        assert!(total > 0, "gate never opened; test setup is degenerate");
    }

    #[test]
    fn perfect_detector_tracker_pool_annotations_are_ground_truth() {
        let corpus = static_corpus(1, 5, 8);
        let detector = OracleDetector::from_corpus(&corpus, 0.0, 1).unwrap();
        // A stub tracker whose forward pass drifts slightly makes
        // l_tck > l_det = 0, routing annotations (the detections = exact
        // ground truth) to the tracker pool.
        let tracker = FnTracker(|_f: &GrayImage, init: &LandmarkShape, dir: Direction| {
            Ok(match dir {
                Direction::Forward => init.translated(0.1, 0.0),
                Direction::Backward => init.clone(),
            })
        });
        let partition = ComponentPartition::synthetic(8).unwrap();
        let cfg = DistillConfig::default();
        let (entries, _) =
            distill_video(&corpus[0], 0, &detector, &tracker, &partition, &cfg, 1).unwrap();
        assert!(!entries.is_empty());
        let gt = corpus[0].annotations[1].as_ref().unwrap();
        for e in &entries {
            assert_eq!(e.destination, Destination::TrackerPool);
            assert_eq!(e.annotation.coords(), gt.coords());
        }
    }

    #[test]
    fn oracle_detection_is_deterministic_and_call_order_free() {
        let corpus = synth_corpus(2, 4, 0.0, 9);
        let detector = OracleDetector::from_corpus(&corpus, 1.5, 42).unwrap();
        let at = FrameRef { sequence: 1, frame: 2 };
        let a = detector.detect(&corpus[1].frames[2], at).unwrap();
        let _ = detector
            .detect(&corpus[0].frames[0], FrameRef { sequence: 0, frame: 0 })
            .unwrap();
        let b = detector.detect(&corpus[1].frames[2], at).unwrap();
        assert_eq!(a.coords(), b.coords());

        let exact = OracleDetector::from_corpus(&corpus, 0.0, 42).unwrap();
        let gt = corpus[1].annotations[2].as_ref().unwrap();
        let d = exact.detect(&corpus[1].frames[2], at).unwrap();
        assert_eq!(d.coords(), gt.coords());
    }

    #[test]
    fn oracle_rejects_retraining() {
        let corpus = static_corpus(1, 3, 10);
        let mut detector = OracleDetector::from_corpus(&corpus, 0.0, 1).unwrap();
        let err = retrain_detector(&mut detector, &[], &[], &DetectorTrainConfig::default());
        assert!(matches!(err, Err(Error::Capability(_))));
    }

    #[test]
    fn lambda_zero_training_ignores_the_tracker_pool() {
        let corpus = synth_corpus(1, 4, 0.0, 11);
        let detector = OracleDetector::from_corpus(&corpus, 0.5, 3).unwrap();
        let base = tiny_tracker(8, 5, TrackerInit::Identity);
        let videos: Vec<&LoadedSequence> = corpus.iter().collect();
        let anchors: Vec<Vec<LandmarkShape>> = vec![(0..4)
            .map(|t| {
                detector
                    .detect(&corpus[0].frames[t], FrameRef { sequence: 0, frame: t })
                    .unwrap()
            })
            .collect()];

        let fake_entry = DistilledEntry {
            frame: FrameRef { sequence: 0, frame: 2 },
            annotation: corpus[0].annotations[2].clone().unwrap().translated(5.0, 5.0),
            destination: Destination::TrackerPool,
            provenance: Provenance::Detected,
            l_det: 0.0,
            l_tck: 0.01,
            round: 1,
            anchor: anchors[0][1].clone(),
        };
        let cfg = TrackerTrainConfig {
            epochs: 2,
            lr: 1e-5,
            ..TrackerTrainConfig::default()
        };

        let mut with_pool = base.clone();
        train_tracker(&mut with_pool, &[&fake_entry], &videos, &anchors, 0.0, &cfg).unwrap();
        let mut without_pool = base.clone();
        train_tracker(&mut without_pool, &[], &videos, &anchors, 0.0, &cfg).unwrap();

        for (name, entry) in with_pool.params().iter() {
            assert_eq!(
                entry.value.values(),
                without_pool.params().value(name).unwrap().values(),
                "parameter {name} diverged under lambda = 0"
            );
        }
    }

    #[test]
    fn pool_entries_matching_tracker_output_leave_zero_det_term() {
        // With the identity tracker, an annotation equal to the forward
        // output (= the anchor) contributes nothing: gradients come from the
        // cycle and anchor terms only.
        let corpus = static_corpus(1, 3, 12);
        let base = tiny_tracker(8, 6, TrackerInit::Identity);
        let videos: Vec<&LoadedSequence> = corpus.iter().collect();
        let gt: Vec<LandmarkShape> = corpus[0]
            .annotations
            .iter()
            .map(|a| a.clone().unwrap())
            .collect();
        let anchors = vec![gt.clone()];
        let matching_entry = DistilledEntry {
            frame: FrameRef { sequence: 0, frame: 1 },
            annotation: gt[0].clone(),
            destination: Destination::TrackerPool,
            provenance: Provenance::Detected,
            l_det: 0.0,
            l_tck: 0.0,
            round: 1,
            anchor: gt[0].clone(),
        };
        let cfg = TrackerTrainConfig {
            epochs: 1,
            lr: 1e-4,
            ..TrackerTrainConfig::default()
        };
        let mut with_entry = base.clone();
        let stats_with =
            train_tracker(&mut with_entry, &[&matching_entry], &videos, &anchors, 0.4, &cfg)
                .unwrap();
        let mut without_entry = base.clone();
        let stats_without =
            train_tracker(&mut without_entry, &[], &videos, &anchors, 0.4, &cfg).unwrap();
        assert!((stats_with.initial_loss - stats_without.initial_loss).abs() < 1e-12);
        for (name, entry) in with_entry.params().iter() {
            assert_eq!(
                entry.value.values(),
                without_entry.params().value(name).unwrap().values(),
                "parameter {name} diverged"
            );
        }
    }

    #[test]
    fn single_entry_det_term_decreases_monotonically() {
        let corpus = synth_corpus(1, 3, 0.0, 13);
        let mut model = tiny_tracker(8, 7, TrackerInit::Identity);
        let gt: Vec<LandmarkShape> = corpus[0]
            .annotations
            .iter()
            .map(|a| a.clone().unwrap())
            .collect();
        let annotation = gt[1].translated(0.8, -0.4);
        let cfg = TrackerTrainConfig {
            lr: 5e-4,
            epochs: 1,
            seed: 0,
            use_cycle: false,
            use_anchor: false,
        };
        let mut first = None;
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let (loss, _, det_value) = frame_loss(
                &mut tape,
                &model,
                model.params(),
                &corpus[0],
                1,
                &gt,
                Some(&annotation),
                1.0,
                &cfg,
            )
            .unwrap();
            assert!(det_value <= last + 1e-12, "det term rose: {last} -> {det_value}");
            if first.is_none() {
                first = Some(det_value);
            }
            last = det_value;
            backward_and_step(&tape, loss, model.params_mut(), cfg.lr).unwrap();
        }
        assert!(
            last < 0.05 * first.unwrap(),
            "det term never fell usefully: {} -> {last}",
            first.unwrap()
        );
    }

    #[test]
    fn training_with_every_term_disabled_is_a_usage_error() {
        let corpus = static_corpus(1, 3, 14);
        let mut model = tiny_tracker(8, 8, TrackerInit::Identity);
        let videos: Vec<&LoadedSequence> = corpus.iter().collect();
        let gt: Vec<LandmarkShape> = corpus[0]
            .annotations
            .iter()
            .map(|a| a.clone().unwrap())
            .collect();
        let cfg = TrackerTrainConfig {
            use_cycle: false,
            use_anchor: false,
            ..TrackerTrainConfig::default()
        };
        assert!(matches!(
            train_tracker(&mut model, &[], &videos, &[gt], 0.4, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn regressor_retraining_on_empty_pool_equals_labeled_only() {
        let corpus = synth_corpus(2, 3, 0.01, 15);
        let labeled: Vec<(&GrayImage, &LandmarkShape)> = corpus
            .iter()
            .flat_map(|s| {
                s.frames
                    .iter()
                    .zip(&s.annotations)
                    .map(|(f, a)| (f, a.as_ref().unwrap()))
            })
            .collect();
        let cfg = DetectorTrainConfig {
            epochs: 3,
            lr: 1e-6,
            seed: 4,
        };
        let base = SimpleRegressorDetector::new(8, 8, 16, (32, 32), 1).unwrap();

        let mut via_retrain = base.clone();
        retrain_detector(&mut via_retrain, &[], &labeled, &cfg).unwrap();
        let mut direct = base.clone();
        direct.retrain(&labeled, &cfg).unwrap();
        for (name, entry) in via_retrain.params().iter() {
            assert_eq!(
                entry.value.values(),
                direct.params().value(name).unwrap().values()
            );
        }

        // An empty union is a no-op.
        let mut untouched = base.clone();
        retrain_detector(&mut untouched, &[], &[], &cfg).unwrap();
        for (name, entry) in untouched.params().iter() {
            assert_eq!(entry.value.values(), base.params().value(name).unwrap().values());
        }
    }

    #[test]
    fn regressor_trains_purely_on_distilled_labels() {
        let corpus = synth_corpus(1, 3, 0.01, 16);
        let pool: Vec<(&GrayImage, &LandmarkShape)> = corpus[0]
            .frames
            .iter()
            .zip(&corpus[0].annotations)
            .map(|(f, a)| (f, a.as_ref().unwrap()))
            .collect();
        let cfg = DetectorTrainConfig {
            epochs: 3,
            lr: 1e-6,
            seed: 4,
        };
        let base = SimpleRegressorDetector::new(8, 8, 16, (32, 32), 1).unwrap();
        let mut trained = base.clone();
        retrain_detector(&mut trained, &pool, &[], &cfg).unwrap();
        let changed = trained
            .params()
            .iter()
            .any(|(name, e)| e.value.values() != base.params().value(name).unwrap().values());
        assert!(changed, "training on the pool alone changed nothing");
    }

    #[test]
    fn retraining_on_exact_labels_does_not_degrade_heldout_beyond_5pct() {
        let corpus = synth_corpus(8, 6, 0.01, 17);
        let partition = ComponentPartition::synthetic(8).unwrap();
        let (train, heldout) = corpus.split_at(6);

        let labeled: Vec<(&GrayImage, &LandmarkShape)> = train[..4]
            .iter()
            .flat_map(|s| {
                s.frames
                    .iter()
                    .zip(&s.annotations)
                    .map(|(f, a)| (f, a.as_ref().unwrap()))
            })
            .collect();
        let mut detector = SimpleRegressorDetector::new(8, 8, 32, (32, 32), 2).unwrap();
        let pretrain = DetectorTrainConfig {
            epochs: 60,
            lr: 2e-6,
            seed: 5,
        };
        detector.retrain(&labeled, &pretrain).unwrap();

        let eval = |d: &SimpleRegressorDetector| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for seq in heldout {
                for (t, frame) in seq.frames.iter().enumerate() {
                    let gt = seq.annotations[t].as_ref().unwrap();
                    let det = d.detect(frame, FrameRef { sequence: 0, frame: t }).unwrap();
                    total += normalized_rmse(&det, gt, &partition).unwrap();
                    count += 1;
                }
            }
            total / count as f64
        };
        let before = eval(&detector);

        // The distilled pool carries exact ground truth from the rest of the
        // training split.
        let pool: Vec<(&GrayImage, &LandmarkShape)> = train[4..]
            .iter()
            .flat_map(|s| {
                s.frames
                    .iter()
                    .zip(&s.annotations)
                    .map(|(f, a)| (f, a.as_ref().unwrap()))
            })
            .collect();
        let retrain_cfg = DetectorTrainConfig {
            epochs: 20,
            lr: 2e-6,
            seed: 6,
        };
        retrain_detector(&mut detector, &pool, &labeled, &retrain_cfg).unwrap();
        let after = eval(&detector);
        assert!(
            after <= before * 1.05,
            "held-out nrmse degraded: {before} -> {after}"
        );
    }

    #[test]
    fn run_rounds_single_round_matches_manual_invocation() {
        let corpus = synth_corpus(3, 4, 0.01, 18);
        let cfg = DistillConfig {
            rounds: 1,
            threshold: 0.08,
            tracker: TrackerTrainConfig {
                epochs: 1,
                lr: 1e-6,
                ..TrackerTrainConfig::default()
            },
            ..DistillConfig::default()
        };

        let mut detector_a = OracleDetector::from_corpus(&corpus, 0.3, 21).unwrap();
        let mut tracker_a = tiny_tracker(8, 9, TrackerInit::Identity);
        let outcome = run_rounds(&corpus, &[], &mut detector_a, &mut tracker_a, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 1);
        let m = &outcome.metrics[0];
        assert!(m.accepted_detector_pool + m.accepted_tracker_pool <= m.eligible);

        // Manual single round.
        let detector_b = OracleDetector::from_corpus(&corpus, 0.3, 21).unwrap();
        let mut tracker_b = tiny_tracker(8, 9, TrackerInit::Identity);
        let (sets, anchors) = distill_split(&corpus, &detector_b, &tracker_b, &cfg, 1).unwrap();
        assert_eq!(sets.accepted(), outcome.history[0].accepted());
        let pool: Vec<&DistilledEntry> = sets.tracker_pool().collect();
        let videos: Vec<&LoadedSequence> = corpus.iter().collect();
        let mut tck_cfg = cfg.tracker.clone();
        tck_cfg.seed = mix_seed(cfg.tracker.seed, 0x7C6, 1);
        train_tracker(&mut tracker_b, &pool, &videos, &anchors, cfg.lambda, &tck_cfg).unwrap();

        for (name, entry) in tracker_a.params().iter() {
            assert_eq!(
                entry.value.values(),
                tracker_b.params().value(name).unwrap().values(),
                "parameter {name} diverged between run_rounds and manual"
            );
        }
    }

    #[test]
    fn jobs_parallelism_changes_nothing() {
        let corpus = synth_corpus(3, 4, 0.01, 19);
        let detector = OracleDetector::from_corpus(&corpus, 0.3, 23).unwrap();
        let tracker = tiny_tracker(8, 10, TrackerInit::Identity);
        let serial = DistillConfig {
            threshold: 0.08,
            jobs: 1,
            ..DistillConfig::default()
        };
        let parallel = DistillConfig {
            jobs: 3,
            ..serial.clone()
        };
        let (a, anchors_a) = distill_split(&corpus, &detector, &tracker, &serial, 1).unwrap();
        let (b, anchors_b) = distill_split(&corpus, &detector, &tracker, &parallel, 1).unwrap();
        assert_eq!(a.accepted(), b.accepted());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.annotation.coords(), y.annotation.coords());
        }
        for (x, y) in anchors_a.iter().zip(&anchors_b) {
            for (p, q) in x.iter().zip(y) {
                assert_eq!(p.coords(), q.coords());
            }
        }
    }
}
