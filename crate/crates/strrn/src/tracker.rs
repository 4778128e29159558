//! Bidirectional landmark tracking with shared parameters and the
//! cycle-consistency check loss.
//!
//! Forward and backward tracking are one function: direction only selects
//! the traversal order over a sequence. In offset mode (the default) the
//! head predicts a residual added to the initializing shape, so a
//! zero-initialized head tracks as the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{
    init_stack_params, run_stack, stack_param_shapes, LayerSpec, ParamStore, Tape, TensorF, Var,
};
use crate::shape::{ComponentPartition, LandmarkShape};
use crate::spatial::{init_spatial_params, spatial_feature, ShapeInput, SpatialConfig};

/// Parameter name prefix of the tracking head.
pub const HEAD_PREFIX: &str = "tracker.head";

/// Traversal order over a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Whether the head output is a residual on the initializing shape or the
/// coordinates themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictionMode {
    #[default]
    Offset,
    Absolute,
}

/// Head architecture mapping the relational feature to `2L` coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadKind {
    /// dense(feature -> hidden) + ReLU + dense(hidden -> 2L).
    Dense { hidden: usize },
    /// Pad the feature into a square map, then conv3x3 + ReLU + 2x2 pool +
    /// dense(-> 2L).
    Conv { channels: usize },
}

impl Default for HeadKind {
    fn default() -> Self {
        HeadKind::Dense { hidden: 128 }
    }
}

/// Full tracker configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub spatial: SpatialConfig,
    pub head: HeadKind,
    pub mode: PredictionMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            spatial: SpatialConfig::default(),
            head: HeadKind::default(),
            mode: PredictionMode::Offset,
        }
    }
}

/// How to initialize a fresh tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerInit {
    /// Zero head output layer: the offset-mode tracker starts as the
    /// identity map.
    Identity,
    /// All layers Glorot-initialized.
    Random,
}

/// One tracking step record.
#[derive(Debug, Clone)]
pub struct TrackStep {
    pub init: LandmarkShape,
    pub predicted: LandmarkShape,
    pub direction: Direction,
    pub frame_index: usize,
}

/// Anything that can track one frame given an initializing shape. The
/// network model implements this; tests inject stubs.
pub trait Tracking {
    fn track(
        &self,
        frame: &GrayImage,
        init: &LandmarkShape,
        direction: Direction,
    ) -> Result<LandmarkShape>;
}

/// The shared-parameter tracking network plus its spatial-module weights.
#[derive(Debug, Clone)]
pub struct TrackerModel {
    config: TrackerConfig,
    partition: ComponentPartition,
    params: ParamStore,
    head_specs: Vec<LayerSpec>,
}

impl TrackerModel {
    pub fn new(
        config: TrackerConfig,
        partition: ComponentPartition,
        seed: u64,
        init: TrackerInit,
    ) -> Result<Self> {
        config.spatial.validate()?;
        let head_specs = head_layer_specs(&config, &partition)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_spatial_params(&mut params, &config.spatial, &mut rng)?;
        init_stack_params(
            &mut params,
            &head_specs,
            HEAD_PREFIX,
            matches!(init, TrackerInit::Identity),
            &mut rng,
        )?;
        Ok(TrackerModel {
            config,
            partition,
            params,
            head_specs,
        })
    }

    /// Rebuild from loaded parameters, validating every name and shape.
    pub fn from_params(
        config: TrackerConfig,
        partition: ComponentPartition,
        loaded: &std::collections::BTreeMap<String, TensorF>,
    ) -> Result<Self> {
        config.spatial.validate()?;
        let head_specs = head_layer_specs(&config, &partition)?;
        let mut expected = config.spatial.param_shapes();
        expected.extend(stack_param_shapes(&head_specs, HEAD_PREFIX));
        let mut params = ParamStore::new();
        for (name, shape) in &expected {
            let tensor = loaded.get(name).ok_or_else(|| {
                Error::Input(format!("checkpoint is missing parameter {name:?}"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("checkpoint parameter {name:?}"),
                    tensor.shape(),
                    shape,
                ));
            }
            params.insert(name.clone(), tensor.clone())?;
        }
        if loaded.len() != expected.len() {
            let known: std::collections::BTreeSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            let extras: Vec<&String> =
                loaded.keys().filter(|k| !known.contains(k.as_str())).collect();
            return Err(Error::Input(format!(
                "checkpoint carries unexpected parameters: {extras:?}"
            )));
        }
        Ok(TrackerModel {
            config,
            partition,
            params,
            head_specs,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn partition(&self) -> &ComponentPartition {
        &self.partition
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn landmark_count(&self) -> usize {
        self.partition.landmark_count()
    }

    /// Build one tracking step on a tape and return the predicted-shape node.
    /// Both directions run the identical computation (shared parameters).
    pub fn track_on_tape(
        &self,
        tape: &mut Tape,
        frame: &GrayImage,
        init: ShapeInput<'_>,
    ) -> Result<Var> {
        self.build_track(tape, &self.params, frame, init)
    }

    /// As [`track_on_tape`](Self::track_on_tape) but reading parameters from
    /// an external store (gradient checks perturb a store they own).
    pub fn build_track(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &GrayImage,
        init: ShapeInput<'_>,
    ) -> Result<Var> {
        let init_var = match init {
            ShapeInput::Fixed(s) => {
                self.partition.check_shape(s)?;
                tape.input(TensorF::vector(s.coords().to_vec()))
            }
            ShapeInput::Node(v) => v,
        };
        let feature = spatial_feature(
            tape,
            store,
            &self.config.spatial,
            frame,
            ShapeInput::Node(init_var),
            &self.partition,
        )?;
        let head_out = run_stack(tape, store, &self.head_specs, HEAD_PREFIX, feature)?;
        match self.config.mode {
            PredictionMode::Offset => tape.add(init_var, head_out),
            PredictionMode::Absolute => Ok(head_out),
        }
    }

    /// Track one frame outside any training graph.
    pub fn track(
        &self,
        frame: &GrayImage,
        init: &LandmarkShape,
        _direction: Direction,
    ) -> Result<LandmarkShape> {
        let mut tape = Tape::new();
        let out = self.track_on_tape(&mut tape, frame, ShapeInput::Fixed(init))?;
        LandmarkShape::new(tape.value(out).values().to_vec())
    }

    /// Track a whole sequence, each step initialized by the previous output.
    /// Forward iterates first-to-last; backward iterates last-to-first.
    pub fn track_sequence(
        &self,
        frames: &[GrayImage],
        init: &LandmarkShape,
        direction: Direction,
    ) -> Result<Vec<TrackStep>> {
        if frames.is_empty() {
            return Err(Error::Input("cannot track an empty sequence".into()));
        }
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..frames.len()).collect(),
            Direction::Backward => (0..frames.len()).rev().collect(),
        };
        let mut steps = Vec::with_capacity(frames.len());
        let mut current = init.clone();
        for t in order {
            let predicted = self.track(&frames[t], &current, direction)?;
            steps.push(TrackStep {
                init: current,
                predicted: predicted.clone(),
                direction,
                frame_index: t,
            });
            current = predicted;
        }
        Ok(steps)
    }
}

impl Tracking for TrackerModel {
    fn track(
        &self,
        frame: &GrayImage,
        init: &LandmarkShape,
        direction: Direction,
    ) -> Result<LandmarkShape> {
        TrackerModel::track(self, frame, init, direction)
    }
}

/// Head layer stack for a config/partition combination.
fn head_layer_specs(
    config: &TrackerConfig,
    partition: &ComponentPartition,
) -> Result<Vec<LayerSpec>> {
    let feature_len = config.spatial.feature_len(partition);
    let out = 2 * partition.landmark_count();
    match config.head {
        HeadKind::Dense { hidden } => {
            if hidden == 0 {
                return Err(Error::Config("head hidden width must be positive".into()));
            }
            Ok(vec![
                LayerSpec::Dense {
                    input: feature_len,
                    output: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: hidden,
                    output: out,
                },
            ])
        }
        HeadKind::Conv { channels } => {
            if channels == 0 {
                return Err(Error::Config("head channels must be positive".into()));
            }
            let side = (feature_len as f64).sqrt().ceil() as usize;
            if side < 4 {
                return Err(Error::Config(format!(
                    "feature length {feature_len} too small for the conv head"
                )));
            }
            let conv_side = side - 2;
            let pooled = conv_side / 2;
            if pooled == 0 {
                return Err(Error::Config("conv head pools to nothing".into()));
            }
            Ok(vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: channels,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Dense {
                    input: channels * pooled * pooled,
                    output: out,
                },
            ])
        }
    }
}

/// Squared L2 discrepancy between the returned and starting shapes.
pub fn cycle_loss(returned: &LandmarkShape, start: &LandmarkShape) -> Result<f64> {
    if returned.landmark_count() != start.landmark_count() {
        return Err(Error::shape(
            "cycle loss",
            &[returned.landmark_count()],
            &[start.landmark_count()],
        ));
    }
    Ok(returned
        .coords()
        .iter()
        .zip(start.coords())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn tiny_config() -> TrackerConfig {
        TrackerConfig {
            spatial: SpatialConfig {
                patch_size: 3,
                appearance_dim: 4,
                geometry_dim: 3,
                log_eps: 1e-3,
            },
            head: HeadKind::Dense { hidden: 8 },
            mode: PredictionMode::Offset,
        }
    }

    fn tiny_shape() -> LandmarkShape {
        LandmarkShape::from_points(&[
            (5.25, 5.125),
            (7.125, 4.5),
            (9.375, 5.625),
            (13.5, 5.25),
            (15.25, 4.375),
            (17.125, 5.5),
            (11.375, 9.75),
            (11.25, 13.875),
        ])
        .unwrap()
    }

    fn textured_frame(seed: usize) -> GrayImage {
        GrayImage::from_fn(24, 24, |x, y| ((x * 7 + y * 13 + seed) % 29) as f64 / 29.0).unwrap()
    }

    fn model(init: TrackerInit, seed: u64) -> TrackerModel {
        TrackerModel::new(
            tiny_config(),
            ComponentPartition::synthetic(8).unwrap(),
            seed,
            init,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_offset_mode_is_identity() {
        let m = model(TrackerInit::Identity, 1);
        let out = m
            .track(&textured_frame(0), &tiny_shape(), Direction::Forward)
            .unwrap();
        assert_eq!(out.coords(), tiny_shape().coords());
    }

    #[test]
    fn zero_head_cycle_returns_exactly() {
        let m = model(TrackerInit::Identity, 2);
        let start = tiny_shape();
        let fwd = m
            .track(&textured_frame(1), &start, Direction::Forward)
            .unwrap();
        let back = m.track(&textured_frame(0), &fwd, Direction::Backward).unwrap();
        assert_eq!(cycle_loss(&back, &start).unwrap(), 0.0);
    }

    #[test]
    fn forward_equals_backward_bitwise() {
        let m = model(TrackerInit::Random, 3);
        let frame = textured_frame(2);
        let f = m.track(&frame, &tiny_shape(), Direction::Forward).unwrap();
        let b = m.track(&frame, &tiny_shape(), Direction::Backward).unwrap();
        assert_eq!(f.coords(), b.coords());
    }

    #[test]
    fn cycle_loss_examples() {
        let a = tiny_shape();
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        let mut coords = a.coords().to_vec();
        coords[5] += 2.0;
        let b = LandmarkShape::new(coords).unwrap();
        assert_eq!(cycle_loss(&b, &a).unwrap(), 4.0);
    }

    #[test]
    fn cycle_loss_matches_mse_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = LandmarkShape::new((0..16).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let b = LandmarkShape::new((0..16).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let av = tape.input(TensorF::vector(a.coords().to_vec()));
        let bv = tape.input(TensorF::vector(b.coords().to_vec()));
        let l = tape.mse(av, bv).unwrap();
        assert_eq!(cycle_loss(&a, &b).unwrap(), tape.value(l).item().unwrap());
    }

    #[test]
    fn cycle_loss_rejects_landmark_mismatch() {
        let a = tiny_shape();
        let b = LandmarkShape::from_points(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert!(cycle_loss(&a, &b).is_err());
    }

    #[test]
    fn track_sequence_zero_head_keeps_init() {
        let m = model(TrackerInit::Identity, 5);
        let frames: Vec<GrayImage> = (0..4).map(textured_frame).collect();
        let steps = m
            .track_sequence(&frames, &tiny_shape(), Direction::Forward)
            .unwrap();
        assert_eq!(steps.len(), 4);
        for s in &steps {
            assert_eq!(s.predicted.coords(), tiny_shape().coords());
        }
    }

    #[test]
    fn track_sequence_single_frame() {
        let m = model(TrackerInit::Random, 6);
        let frames = vec![textured_frame(3)];
        let steps = m
            .track_sequence(&frames, &tiny_shape(), Direction::Forward)
            .unwrap();
        assert_eq!(steps.len(), 1);
        let single = m
            .track(&frames[0], &tiny_shape(), Direction::Forward)
            .unwrap();
        assert_eq!(steps[0].predicted.coords(), single.coords());
    }

    #[test]
    fn track_sequence_matches_manual_unrolling() {
        let m = model(TrackerInit::Random, 7);
        let frames: Vec<GrayImage> = (0..3).map(textured_frame).collect();
        let steps = m
            .track_sequence(&frames, &tiny_shape(), Direction::Forward)
            .unwrap();

        let s1 = m.track(&frames[0], &tiny_shape(), Direction::Forward).unwrap();
        let s2 = m.track(&frames[1], &s1, Direction::Forward).unwrap();
        let s3 = m.track(&frames[2], &s2, Direction::Forward).unwrap();
        assert_eq!(steps[0].predicted.coords(), s1.coords());
        assert_eq!(steps[1].predicted.coords(), s2.coords());
        assert_eq!(steps[2].predicted.coords(), s3.coords());

        let back = m
            .track_sequence(&frames, &tiny_shape(), Direction::Backward)
            .unwrap();
        assert_eq!(back[0].frame_index, 2);
        assert_eq!(back[2].frame_index, 0);
    }

    #[test]
    fn track_sequence_rejects_empty_video() {
        let m = model(TrackerInit::Identity, 8);
        assert!(m
            .track_sequence(&[], &tiny_shape(), Direction::Forward)
            .is_err());
    }

    #[test]
    fn static_sequence_replays_as_fixed_map() {
        let m = model(TrackerInit::Random, 9);
        let frame = textured_frame(11);
        let frames = vec![frame.clone(); 5];
        let steps = m
            .track_sequence(&frames, &tiny_shape(), Direction::Forward)
            .unwrap();
        for s in &steps {
            let replay = m.track(&frame, &s.init, Direction::Forward).unwrap();
            assert_eq!(replay.coords(), s.predicted.coords());
        }
    }

    #[test]
    fn chained_cycle_loss_passes_fd_check() {
        let mut m = model(TrackerInit::Random, 10);
        let start = tiny_shape();
        let frame_a = textured_frame(20);
        let frame_b = textured_frame(21);

        let reference = m.clone();
        let names: Vec<String> = m.params.names().map(String::from).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

        let err = grad_check(&mut m.params, &name_refs, 1e-5, |tape, store| {
            let fwd = reference.build_track(tape, store, &frame_b, ShapeInput::Fixed(&start))?;
            let back = reference.build_track(tape, store, &frame_a, ShapeInput::Node(fwd))?;
            let target = tape.input(TensorF::vector(start.coords().to_vec()));
            tape.mse(back, target)
        })
        .unwrap();
        assert!(err < 1e-4, "chained cycle grad check error {err}");
    }

    #[test]
    fn conv_head_tracks_and_checks_gradients() {
        let config = TrackerConfig {
            spatial: SpatialConfig {
                patch_size: 3,
                appearance_dim: 4,
                geometry_dim: 3,
                log_eps: 1e-3,
            },
            head: HeadKind::Conv { channels: 2 },
            mode: PredictionMode::Offset,
        };
        let mut m = TrackerModel::new(
            config.clone(),
            ComponentPartition::synthetic(8).unwrap(),
            11,
            TrackerInit::Random,
        )
        .unwrap();
        let frame = textured_frame(30);
        let start = tiny_shape();
        let out = m.track(&frame, &start, Direction::Forward).unwrap();
        assert_eq!(out.landmark_count(), 8);

        let reference = m.clone();
        let err = grad_check(
            &mut m.params,
            &["tracker.head.0.W", "tracker.head.3.W"],
            1e-5,
            |tape, store| {
                let out = reference.build_track(tape, store, &frame, ShapeInput::Fixed(&start))?;
                let target = tape.input(TensorF::vector(start.coords().to_vec()));
                tape.mse(out, target)
            },
        )
        .unwrap();
        assert!(err < 1e-4, "conv head grad check error {err}");
    }

    #[test]
    fn absolute_mode_outputs_head_directly() {
        let config = TrackerConfig {
            mode: PredictionMode::Absolute,
            ..tiny_config()
        };
        let m = TrackerModel::new(
            config,
            ComponentPartition::synthetic(8).unwrap(),
            12,
            TrackerInit::Identity,
        )
        .unwrap();
        // Zero head in absolute mode predicts the origin for every landmark.
        let err = m.track(&textured_frame(0), &tiny_shape(), Direction::Forward);
        // All-zero coordinates are a valid shape, so this succeeds with zeros.
        let out = err.unwrap();
        assert!(out.coords().iter().all(|&c| c == 0.0));
    }
}
