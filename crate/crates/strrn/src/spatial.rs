//! The spatial relational reasoning feature: per-patch appearance embeddings,
//! pairwise geometry embeddings summed within each component group, and their
//! concatenation into one fixed-length vector.
//!
//! Layout contract: group geometry blocks in partition order first, then one
//! appearance block per landmark in landmark order, for a total length of
//! `C * geometry_dim + L * appearance_dim`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{ParamStore, Tape, TensorF, Var};
use crate::shape::{enumerate_pairs, extract_patches, ComponentPartition, LandmarkShape};

/// Parameter names of the two spatial embeddings.
pub const W_APPEARANCE: &str = "spatial.W_A";
pub const B_APPEARANCE: &str = "spatial.b_A";
pub const W_GEOMETRY: &str = "spatial.W_G";
pub const B_GEOMETRY: &str = "spatial.b_G";

/// The geometry descriptor is always 8-dimensional: two 4-entry halves.
pub const DESCRIPTOR_DIM: usize = 8;

/// Dimensions of the spatial module.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    /// Patch side in pixels (odd, >= 3).
    pub patch_size: usize,
    /// Appearance embedding width per landmark.
    pub appearance_dim: usize,
    /// Geometry embedding width per group.
    pub geometry_dim: usize,
    /// Clamp inside the descriptor logs, in pixels.
    pub log_eps: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            patch_size: 15,
            appearance_dim: 32,
            geometry_dim: 16,
            log_eps: crate::shape::DEFAULT_LOG_EPS,
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if self.appearance_dim == 0 || self.geometry_dim == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        if self.log_eps <= 0.0 {
            return Err(Error::Config("log eps must be positive".into()));
        }
        Ok(())
    }

    /// Length of the assembled feature for a partition.
    pub fn feature_len(&self, partition: &ComponentPartition) -> usize {
        partition.group_count() * self.geometry_dim
            + partition.landmark_count() * self.appearance_dim
    }

    /// Expected parameter shapes of the spatial weights.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d2 = self.patch_size * self.patch_size;
        vec![
            (W_APPEARANCE.into(), vec![self.appearance_dim, d2]),
            (B_APPEARANCE.into(), vec![self.appearance_dim]),
            (W_GEOMETRY.into(), vec![self.geometry_dim, DESCRIPTOR_DIM]),
            (B_GEOMETRY.into(), vec![self.geometry_dim]),
        ]
    }
}

/// Insert freshly initialized spatial weights: Glorot-uniform matrices and
/// zero biases.
pub fn init_spatial_params(
    store: &mut ParamStore,
    cfg: &SpatialConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d2 = cfg.patch_size * cfg.patch_size;
    store.insert(
        W_APPEARANCE,
        TensorF::glorot_uniform(vec![cfg.appearance_dim, d2], d2, cfg.appearance_dim, rng),
    )?;
    store.insert(B_APPEARANCE, TensorF::zeros(vec![cfg.appearance_dim]))?;
    store.insert(
        W_GEOMETRY,
        TensorF::glorot_uniform(
            vec![cfg.geometry_dim, DESCRIPTOR_DIM],
            DESCRIPTOR_DIM,
            cfg.geometry_dim,
            rng,
        ),
    )?;
    store.insert(B_GEOMETRY, TensorF::zeros(vec![cfg.geometry_dim]))?;
    Ok(())
}

/// Either a constant shape or a differentiable shape node already on the
/// tape (the chained-tracking case).
#[derive(Clone, Copy)]
pub enum ShapeInput<'a> {
    Fixed(&'a LandmarkShape),
    Node(Var),
}

/// ReLU(W_A . flatten(patch) + b_A) for one patch node.
pub fn appearance_embed(tape: &mut Tape, store: &ParamStore, patch: Var) -> Result<Var> {
    let w = tape.param(store, W_APPEARANCE)?;
    let b = tape.param(store, B_APPEARANCE)?;
    let flat = if tape.value(patch).shape().len() > 1 {
        tape.flatten(patch)
    } else {
        patch
    };
    let lin = tape.dense(flat, w, b)?;
    Ok(tape.relu(lin))
}

/// ReLU(W_G . descriptor + b_G) for one descriptor node.
pub fn geometry_embed(tape: &mut Tape, store: &ParamStore, descriptor: Var) -> Result<Var> {
    let w = tape.param(store, W_GEOMETRY)?;
    let b = tape.param(store, B_GEOMETRY)?;
    let lin = tape.dense(descriptor, w, b)?;
    Ok(tape.relu(lin))
}

/// Per-group sums of pair embeddings, in partition order. Groups without
/// pairs contribute a zero block. Pairs are enumerated in canonical order, so
/// the blocks do not depend on how the partition was supplied.
pub fn group_geometry(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &SpatialConfig,
    shape: Var,
    partition: &ComponentPartition,
) -> Result<Vec<Var>> {
    let pairs = enumerate_pairs(partition);
    let mut blocks = Vec::with_capacity(partition.group_count());
    for g in 0..partition.group_count() {
        let mut acc: Option<Var> = None;
        for pair in pairs.iter().filter(|p| p.group == g) {
            let desc = tape.geometry_descriptor(
                shape,
                pair.m,
                pair.n,
                partition.root_index(),
                cfg.log_eps,
            )?;
            let emb = geometry_embed(tape, store, desc)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, emb)?,
                None => emb,
            });
        }
        blocks.push(match acc {
            Some(v) => v,
            None => tape.input(TensorF::zeros(vec![cfg.geometry_dim])),
        });
    }
    Ok(blocks)
}

/// Assemble the full relational feature of one frame given an initializing
/// shape: `CONCAT[geometry blocks..., appearance blocks...]`. Patches are
/// cut at the initializing shape's rounded coordinates; when the shape is a
/// tape node, gradients flow to it through the geometry descriptors and the
/// residual connection only (patch cropping is piecewise constant in the
/// coordinates).
pub fn spatial_feature(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &SpatialConfig,
    frame: &GrayImage,
    init: ShapeInput<'_>,
    partition: &ComponentPartition,
) -> Result<Var> {
    cfg.validate()?;
    let shape_var = match init {
        ShapeInput::Fixed(s) => {
            partition.check_shape(s)?;
            tape.input(TensorF::vector(s.coords().to_vec()))
        }
        ShapeInput::Node(v) => v,
    };
    let coords = tape.value(shape_var).values().to_vec();
    if coords.len() != 2 * partition.landmark_count() {
        return Err(Error::Protocol(format!(
            "shape node has {} coordinates, partition expects {}",
            coords.len(),
            2 * partition.landmark_count()
        )));
    }
    let center_shape = LandmarkShape::new(coords)?;
    let patches = extract_patches(frame, &center_shape, cfg.patch_size)?;

    let mut parts = group_geometry(tape, store, cfg, shape_var, partition)?;
    for i in 0..patches.len() {
        let patch = tape.input(TensorF::vector(patches.patch(i).to_vec()));
        parts.push(appearance_embed(tape, store, patch)?);
    }
    tape.concat(&parts)
}

/// The assembled feature as plain values, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRelationFeature {
    pub values: Vec<f64>,
    pub geometry_dim: usize,
    pub appearance_dim: usize,
    pub group_count: usize,
    pub landmark_count: usize,
}

impl SpatialRelationFeature {
    /// Geometry block of group `g`.
    pub fn geometry_block(&self, g: usize) -> &[f64] {
        &self.values[g * self.geometry_dim..(g + 1) * self.geometry_dim]
    }

    /// Appearance block of landmark `i`.
    pub fn appearance_block(&self, i: usize) -> &[f64] {
        let base = self.group_count * self.geometry_dim;
        &self.values[base + i * self.appearance_dim..base + (i + 1) * self.appearance_dim]
    }
}

/// Compute the feature outside any training graph.
pub fn compute_spatial_feature(
    store: &ParamStore,
    cfg: &SpatialConfig,
    frame: &GrayImage,
    init: &LandmarkShape,
    partition: &ComponentPartition,
) -> Result<SpatialRelationFeature> {
    let mut tape = Tape::new();
    let var = spatial_feature(&mut tape, store, cfg, frame, ShapeInput::Fixed(init), partition)?;
    Ok(SpatialRelationFeature {
        values: tape.value(var).values().to_vec(),
        geometry_dim: cfg.geometry_dim,
        appearance_dim: cfg.appearance_dim,
        group_count: partition.group_count(),
        landmark_count: partition.landmark_count(),
    })
}
