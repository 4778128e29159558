//! Landmark shapes, the component partition with its nose root, patch
//! extraction and raw pairwise geometry descriptors.
//!
//! Landmark indices are 0-based throughout; the conventional 1-based 68-point
//! labels map to 0..=67 here (so the nose-tip root, point 31 in 1-based
//! annotations, is index 30).

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::descriptor_entries;

/// Flat landmark coordinate vector `[(x1,y1),...,(xL,yL)]` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkShape {
    coords: Vec<f64>,
}

impl LandmarkShape {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Input(format!(
                "coordinate vector length {} is odd",
                coords.len()
            )));
        }
        if coords.len() < 6 {
            return Err(Error::Input("a shape needs at least 3 landmarks".into()));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::Input("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkShape { coords })
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * 2);
        for &(x, y) in points {
            coords.push(x);
            coords.push(y);
        }
        LandmarkShape::new(coords)
    }

    pub fn landmark_count(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.coords[2 * i], self.coords[2 * i + 1])
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.landmark_count()).map(|i| self.point(i))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|p| [p[0] + dx, p[1] + dy])
            .collect();
        LandmarkShape { coords }
    }
}

/// A named group of landmark indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentGroup {
    name: String,
    indices: Vec<usize>,
}

impl ComponentGroup {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The dendritic grouping of landmarks into facial components, rooted at a
/// nose landmark. Eye groups named `right-eye` / `left-eye` are picked up as
/// the pupil anchors for error normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentPartition {
    groups: Vec<ComponentGroup>,
    root: usize,
    landmark_count: usize,
    eye_groups: Option<(usize, usize)>,
}

impl ComponentPartition {
    /// Build a partition from named index groups. The groups must be pairwise
    /// disjoint and cover `0..L` exactly; the root must lie in a group named
    /// `nose`. Group member lists are sorted, so pair enumeration order is
    /// canonical regardless of input order.
    pub fn new(groups: Vec<(String, Vec<usize>)>, root: usize) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::Input("a partition needs at least 2 groups".into()));
        }
        let mut sorted_groups = Vec::with_capacity(groups.len());
        let mut all: Vec<usize> = Vec::new();
        for (name, mut indices) in groups {
            indices.sort_unstable();
            indices.dedup();
            all.extend_from_slice(&indices);
            sorted_groups.push(ComponentGroup { name, indices });
        }
        let landmark_count = all.len();
        let mut seen = vec![false; landmark_count];
        for &i in &all {
            if i >= landmark_count || seen[i] {
                return Err(Error::Input(format!(
                    "groups must cover 0..{landmark_count} exactly (index {i} duplicated or out of range)"
                )));
            }
            seen[i] = true;
        }
        let root_group = sorted_groups
            .iter()
            .find(|g| g.indices.contains(&root))
            .ok_or_else(|| Error::Input(format!("root index {root} not in any group")))?;
        if root_group.name != "nose" {
            return Err(Error::Input(format!(
                "root index {root} must belong to the nose group, found it in {:?}",
                root_group.name
            )));
        }
        let find = |name: &str| sorted_groups.iter().position(|g| g.name == name);
        let eye_groups = match (find("right-eye"), find("left-eye")) {
            (Some(r), Some(l)) => Some((r, l)),
            _ => None,
        };
        Ok(ComponentPartition {
            groups: sorted_groups,
            root,
            landmark_count,
            eye_groups,
        })
    }

    /// The 68-point partition used by the 300-W annotation standard, with the
    /// nose tip (index 30) as the root.
    pub fn standard_68() -> Self {
        let r = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
        ComponentPartition::new(
            vec![
                ("cheek".into(), r(0, 16)),
                ("right-brow".into(), r(17, 21)),
                ("left-brow".into(), r(22, 26)),
                ("nose".into(), r(27, 35)),
                ("right-eye".into(), r(36, 41)),
                ("left-eye".into(), r(42, 47)),
                ("mouth".into(), r(48, 67)),
            ],
            30,
        )
        .expect("the 300-W partition is well-formed")
    }

    /// A small generic partition for synthetic runs: two 3-point eyes, a nose
    /// holding roughly half the remaining points, and a mouth with the rest.
    /// Requires `landmarks >= 8`.
    pub fn synthetic(landmarks: usize) -> Result<Self> {
        if landmarks < 8 {
            return Err(Error::Input(format!(
                "synthetic partition needs at least 8 landmarks, got {landmarks}"
            )));
        }
        let rest = landmarks - 6;
        let nose_len = rest.div_ceil(2);
        ComponentPartition::new(
            vec![
                ("right-eye".into(), (0..3).collect()),
                ("left-eye".into(), (3..6).collect()),
                ("nose".into(), (6..6 + nose_len).collect()),
                ("mouth".into(), (6 + nose_len..landmarks).collect()),
            ],
            6,
        )
    }

    pub fn groups(&self) -> &[ComponentGroup] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_count
    }

    /// Positions of the (right, left) eye groups, when designated.
    pub fn eye_groups(&self) -> Option<(usize, usize)> {
        self.eye_groups
    }

    /// Centroids of the two eye groups for `shape`: `(right, left)`.
    pub fn eye_centroids(&self, shape: &LandmarkShape) -> Result<((f64, f64), (f64, f64))> {
        let (r, l) = self.eye_groups.ok_or_else(|| {
            Error::Input("partition designates no right-eye/left-eye groups".into())
        })?;
        let centroid = |g: &ComponentGroup| {
            let mut cx = 0.0;
            let mut cy = 0.0;
            for &i in &g.indices {
                let (x, y) = shape.point(i);
                cx += x;
                cy += y;
            }
            (cx / g.len() as f64, cy / g.len() as f64)
        };
        Ok((centroid(&self.groups[r]), centroid(&self.groups[l])))
    }

    pub fn check_shape(&self, shape: &LandmarkShape) -> Result<()> {
        if shape.landmark_count() != self.landmark_count {
            return Err(Error::Protocol(format!(
                "shape has {} landmarks, partition expects {}",
                shape.landmark_count(),
                self.landmark_count
            )));
        }
        Ok(())
    }
}

/// An unordered within-group landmark pair `(m < n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub group: usize,
    pub m: usize,
    pub n: usize,
}

/// All unordered pairs `m < n` within each group, in `(group, m, n)`
/// lexicographic order. A group of size `k` yields `k(k-1)/2` pairs.
pub fn enumerate_pairs(partition: &ComponentPartition) -> Vec<PairIndex> {
    let mut pairs = Vec::new();
    for (g, group) in partition.groups().iter().enumerate() {
        let idx = group.indices();
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                pairs.push(PairIndex {
                    group: g,
                    m: idx[a],
                    n: idx[b],
                });
            }
        }
    }
    pairs
}

/// The 8-entry log-distance descriptor of one landmark pair: the relative
/// distance and nose-anchored entries of both pair members, concatenated.
/// `group` is filled when the descriptor comes from a pair enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPairDescriptor {
    pub values: [f64; 8],
    pub pair: (usize, usize),
    pub group: Option<usize>,
}

/// Descriptor of the `(m, n)` pair against the partition root, with each
/// entry computed as `ln(max(|delta|, eps))`.
pub fn geometry_pair_descriptor(
    shape: &LandmarkShape,
    m: usize,
    n: usize,
    root: usize,
    eps: f64,
) -> Result<GeometryPairDescriptor> {
    if m == n {
        return Err(Error::Usage("descriptor pair indices must differ".into()));
    }
    let l = shape.landmark_count();
    if m >= l || n >= l || root >= l {
        return Err(Error::Input(format!(
            "descriptor indices ({m},{n},root {root}) out of range for {l} landmarks"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Input("descriptor eps must be positive".into()));
    }
    Ok(GeometryPairDescriptor {
        values: descriptor_entries(shape.coords(), m, n, root, eps),
        pair: (m, n),
        group: None,
    })
}

/// Descriptor of an enumerated pair, carrying its group id.
pub fn descriptor_for_pair(
    shape: &LandmarkShape,
    pair: &PairIndex,
    root: usize,
    eps: f64,
) -> Result<GeometryPairDescriptor> {
    let mut d = geometry_pair_descriptor(shape, pair.m, pair.n, root, eps)?;
    d.group = Some(pair.group);
    Ok(d)
}

/// Default clamp inside the descriptor logs, in pixels.
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

/// The square grayscale windows cut around each landmark.
#[derive(Debug, Clone)]
pub struct PatchSet {
    patches: Vec<Vec<f64>>,
    centers: LandmarkShape,
    side: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major `side x side` pixels of patch `i`.
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i]
    }

    pub fn centers(&self) -> &LandmarkShape {
        &self.centers
    }
}

/// Cut the `d x d` window centered at each landmark's rounded coordinates.
/// Out-of-bounds pixels replicate the nearest border pixel. `d` must be odd
/// and at least 3.
pub fn extract_patches(frame: &GrayImage, shape: &LandmarkShape, d: usize) -> Result<PatchSet> {
    if d < 3 || d.is_multiple_of(2) {
        return Err(Error::Input(format!("patch side must be odd and >= 3, got {d}")));
    }
    let r = (d / 2) as i64;
    let mut patches = Vec::with_capacity(shape.landmark_count());
    for (x, y) in shape.points() {
        let cx = x.round() as i64;
        let cy = y.round() as i64;
        let mut patch = Vec::with_capacity(d * d);
        for py in -r..=r {
            for px in -r..=r {
                patch.push(frame.get_clamped(cx + px, cy + py));
            }
        }
        patches.push(patch);
    }
    Ok(PatchSet {
        patches,
        centers: shape.clone(),
        side: d,
    })
}
