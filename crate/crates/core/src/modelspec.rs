//! User-placed layer sequences, the construction rules they obey, their
//! canonical trainable form, and the shape trace behind the dimensionality
//! indicator.
//!
//! The rules:
//! - only conv, pool and dense layers can be placed, at most
//!   [`WORKSPACE_CAPACITY`] of them;
//! - once a dense layer appears, everything after it is dense (a dense layer
//!   dropped anywhere is moved to the back, and a conv/pool dropped after the
//!   first dense slides in front of it);
//! - the canonical model always opens with a conv layer, flattens right
//!   before the first dense layer, and ends in a `K`-way softmax classifier.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{LayerKind, POOL};

pub const WORKSPACE_CAPACITY: usize = 10;

pub const INPUT_CONV_ID: &str = "input_conv";
pub const FLATTEN_ID: &str = "flatten";
pub const CLASSIFIER_ID: &str = "classifier";
pub const IMAGE_ID: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserLayerKind {
    Conv,
    Pool,
    Dense,
}

impl UserLayerKind {
    pub fn is_spatial(self) -> bool {
        matches!(self, UserLayerKind::Conv | UserLayerKind::Pool)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UserLayerKind::Conv => "conv",
            UserLayerKind::Pool => "pool",
            UserLayerKind::Dense => "dense",
        }
    }

    fn engine_kind(self) -> LayerKind {
        match self {
            UserLayerKind::Conv => LayerKind::Conv,
            UserLayerKind::Pool => LayerKind::Pool,
            UserLayerKind::Dense => LayerKind::Dense,
        }
    }
}

impl std::str::FromStr for UserLayerKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv" => Ok(UserLayerKind::Conv),
            "pool" => Ok(UserLayerKind::Pool),
            "dense" => Ok(UserLayerKind::Dense),
            other => Err(SpecError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: UserLayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: UserLayerKind) -> Self {
        Self { id: id.into(), kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    Capacity { count: usize, limit: usize },
    SpatialAfterDense { id: String, index: usize },
    DuplicateId { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Capacity { count, limit } => {
                write!(f, "workspace full: {count} layers exceeds the limit of {limit}")
            }
            Violation::SpatialAfterDense { id, index } => {
                write!(f, "conv/pool after dense: layer {id} at position {index}")
            }
            Violation::DuplicateId { id } => write!(f, "duplicate layer id {id}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("workspace full")]
    WorkspaceFull,
    #[error("layer {0} not found")]
    NotFound(String),
    #[error("layer id {0} already in use")]
    DuplicateId(String),
    #[error("unknown layer kind {0:?}")]
    UnknownKind(String),
    #[error("invalid sequence: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Every rule broken by `layers`, in position order. Empty means valid.
pub fn validate(layers: &[LayerSpec]) -> Vec<Violation> {
    let mut violations = Vec::new();
    if layers.len() > WORKSPACE_CAPACITY {
        violations.push(Violation::Capacity {
            count: layers.len(),
            limit: WORKSPACE_CAPACITY,
        });
    }
    let mut seen_dense = false;
    let mut ids = HashSet::new();
    for (index, layer) in layers.iter().enumerate() {
        if !ids.insert(layer.id.as_str()) {
            violations.push(Violation::DuplicateId {
                id: layer.id.clone(),
            });
        }
        if layer.kind == UserLayerKind::Dense {
            seen_dense = true;
        } else if seen_dense {
            violations.push(Violation::SpatialAfterDense {
                id: layer.id.clone(),
                index,
            });
        }
    }
    violations
}

/// Parses `"conv,pool,dense"` into layers with ids `L1`, `L2`, …. The result
/// is not validated.
pub fn parse_sequence_text(text: &str) -> Result<Vec<LayerSpec>, SpecError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .enumerate()
        .map(|(i, tok)| Ok(LayerSpec::new(format!("L{}", i + 1), tok.parse()?)))
        .collect()
}

/// A valid workspace: at most ten layers, dense layers only at the tail.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence")]
pub struct WorkspaceSequence {
    layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
struct RawSequence {
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawSequence> for WorkspaceSequence {
    type Error = SpecError;

    fn try_from(raw: RawSequence) -> Result<Self, Self::Error> {
        Self::try_from(raw.layers)
    }
}

impl TryFrom<Vec<LayerSpec>> for WorkspaceSequence {
    type Error = SpecError;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self, Self::Error> {
        let violations = validate(&layers);
        if violations.is_empty() {
            Ok(Self { layers })
        } else {
            Err(SpecError::Invalid(violations))
        }
    }
}

impl WorkspaceSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn kinds(&self) -> Vec<UserLayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.layers.iter().any(|l| l.id == id)
    }

    fn first_dense(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == UserLayerKind::Dense)
            .unwrap_or(self.layers.len())
    }

    /// Drops `layer` at `position`. Dense layers always land at the back; a
    /// conv or pool aimed past the first dense layer lands right before it.
    pub fn place_layer(&self, layer: LayerSpec, position: usize) -> Result<Self, SpecError> {
        if self.layers.len() >= WORKSPACE_CAPACITY {
            return Err(SpecError::WorkspaceFull);
        }
        if self.contains(&layer.id) {
            return Err(SpecError::DuplicateId(layer.id));
        }
        let at = match layer.kind {
            UserLayerKind::Dense => self.layers.len(),
            _ => position.min(self.first_dense()),
        };
        let mut layers = self.layers.clone();
        layers.insert(at, layer);
        Self::try_from(layers)
    }

    pub fn remove_layer(&self, id: &str) -> Result<Self, SpecError> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| SpecError::NotFound(id.to_string()))?;
        let mut layers = self.layers.clone();
        layers.remove(idx);
        Ok(Self { layers })
    }

    /// Comma-separated kinds, the inverse of [`parse_sequence_text`] up to ids.
    pub fn to_text(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.kind.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Widths shared by every conv and dense layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub conv_filters: usize,
    pub dense_units: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            conv_filters: 32,
            dense_units: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalLayer {
    pub id: String,
    pub kind: LayerKind,
}

/// The fully specified network derived from a workspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalModel {
    layers: Vec<CanonicalLayer>,
    num_classes: usize,
    hyper: Hyper,
}

/// Builds `[InputConv] ++ conv/pool run ++ [Flatten] ++ dense run ++
/// [Classifier(K)]` with default widths.
pub fn canonicalize(seq: &WorkspaceSequence, num_classes: usize) -> CanonicalModel {
    canonicalize_with(seq, num_classes, Hyper::default())
}

pub fn canonicalize_with(seq: &WorkspaceSequence, num_classes: usize, hyper: Hyper) -> CanonicalModel {
    let mut layers = vec![CanonicalLayer {
        id: INPUT_CONV_ID.into(),
        kind: LayerKind::Conv,
    }];
    let split = seq.first_dense();
    let user = |l: &LayerSpec| CanonicalLayer {
        id: l.id.clone(),
        kind: l.kind.engine_kind(),
    };
    layers.extend(seq.layers[..split].iter().map(user));
    layers.push(CanonicalLayer {
        id: FLATTEN_ID.into(),
        kind: LayerKind::Flatten,
    });
    layers.extend(seq.layers[split..].iter().map(user));
    layers.push(CanonicalLayer {
        id: CLASSIFIER_ID.into(),
        kind: LayerKind::Classifier,
    });
    CanonicalModel {
        layers,
        num_classes,
        hyper,
    }
}

impl CanonicalModel {
    pub fn layers(&self) -> &[CanonicalLayer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    /// The user-placed part of the model.
    pub fn user_sequence(&self) -> WorkspaceSequence {
        let layers = self
            .layers
            .iter()
            .filter_map(|l| {
                let kind = match l.kind {
                    LayerKind::Conv if l.id != INPUT_CONV_ID => UserLayerKind::Conv,
                    LayerKind::Pool => UserLayerKind::Pool,
                    LayerKind::Dense => UserLayerKind::Dense,
                    _ => return None,
                };
                Some(LayerSpec::new(l.id.clone(), kind))
            })
            .collect();
        WorkspaceSequence { layers }
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Ids and kinds in order, e.g. `input_conv:conv,L1:pool,flatten:flatten`.
    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}:{}", l.id, layer_kind_name(l.kind)))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn layer_kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "conv",
        LayerKind::Pool => "pool",
        LayerKind::Flatten => "flatten",
        LayerKind::Dense => "dense",
        LayerKind::Classifier => "classifier",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Spatial([usize; 3]),
    Flat([usize; 1]),
}

impl Shape {
    pub fn spatial(h: usize, w: usize, c: usize) -> Self {
        Shape::Spatial([h, w, c])
    }

    pub fn flat(n: usize) -> Self {
        Shape::Flat([n])
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Shape::Spatial(d) => d.to_vec(),
            Shape::Flat(d) => d.to_vec(),
        }
    }

    /// Spatial extent shown by the indicator; channel depth is ignored and
    /// flattened shapes have none.
    pub fn indicator(&self) -> Option<usize> {
        match self {
            Shape::Spatial([h, w, _]) => Some(*h.max(w)),
            Shape::Flat(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: String,
    pub shape: Shape,
    pub indicator: Option<usize>,
}

/// Shape after every position, starting with the raw image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeTrace {
    pub entries: Vec<TraceEntry>,
}

impl ShapeTrace {
    pub fn output(&self) -> Shape {
        self.entries.last().expect("trace always has the image entry").shape
    }

    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.shape)
    }
}

pub fn infer_shapes(model: &CanonicalModel, input: (usize, usize, usize)) -> ShapeTrace {
    let mut shape = Shape::spatial(input.0, input.1, input.2);
    let mut entries = vec![TraceEntry {
        id: IMAGE_ID.into(),
        shape,
        indicator: shape.indicator(),
    }];
    let hyper = model.hyper;
    for layer in &model.layers {
        shape = match (layer.kind, shape) {
            (LayerKind::Conv, Shape::Spatial([h, w, _])) => Shape::spatial(h, w, hyper.conv_filters),
            (LayerKind::Pool, Shape::Spatial([h, w, c])) => {
                Shape::spatial(h.div_ceil(POOL), w.div_ceil(POOL), c)
            }
            (LayerKind::Flatten, Shape::Spatial([h, w, c])) => Shape::flat(h * w * c),
            (LayerKind::Dense, _) => Shape::flat(hyper.dense_units),
            (LayerKind::Classifier, _) => Shape::flat(model.num_classes),
            // Canonical models never place spatial layers after the flatten.
            (_, s) => s,
        };
        entries.push(TraceEntry {
            id: layer.id.clone(),
            shape,
            indicator: shape.indicator(),
        });
    }
    ShapeTrace { entries }
}
