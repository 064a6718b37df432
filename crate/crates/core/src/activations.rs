//! Per-filter feature maps of the spatial layers for one input image, their
//! grayscale rendering, and PGM export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{relu, EngineError, LayerKind, TapeEntry};
use crate::modelspec::layer_kind_name;
use crate::tensor::Tensor;
use crate::training::TrainedModel;

/// Maps shown in the 4×3 matrix next to the workspace.
pub const MATRIX_SIZE: usize = 12;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("image is {actual:?}, model expects {expected:?}")]
    Dimension { expected: Vec<usize>, actual: Vec<usize> },
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("layer {0} is not spatial")]
    NotSpatial(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMap {
    pub pre_relu: Tensor,
    pub post_relu: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    pub id: String,
    pub kind: LayerKind,
    pub maps: Vec<FilterMap>,
}

impl LayerActivations {
    /// `(h, w)` of every map in the layer.
    pub fn map_dims(&self) -> (usize, usize) {
        let d = self.maps[0].pre_relu.dims();
        (d[0], d[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    pub image_id: String,
    pub class_id: Option<usize>,
    pub layers: Vec<LayerActivations>,
}

impl ActivationSet {
    pub fn layer(&self, id: &str) -> Option<&LayerActivations> {
        self.layers.iter().find(|l| l.id == id)
    }
}

/// Runs one forward pass and keeps the pre- and post-ReLU maps of every
/// conv/pool layer before the flatten, stopping after `up_to` if given.
pub fn extract(
    model: &TrainedModel,
    image: &Tensor,
    image_id: &str,
    class_id: Option<usize>,
    up_to: Option<&str>,
) -> Result<ActivationSet, ActivationError> {
    let (h, w, c) = model.input_shape;
    if image.dims() != [h, w, c] {
        return Err(ActivationError::Dimension {
            expected: vec![h, w, c],
            actual: image.dims().to_vec(),
        });
    }
    if let Some(id) = up_to {
        match model.model.layers().iter().find(|l| l.id == id) {
            None => return Err(ActivationError::UnknownLayer(id.into())),
            Some(l) if !matches!(l.kind, LayerKind::Conv | LayerKind::Pool) => {
                return Err(ActivationError::NotSpatial(id.into()))
            }
            Some(_) => {}
        }
    }
    let pass = model.network.forward(image)?;
    let mut layers = Vec::new();
    for (layer, entry) in model.model.layers().iter().zip(pass.tape.entries()) {
        let pre = match entry {
            TapeEntry::Conv { pre, .. } | TapeEntry::Pool { pre, .. } => pre,
            _ => break,
        };
        layers.push(LayerActivations {
            id: layer.id.clone(),
            kind: layer.kind,
            maps: split_channels(pre),
        });
        if up_to == Some(layer.id.as_str()) {
            break;
        }
    }
    Ok(ActivationSet {
        image_id: image_id.into(),
        class_id,
        layers,
    })
}

fn split_channels(pre: &Tensor) -> Vec<FilterMap> {
    let channels = pre.dims()[2];
    (0..channels)
        .map(|c| {
            let pre_relu = pre.channel(c);
            let post_relu = relu(&pre_relu);
            FilterMap { pre_relu, post_relu }
        })
        .collect()
}

/// The first twelve maps of a layer in filter order, `None` past the last.
pub fn matrix_view<'a>(set: &'a ActivationSet, layer: &str) -> Result<Vec<Option<&'a FilterMap>>, ActivationError> {
    let l = set
        .layer(layer)
        .ok_or_else(|| ActivationError::UnknownLayer(layer.into()))?;
    Ok((0..MATRIX_SIZE).map(|i| l.maps.get(i)).collect())
}

/// Min-max normalizes a map to 8-bit gray; a constant map becomes 128.
pub fn to_image(map: &Tensor) -> Vec<u8> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return vec![128; map.len()];
    }
    map.data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5) encoding of an 8-bit image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// PGM rendering of one map.
pub fn map_pgm(map: &Tensor) -> Vec<u8> {
    let d = map.dims();
    pgm_bytes(d[1], d[0], &to_image(map))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        }
    }
}

pub fn file_name(layer: &str, filter: usize, phase: Phase) -> String {
    format!("{layer}_f{filter}_{}.pgm", phase.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub filter: usize,
    pub pre: String,
    pub post: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub id: String,
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_id: String,
    pub class_id: Option<usize>,
    /// Map shown by default; the other phase is the toggle.
    pub default_phase: Phase,
    pub layers: Vec<ManifestLayer>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn manifest(set: &ActivationSet) -> Manifest {
    let layers = set
        .layers
        .iter()
        .map(|l| {
            let (height, width) = l.map_dims();
            ManifestLayer {
                id: l.id.clone(),
                kind: layer_kind_name(l.kind).into(),
                height,
                width,
                files: (0..l.maps.len())
                    .map(|f| ManifestFile {
                        filter: f,
                        pre: file_name(&l.id, f, Phase::Pre),
                        post: file_name(&l.id, f, Phase::Post),
                    })
                    .collect(),
            }
        })
        .collect();
    Manifest {
        image_id: set.image_id.clone(),
        class_id: set.class_id,
        default_phase: Phase::Post,
        layers,
    }
}

/// Writes one PGM per map and phase plus `manifest.json`, overwriting
/// existing files.
pub fn export(set: &ActivationSet, dir: &Path) -> Result<Manifest, ActivationError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ActivationError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = manifest(set);
    for (layer, entry) in set.layers.iter().zip(&manifest.layers) {
        for (map, files) in layer.maps.iter().zip(&entry.files) {
            for (tensor, name) in [(&map.pre_relu, &files.pre), (&map.post_relu, &files.post)] {
                let path = dir.join(name);
                fs::write(&path, map_pgm(tensor)).map_err(io(&path))?;
            }
        }
    }
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io(&path))?;
    Ok(manifest)
}
