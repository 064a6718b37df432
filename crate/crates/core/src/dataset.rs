//! Labeled image-patch datasets: loading class-per-directory PNG trees, a
//! seeded synthetic texture generator, balanced subsets, and stratified
//! 60/20/20 splits.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, MAX_CLASSES};
use crate::rng;
use crate::tensor::Tensor;

/// Exemplar images per class offered for activation display.
pub const EXEMPLARS_PER_CLASS: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: image is {actual_h}x{actual_w}, expected {expected_h}x{expected_w}")]
    Dimension {
        path: PathBuf,
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class {class:?} has {available} items, {needed} required")]
    InsufficientClass {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("dataset has no items")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Loaded,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: Arc<Tensor>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    class_names: Vec<String>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>, provenance: Provenance) -> Result<Self, DataError> {
        if let Some(first) = items.first() {
            let dims = first.image.dims();
            if dims.len() != 3 {
                return Err(DataError::Invalid(format!("images must be rank 3, got {dims:?}")));
            }
            for (i, item) in items.iter().enumerate() {
                if item.image.dims() != dims {
                    return Err(DataError::Invalid(format!(
                        "item {i} has dims {:?}, expected {dims:?}",
                        item.image.dims()
                    )));
                }
                if item.label >= class_names.len() {
                    return Err(DataError::Invalid(format!(
                        "item {i} has label {} with {} classes",
                        item.label,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Self {
            items,
            class_names,
            provenance,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// `(H, W, C)` of every image.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.items.first().map(|i| {
            let d = i.image.dims();
            (d[0], d[1], d[2])
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.class_names.len() {
            return Err(DataError::Invalid(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_names.len()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance,
        }
    }

    /// Item indices of each class, in stable order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, item) in self.items.iter().enumerate() {
            by[item.label].push(i);
        }
        by
    }

    /// The first six items of `class` in stable order.
    pub fn exemplars(&self, class: usize) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == class)
            .map(|(i, _)| i)
            .take(EXEMPLARS_PER_CLASS)
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes an 8-bit PNG into an `H×W×3` tensor scaled to `[0, 1]`.
pub fn decode_png(path: &Path) -> Result<Tensor, DataError> {
    let decode_err = |message: String| DataError::Decode {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..][..w * channels];
        for px in row.chunks_exact(channels) {
            if channels < 3 {
                let v = px[0] as f64 / 255.0;
                data.extend([v, v, v]);
            } else {
                data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).map_err(|e| decode_err(e.to_string()))
}

/// Writes an `H×W×3` tensor with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_png(image: &Tensor, path: &Path) -> Result<(), DataError> {
    let d = image.dims();
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), d[1] as u32, d[0] as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let enc_err = |e: png::EncodingError| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

/// Loads `root/<class name>/*.png` for every configured class, in class order
/// then lexicographic path order.
pub fn load_directory(root: &Path, config: &RunConfig) -> Result<Dataset, DataError> {
    let (eh, ew) = (config.dataset.image_height, config.dataset.image_width);
    let mut files = Vec::new();
    for (label, name) in config.dataset.class_names.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(DataError::MissingClassDir(dir));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(&dir)))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        files.extend(paths.into_iter().map(|p| (p, label)));
    }
    let items = files
        .par_iter()
        .map(|(path, label)| {
            let image = decode_png(path)?;
            let (h, w) = (image.dims()[0], image.dims()[1]);
            if (h, w) != (eh, ew) {
                return Err(DataError::Dimension {
                    path: path.clone(),
                    expected_h: eh,
                    expected_w: ew,
                    actual_h: h,
                    actual_w: w,
                });
            }
            Ok(Item {
                image: Arc::new(image),
                label: *label,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(items, config.dataset.class_names.clone(), Provenance::Loaded)
}

/// Writes the dataset as `root/<class name>/<nnnnn>.png`.
pub fn write_directory(ds: &Dataset, root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut written = Vec::with_capacity(ds.len());
    for (label, name) in ds.class_names().iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (n, &i) in ds.indices_by_class()[label].iter().enumerate() {
            let path = dir.join(format!("{n:05}.png"));
            encode_png(&ds.items()[i].image, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One texture sample of class `class` out of `k`.
///
/// Every class is a sinusoidal grating with random phase, period, contrast,
/// brightness and per-channel tint; only the orientation (`class·π/k`)
/// identifies the class, so the mean intensity carries no class signal.
fn texture(class: usize, k: usize, h: usize, w: usize, r: &mut rng::Rng) -> Tensor {
    let angle = class as f64 * PI / k as f64 + r.gen_range(-0.08..0.08);
    let (sin, cos) = angle.sin_cos();
    let period = r.gen_range(3.5..5.0);
    let phase = r.gen_range(0.0..2.0 * PI);
    let contrast = r.gen_range(0.25..0.4);
    let brightness = r.gen_range(0.4..0.6);
    let tint: [f64; 3] = [r.gen_range(0.8..1.0), r.gen_range(0.8..1.0), r.gen_range(0.8..1.0)];
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let wave = (2.0 * PI * (x as f64 * cos + y as f64 * sin) / period + phase).sin();
            let base = brightness + contrast * wave;
            for t in tint {
                let v = base * t + r.gen_range(-0.1..0.1);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![h, w, 3], data)
}

/// `k` classes × `per_class` seeded texture images, class-major order.
pub fn generate_synthetic(k: usize, per_class: usize, h: usize, w: usize, seed: u64) -> Result<Dataset, DataError> {
    if !(1..=MAX_CLASSES).contains(&k) {
        return Err(DataError::Invalid(format!("synthetic class count must be 1..={MAX_CLASSES}")));
    }
    if h == 0 || w == 0 {
        return Err(DataError::Invalid("image dims must be positive".into()));
    }
    let mut items = Vec::with_capacity(k * per_class);
    for class in 0..k {
        let mut r = rng::seeded(rng::derive(seed, "synthetic", class as u64));
        for _ in 0..per_class {
            items.push(Item {
                image: Arc::new(texture(class, k, h, w, &mut r)),
                label: class,
            });
        }
    }
    let names = (0..k).map(|c| format!("class{c}")).collect();
    Dataset::new(items, names, Provenance::Synthetic)
}

/// Draws several disjoint balanced sets at once: set `j` gets
/// `⌊totals[j] / K⌋` items of every class, sampled without replacement.
/// Returns indices into `ds`.
pub fn balanced_draw_indices(ds: &Dataset, totals: &[usize], seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    let k = ds.num_classes();
    let per: Vec<usize> = totals.iter().map(|t| t / k).collect();
    let needed: usize = per.iter().sum();
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); totals.len()];
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < needed {
            return Err(DataError::InsufficientClass {
                class: ds.class_names()[class].clone(),
                needed,
                available: idx.len(),
            });
        }
        let mut r = rng::seeded(rng::derive(seed, "balanced", class as u64));
        idx.shuffle(&mut r);
        let mut rest = idx.as_slice();
        for (j, &n) in per.iter().enumerate() {
            let (take, tail) = rest.split_at(n);
            let mut take = take.to_vec();
            take.sort_unstable();
            picks[j].extend(take);
            rest = tail;
        }
    }
    Ok(picks)
}

pub fn balanced_draw(ds: &Dataset, totals: &[usize], seed: u64) -> Result<Vec<Dataset>, DataError> {
    Ok(balanced_draw_indices(ds, totals, seed)?
        .iter()
        .map(|p| ds.subset(p))
        .collect())
}

/// Exactly `⌊n / K⌋` items per class, remainder dropped.
pub fn balanced_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    Ok(balanced_draw(ds, &[n], seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_CLASS: usize = 5;

/// Stratified 60/20/20 split after a seeded per-class shuffle.
pub fn split_60_20_20(ds: &Dataset, seed: u64) -> Result<SplitPlan, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let mut plan = SplitPlan {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < MIN_SPLIT_CLASS {
            return Err(DataError::InsufficientClass {
                class: ds.class_names()[class].clone(),
                needed: MIN_SPLIT_CLASS,
                available: idx.len(),
            });
        }
        let mut r = rng::seeded(rng::derive(seed, "split", class as u64));
        idx.shuffle(&mut r);
        let n = idx.len() as f64;
        let n_train = (0.6 * n).round() as usize;
        let n_val = (0.2 * n).round() as usize;
        plan.train.extend(&idx[..n_train]);
        plan.validation.extend(&idx[n_train..n_train + n_val]);
        plan.test.extend(&idx[n_train + n_val..]);
    }
    Ok(plan)
}
