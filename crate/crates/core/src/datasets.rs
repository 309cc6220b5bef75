//! Labeled multi-class data: synthetic Gaussian blobs, the MNIST IDX format,
//! stratified splitting and seeded minibatching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TensorImage;
use crate::textio;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: TensorImage,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Poison,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    k_classes: usize,
    role: DatasetRole,
    examples: Vec<LabeledExample>,
    class_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    k_classes: usize,
    role: DatasetRole,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(k_classes: usize, role: DatasetRole, examples: Vec<LabeledExample>) -> Result<Self> {
        if k_classes == 0 {
            return Err(Error::InvalidArgument("k_classes must be >= 1".into()));
        }
        if let Some(first) = examples.first() {
            let dim = first.image.dim();
            if let Some(i) = examples.iter().position(|e| e.image.dim() != dim) {
                return Err(Error::Shape(format!(
                    "example {i} has dim {}, expected {dim}",
                    examples[i].image.dim()
                )));
            }
        }
        let mut class_counts = vec![0; k_classes];
        for e in &examples {
            if e.label >= k_classes {
                return Err(Error::InvalidLabel {
                    label: e.label,
                    k_classes,
                });
            }
            class_counts[e.label] += 1;
        }
        Ok(Self {
            k_classes,
            role,
            examples,
            class_counts,
        })
    }

    #[inline]
    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    #[inline]
    pub fn role(&self) -> DatasetRole {
        self.role
    }

    /// Image dimension, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.image.dim())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    #[inline]
    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    #[inline]
    pub fn get(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// `N_k` for every class.
    #[inline]
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Same examples, different role tag.
    pub fn with_role(mut self, role: DatasetRole) -> Self {
        self.role = role;
        self
    }

    /// Widens the label space, e.g. to 10 classes for an MNIST slice missing a digit.
    pub fn with_k_classes(self, k_classes: usize) -> Result<Self> {
        Self::new(k_classes, self.role, self.examples)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Self::new(self.k_classes, self.role, examples).expect("subset of a valid dataset")
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_file(
            path,
            &DatasetFile {
                format_version: 1,
                k_classes: self.k_classes,
                role: self.role,
                examples: self.examples.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DatasetFile = textio::read_file(path)?;
        if file.format_version != 1 {
            return Err(Error::format(
                "dataset file",
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        Self::new(file.k_classes, file.role, file.examples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub k_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub center_separation: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

/// Class centers for a blob spec.
///
/// When `k_classes <= dim` the centers sit at `0.5 + (s / sqrt 2) * u_k` for a
/// random orthonormal frame `u`, so every pair is exactly `s` apart before
/// clipping. Otherwise centers are rejection-sampled in the unit box until
/// they are pairwise at least `s` apart.
pub fn blob_centers(spec: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    validate_blob_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let dim = spec.dim;
    let k = spec.k_classes;
    if k <= dim {
        let radius = spec.center_separation / std::f64::consts::SQRT_2;
        let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
        while frame.len() < k {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &frame {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                frame.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(frame
            .into_iter()
            .map(|u| {
                u.into_iter()
                    .map(|a| (0.5 + radius * a).clamp(0.0, 1.0))
                    .collect()
            })
            .collect())
    } else {
        let unit = Uniform::new_inclusive(0.0, 1.0).expect("unit interval");
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0usize;
        while centers.len() < k {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {k} centers {} apart in [0,1]^{dim}",
                    spec.center_separation
                )));
            }
            let c: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let far = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                    >= spec.center_separation
            });
            if far {
                centers.push(c);
            }
        }
        Ok(centers)
    }
}

fn validate_blob_spec(spec: &BlobSpec) -> Result<()> {
    if spec.dim == 0 {
        return Err(Error::InvalidArgument("blob dim must be >= 1".into()));
    }
    if spec.k_classes < 2 {
        return Err(Error::InvalidArgument("blobs need k_classes >= 2".into()));
    }
    if spec.n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    if !(spec.center_separation.is_finite() && spec.center_separation > 0.0) {
        return Err(Error::InvalidArgument("center_separation must be positive".into()));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
    }
    Ok(())
}

/// Isotropic Gaussian clusters, one per class, clipped to `[0, 1]`.
/// Examples are ordered class by class.
pub fn generate_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let centers = blob_centers(spec)?;
    // separate stream so the centers do not depend on the sample count
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x9E37_79B9_7F4A_7C15);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise_sigma: {e}")))?;
    let mut examples = Vec::with_capacity(spec.k_classes * spec.n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let pixels = center
                .iter()
                .map(|&c| {
                    if spec.noise_sigma == 0.0 {
                        c
                    } else {
                        c + noise.sample(&mut rng)
                    }
                })
                .collect();
            examples.push(LabeledExample {
                image: TensorImage::clipped(pixels),
                label,
            });
        }
    }
    Dataset::new(spec.k_classes, DatasetRole::Train, examples)
}

fn read_u32_be(bytes: &[u8], offset: usize, file: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            file,
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file into `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            file: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            file: "images",
            expected,
            found: bytes.len(),
        });
    }
    let images = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        bytes[16..expected]
            .chunks_exact(dim)
            .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
            .collect()
    };
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            file: "labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4, "labels")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            file: "labels",
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Combines IDX image and label payloads. The class count is one past the
/// largest label present (1 for an empty set).
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (_, _, images) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let k_classes = labels.iter().max().map_or(1, |m| m + 1);
    let examples = images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| {
            Ok(LabeledExample {
                image: TensorImage::new(pixels)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(k_classes, DatasetRole::Train, examples)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, &labels)
}

/// Encodes a dataset as IDX `(images, labels)` bytes with the given image shape.
/// Pixels are quantized to the nearest of 256 levels.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if let Some(dim) = ds.dim() {
        if dim != rows * cols {
            return Err(Error::Shape(format!("dim {dim} is not {rows}x{cols}")));
        }
    }
    if let Some(bad) = ds.examples().iter().find(|e| e.label > 255) {
        return Err(Error::InvalidArgument(format!(
            "label {} does not fit in an IDX byte",
            bad.label
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for e in ds.examples() {
        images.extend(e.image.pixels().iter().map(|p| (p * 255.0).round() as u8));
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.examples().iter().map(|e| e.label as u8));
    Ok((images, labels))
}

/// Stratified split: each class contributes `round(train_fraction * N_k)`
/// examples to the train half. Both halves keep the original example order.
pub fn split(ds: &Dataset, train_fraction: f64, rng_seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut in_train = vec![false; ds.len()];
    for class in 0..ds.k_classes() {
        let mut idx = ds.indices_of_class(class);
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| in_train[i]);
    Ok((
        ds.subset(&train_idx).with_role(DatasetRole::Train),
        ds.subset(&test_idx).with_role(DatasetRole::Test),
    ))
}

/// A seeded permutation of `0..len` cut into groups of `batch_size`; the last
/// group may be short.
pub fn batch_indices(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(ds: &Dataset, batch_size: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(batch_indices(ds.len(), batch_size, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(seed: u64) -> BlobSpec {
        BlobSpec {
            k_classes: 4,
            dim: 4,
            n_per_class: 50,
            center_separation: 0.5,
            noise_sigma: 0.05,
            rng_seed: seed,
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(generate_blobs(&spec(1)).unwrap(), generate_blobs(&spec(1)).unwrap());
        assert_ne!(generate_blobs(&spec(1)).unwrap(), generate_blobs(&spec(2)).unwrap());
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let s = BlobSpec {
            noise_sigma: 0.0,
            ..spec(3)
        };
        let centers = blob_centers(&s).unwrap();
        let ds = generate_blobs(&s).unwrap();
        for e in ds.examples() {
            assert_eq!(e.image.pixels(), centers[e.label].as_slice());
        }
    }

    #[test]
    fn blob_centers_are_separated() {
        for s in [spec(4), BlobSpec { k_classes: 6, dim: 3, center_separation: 0.3, ..spec(4) }] {
            let c = blob_centers(&s).unwrap();
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= s.center_separation - 1e-9, "{i},{j}: {d}");
                }
            }
        }
    }

    #[test]
    fn blob_spec_errors() {
        assert!(generate_blobs(&BlobSpec { dim: 0, ..spec(0) }).is_err());
        assert!(generate_blobs(&BlobSpec { k_classes: 1, ..spec(0) }).is_err());
        assert!(generate_blobs(&BlobSpec { n_per_class: 0, ..spec(0) }).is_err());
    }

    #[test]
    fn nearest_centroid_separates_well_spaced_blobs() {
        let s = BlobSpec {
            k_classes: 4,
            dim: 4,
            n_per_class: 200,
            center_separation: 0.5,
            noise_sigma: 0.05,
            rng_seed: 7,
        };
        let (train, test) = split(&generate_blobs(&s).unwrap(), 0.5, 7).unwrap();
        let mut centroids = vec![vec![0.0; 4]; 4];
        for e in train.examples() {
            for (c, p) in centroids[e.label].iter_mut().zip(e.image.pixels()) {
                *c += p / train.class_counts()[e.label] as f64;
            }
        }
        let correct = test
            .examples()
            .iter()
            .filter(|e| {
                let d = |c: &Vec<f64>| -> f64 {
                    c.iter().zip(e.image.pixels()).map(|(a, b)| (a - b).powi(2)).sum()
                };
                let best = (0..4)
                    .min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b])))
                    .unwrap();
                best == e.label
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99);
    }

    fn hand_built_idx() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [0x0000_0803u32, 1, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 128, 64]);
        let mut labels = Vec::new();
        for v in [0x0000_0801u32, 1] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.push(7);
        (images, labels)
    }

    #[test]
    fn decodes_hand_built_idx() {
        let (images, labels) = hand_built_idx();
        let ds = decode_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.get(0).label, 7);
        assert_eq!(ds.get(0).image.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (images, labels) = hand_built_idx();

        let mut bad = images.clone();
        bad[3] = 0x04;
        assert!(matches!(decode_idx(&bad, &labels), Err(Error::BadMagic { file: "images", .. })));
        let mut bad = labels.clone();
        bad[3] = 0x03;
        assert!(matches!(decode_idx(&images, &bad), Err(Error::BadMagic { file: "labels", .. })));

        assert!(matches!(
            decode_idx(&images[..18], &labels),
            Err(Error::Truncated { file: "images", .. })
        ));
        assert!(matches!(
            decode_idx(&images[..10], &labels),
            Err(Error::Truncated { file: "images", .. })
        ));

        let mut two_labels = labels.clone();
        two_labels[7] = 2;
        two_labels.push(3);
        assert!(matches!(
            decode_idx(&images, &two_labels),
            Err(Error::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn empty_idx_payload_is_empty_dataset() {
        let mut images = Vec::new();
        for v in [0x0000_0803u32, 0, 28, 28] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        let mut labels = Vec::new();
        for v in [0x0000_0801u32, 0] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        let ds = decode_idx(&images, &labels).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let s = BlobSpec { n_per_class: 10, ..spec(5) };
        let ds = generate_blobs(&s).unwrap();
        let (a, b) = split(&ds, 0.5, 9).unwrap();
        assert_eq!(a.class_counts(), &[5, 5, 5, 5]);
        assert_eq!(b.class_counts(), &[5, 5, 5, 5]);
        assert_eq!(a.role(), DatasetRole::Train);
        assert_eq!(b.role(), DatasetRole::Test);
        let (a2, b2) = split(&ds, 0.5, 9).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        for k in 0..4 {
            assert_eq!(a.class_counts()[k] + b.class_counts()[k], ds.class_counts()[k]);
        }
        // disjoint: every original example lands in exactly one half
        let mut all: Vec<_> = a.examples().iter().chain(b.examples()).map(|e| e.image.pixels().to_vec()).collect();
        let mut orig: Vec<_> = ds.examples().iter().map(|e| e.image.pixels().to_vec()).collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        orig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, orig);

        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let ds = generate_blobs(&BlobSpec { n_per_class: 7, ..spec(1) }).unwrap();
        let b = batches(&ds, 5, 3).unwrap();
        assert_eq!(b, batches(&ds, 5, 3).unwrap());
        assert!(b[..b.len() - 1].iter().all(|g| g.len() == 5));
        let mut flat: Vec<usize> = b.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..ds.len()).collect::<Vec<_>>());
        assert_eq!(batches(&ds, 1000, 3).unwrap().len(), 1);
        assert!(batches(&ds, 0, 3).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let ds = generate_blobs(&BlobSpec { n_per_class: 3, ..spec(8) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.json");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn idx_roundtrip_within_half_quantum(
            raw in proptest::collection::vec((proptest::collection::vec(0.0f64..=1.0, 6), 0usize..10), 1..20)
        ) {
            let examples = raw
                .into_iter()
                .map(|(p, label)| LabeledExample { image: TensorImage::new(p).unwrap(), label })
                .collect();
            let ds = Dataset::new(10, DatasetRole::Train, examples).unwrap();
            let (images, labels) = encode_idx(&ds, 2, 3).unwrap();
            let back = decode_idx(&images, &labels).unwrap();
            prop_assert_eq!(back.len(), ds.len());
            for (a, b) in ds.examples().iter().zip(back.examples()) {
                prop_assert_eq!(a.label, b.label);
                for (p, q) in a.image.pixels().iter().zip(b.image.pixels()) {
                    prop_assert!((p - q).abs() <= 1.0 / 510.0 + 1e-12);
                    prop_assert!((0.0..=1.0).contains(q));
                }
            }
        }
    }
}
