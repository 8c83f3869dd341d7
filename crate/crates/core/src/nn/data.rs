//! Synthetic classification data and its on-disk container.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"NSFD";
const DATASET_VERSION: u8 = 1;

/// Gaussian blob mixture: one spherical cluster per class.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlobSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Scale applied to the standard-normal draw that places each class
    /// center.
    pub center_scale: f64,
    /// Standard deviation of the per-sample noise around its center.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S: Scalar> {
    pub data: Tensor<S>,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    /// Labels cycle round-robin so every class gets within one sample of
    /// the same count.
    pub fn blobs(spec: &BlobSpec) -> Dataset<S> {
        assert!(spec.samples > 0 && spec.dim > 0 && spec.classes > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = StandardNormal;
        let mut centers = vec![0.0f64; spec.classes * spec.dim];
        for c in centers.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *c = z * spec.center_scale;
        }
        let mut data = Vec::with_capacity(spec.samples * spec.dim);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = (i % spec.classes) as u32;
            labels.push(label);
            let center = &centers[label as usize * spec.dim..(label as usize + 1) * spec.dim];
            for d in 0..spec.dim {
                let z: f64 = normal.sample(&mut rng);
                data.push(S::from_f64(center[d] + z * spec.noise));
            }
        }
        Dataset {
            data: Tensor::from_vec(&[spec.samples, spec.dim], data).unwrap(),
            labels,
            classes: spec.classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Sample order for one epoch. The same `(seed, epoch)` always yields
    /// the same permutation, independent of any other RNG use.
    pub fn shuffled_indices(&self, seed: u64, epoch: u32) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Copies the rows named by `indices` into a batch. The trailing
    /// partial batch of an epoch is kept, not dropped.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<S>, Vec<u32>) {
        let dim = self.dim();
        let mut out = Tensor::zeros(&[indices.len(), dim]);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            out.data_mut()[r * dim..(r + 1) * dim]
                .copy_from_slice(&self.data.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        (out, labels)
    }
}

/// Flat binary layout, little-endian throughout:
///
/// ```text
/// "NSFD" | version u8 | pad[3] | n u32 | dim u32 | classes u32
///        | labels n u32 | data n*dim f32
/// ```
///
/// Samples are stored as f32 regardless of the in-memory scalar type.
pub fn save_dataset<S: Scalar>(path: &Path, dataset: &Dataset<S>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + dataset.len() * (4 + dataset.dim() * 4));
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.classes as u32).to_le_bytes());
    for &l in &dataset.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in dataset.data.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Dataset<S>, NnError> {
    let bad = |reason: &str| NnError::BadDataset {
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| bad(&format!("read failed: {e}")))?;
    if bytes.len() < 20 {
        return Err(bad("shorter than the fixed header"));
    }
    if bytes[0..4] != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let n = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let classes = u32_at(16) as usize;
    if n == 0 || dim == 0 || classes == 0 {
        return Err(bad("zero-sized dataset"));
    }
    let expected = 20 + n * 4 + n * dim * 4;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "length {} does not match header ({} expected)",
            bytes.len(),
            expected
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut off = 20;
    for _ in 0..n {
        let l = u32_at(off);
        if l as usize >= classes {
            return Err(bad(&format!("label {l} out of range for {classes} classes")));
        }
        labels.push(l);
        off += 4;
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(S::from_f64(v as f64));
        off += 4;
    }
    Ok(Dataset {
        data: Tensor::from_vec(&[n, dim], data).unwrap(),
        labels,
        classes,
    })
}
