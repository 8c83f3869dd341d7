//! Layer parameter snapshots for handing sub-models to their hosts.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{Activation, Layer, NnError, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSFM";
const CHECKPOINT_VERSION: u8 = 1;

/// Flat binary layout, little-endian throughout:
///
/// ```text
/// "NSFM" | version u8 | pad u8 | layer_count u16
/// per layer: in u32 | out u32 | act u8 | weights in*out f32 | bias out f32
/// ```
///
/// Weights are row-major over the input dimension and always stored as f32.
pub fn save_checkpoint<S: Scalar>(path: &Path, layers: &[Layer<S>]) -> std::io::Result<()> {
    assert!(layers.len() <= u16::MAX as usize);
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(0);
    buf.extend_from_slice(&(layers.len() as u16).to_le_bytes());
    for layer in layers {
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        buf.push(layer.activation.code());
        for v in layer.weights.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        for v in layer.bias.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<Layer<S>>, NnError> {
    let bad = |reason: String| NnError::BadCheckpoint { reason };
    let bytes = fs::read(path).map_err(|e| bad(format!("read failed: {e}")))?;
    if bytes.len() < 8 {
        return Err(bad("shorter than the fixed header".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let layer_count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut layers = Vec::with_capacity(layer_count);
    let mut off = 8;
    for i in 0..layer_count {
        if off + 9 > bytes.len() {
            return Err(bad(format!("truncated header for layer {i}")));
        }
        let in_dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let out_dim = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let activation = Activation::from_code(bytes[off + 8])
            .ok_or_else(|| bad(format!("unknown activation code {}", bytes[off + 8])))?;
        off += 9;
        if in_dim == 0 || out_dim == 0 {
            return Err(bad(format!("zero dimension in layer {i}")));
        }
        let needed = (in_dim * out_dim + out_dim) * 4;
        if off + needed > bytes.len() {
            return Err(bad(format!("truncated payload for layer {i}")));
        }
        let mut read_tensor = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                data.push(S::from_f64(v as f64));
                off += 4;
            }
            Tensor::from_vec(shape, data).unwrap()
        };
        let weights = read_tensor(&[in_dim, out_dim]);
        let bias = read_tensor(&[out_dim]);
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    // Consecutive layers must compose.
    for w in layers.windows(2) {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(bad(format!(
                "layer widths {} and {} do not compose",
                w[0].out_dim(),
                w[1].in_dim()
            )));
        }
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GlobalModel;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let model = GlobalModel::<f32>::new(&[6, 5, 4], 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nsfm");
        save_checkpoint(&path, &model.layers).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(model.layers, loaded);
    }

    #[test]
    fn f64_round_trip_narrows_to_f32() {
        let model = GlobalModel::<f64>::new(&[3, 3], 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nsfm");
        save_checkpoint(&path, &model.layers).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        for (a, b) in model.layers[0].weights.data().iter().zip(loaded[0].weights.data()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn load_rejects_corruption() {
        let model = GlobalModel::<f32>::new(&[4, 4, 2], 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nsfm");
        save_checkpoint(&path, &model.layers).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[3] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        fs::write(&path, &good[..good.len() - 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        let mut extra = good.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        let mut bad_act = good.clone();
        bad_act[16] = 9;
        fs::write(&path, &bad_act).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
