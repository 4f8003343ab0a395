use std::path::Path;

use super::{Activation, Layer, NetworkSpec, NetworkState};
use crate::numerics::io::{BinReader, BinWriter};
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SDCK";

/// `SDCK`, width count and widths, one activation code per hidden layer, the
/// seed, then each layer's weight and bias as `SDMX` blocks.
pub fn encode_checkpoint(state: &NetworkState) -> Vec<u8> {
    let mut w = BinWriter::new();
    w.bytes(MAGIC);
    let spec = &state.spec;
    w.u32(spec.layer_widths.len() as u32);
    for &width in &spec.layer_widths {
        w.u32(width as u32);
    }
    for a in &spec.activations {
        w.u8(match a {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    w.u64(spec.seed);
    for layer in &state.layers {
        w.matrix(&layer.weight);
        w.matrix(&Matrix::row_vector(&layer.bias));
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8], context: &str) -> Result<NetworkState> {
    let mut r = BinReader::new(bytes, context);
    r.magic(MAGIC)?;
    let n_widths = r.u32()? as usize;
    if !(2..=4096).contains(&n_widths) {
        return Err(r.malformed(format!("implausible width count {n_widths}")));
    }
    let mut layer_widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        layer_widths.push(r.u32()? as usize);
    }
    let mut activations = Vec::with_capacity(n_widths - 2);
    for _ in 0..n_widths - 2 {
        activations.push(match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            code => return Err(r.malformed(format!("unknown activation code {code}"))),
        });
    }
    let seed = r.u64()?;
    let spec = NetworkSpec {
        layer_widths,
        activations,
        seed,
    };
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.depth());
    for _ in 0..spec.depth() {
        let weight = r.matrix()?;
        let bias = r.matrix()?;
        if bias.rows() != 1 {
            return Err(r.malformed("bias block must be a single row"));
        }
        layers.push(Layer {
            weight,
            bias: bias.into_vec(),
        });
    }
    r.expect_end()?;
    let state = NetworkState { spec, layers };
    state.validate().map_err(|e| Error::Format {
        context: context.to_string(),
        message: format!("checkpoint does not match its spec: {e}"),
    })?;
    Ok(state)
}

pub fn save_checkpoint(state: &NetworkState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> NetworkState {
        let mut spec = NetworkSpec::relu(vec![4, 5, 3, 2], 17);
        spec.activations[1] = Activation::Identity;
        let mut s = NetworkState::init(&spec).unwrap();
        s.layers[0].bias[2] = -0.125;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.sdck");
        let a = net();
        save_checkpoint(&a, &path).unwrap();
        let b = load_checkpoint(&path).unwrap();
        assert_eq!(a, b);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weight.as_slice().iter().zip(lb.weight.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let bytes = encode_checkpoint(&net());
        let err = decode_checkpoint(&bytes[..bytes.len() - 5], "t").unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_checkpoint(&net());
        bytes[..4].copy_from_slice(b"NOPE");
        assert!(matches!(
            decode_checkpoint(&bytes, "t"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let mut s = net();
        s.layers[1].weight = Matrix::zeros(2, 5);
        let bytes = encode_checkpoint(&s);
        assert!(matches!(
            decode_checkpoint(&bytes, "t"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint("/nonexistent/dir/x.sdck"),
            Err(Error::Io { .. })
        ));
    }
}
