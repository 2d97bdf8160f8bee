//! Model file: little-endian binary.
//!
//! ```text
//! magic "LIDXVEC\0", u32 version
//! u32 feat_dim, u32 num_frame_layers
//! per frame layer: u32 context_len, i32 offsets..., u32 out_dim
//! u32 embed_dim, u32 segment7_dim, u32 num_classes
//! per affine layer: f64 weights (row-major, out x in), f64 biases
//! ```

use super::{FrameLayerConfig, NetConfig, NetError, NetworkParams};

pub const MODEL_MAGIC: &[u8; 8] = b"LIDXVEC\0";
pub const MODEL_VERSION: u32 = 1;

pub fn save_params(params: &NetworkParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + params.param_count() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(MODEL_VERSION, &mut out);
    put(c.feat_dim as u32, &mut out);
    put(c.frame_layers.len() as u32, &mut out);
    for l in &c.frame_layers {
        put(l.context.len() as u32, &mut out);
        for &o in &l.context {
            out.extend_from_slice(&o.to_le_bytes());
        }
        put(l.out_dim as u32, &mut out);
    }
    put(c.embed_dim as u32, &mut out);
    put(c.segment7_dim as u32, &mut out);
    put(c.num_classes as u32, &mut out);
    for layer in &params.layers {
        for v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NetError::CorruptModel(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32, NetError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dim(&mut self) -> Result<usize, NetError> {
        let v = self.u32()? as usize;
        if v == 0 || v > 1 << 20 {
            return Err(NetError::CorruptModel(format!("implausible dimension {v}")));
        }
        Ok(v)
    }
}

/// Parses a model file. With `expected_classes`, a model trained for a
/// different number of languages is rejected.
pub fn load_params(bytes: &[u8], expected_classes: Option<usize>) -> Result<NetworkParams, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(NetError::CorruptModel("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(NetError::CorruptModel(format!("unsupported version {version}")));
    }
    let feat_dim = r.dim()?;
    let num_frame = r.dim()?;
    if num_frame > 64 {
        return Err(NetError::CorruptModel(format!("{num_frame} frame layers")));
    }
    let mut frame_layers = Vec::with_capacity(num_frame);
    for _ in 0..num_frame {
        let n = r.dim()?;
        if n > 256 {
            return Err(NetError::CorruptModel(format!("context of {n} offsets")));
        }
        let context = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
        frame_layers.push(FrameLayerConfig {
            context,
            out_dim: r.dim()?,
        });
    }
    let config = NetConfig {
        feat_dim,
        frame_layers,
        embed_dim: r.dim()?,
        segment7_dim: r.dim()?,
        num_classes: r.dim()?,
    };
    config.validate().map_err(|e| NetError::CorruptModel(e.to_string()))?;
    if let Some(n) = expected_classes {
        if n != config.num_classes {
            return Err(NetError::DimMismatch(format!(
                "model has {} output classes, expected {n}",
                config.num_classes
            )));
        }
    }
    let needed: usize = config.affine_shapes().iter().map(|(o, i)| (o * i + o) * 8).sum();
    if bytes.len() - r.pos != needed {
        return Err(NetError::CorruptModel(format!(
            "expected {needed} bytes of weights, found {}",
            bytes.len() - r.pos
        )));
    }
    let mut params = NetworkParams::zeros(config);
    for layer in &mut params.layers {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if !params.is_finite() {
        return Err(NetError::CorruptModel("non-finite weights".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::super::init_network;
    use super::*;

    fn small() -> NetworkParams {
        init_network(NetConfig::with_dims(5, [4, 4, 4, 4, 6], 4, 4, 3), 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let q = load_params(&save_params(&p), Some(3)).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.layers.iter().zip(&q.layers) {
            assert!(a.weight.iter().zip(&b.weight).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_and_wrong_classes() {
        let bytes = save_params(&small());
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            assert!(matches!(load_params(&bytes[..cut], None), Err(NetError::CorruptModel(_))), "cut {cut}");
        }
        assert!(matches!(load_params(&bytes, Some(10)), Err(NetError::DimMismatch(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_params(&extra, None).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(load_params(&bad, None), Err(NetError::CorruptModel(_))));
    }
}
