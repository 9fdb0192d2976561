//! Versioned binary parameter blob.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MLMP"
//! 4       4     u32 format version (= 1)
//! 8       8     u64 n_layers
//! 16      8     u64 n_heads
//! 24      8     u64 d_model
//! 32      8     u64 vocab_size
//! 40      8     u64 max_positions
//! 48      8     u64 mlp_hidden
//! 56      8     u64 flags (bit 0 = mlp, bit 1 = layernorm)
//! 64      8     u64 seed
//! 72      8     u64 count of f64 values that follow
//! 80      8·N   f64 values, row-major, tensor order below
//! ```
//!
//! Tensor order: token embedding `V×d`, positional embedding `P×d`; per
//! layer: [attn norm gain `d`, bias `d`], per head `W_Q d×d_h`, `W_K d×d_h`,
//! `W_V d×d_h`, `W_O d_h×d`, [mlp norm gain, bias], [mlp `W_in d×m`,
//! `b_in m`, `W_out m×d`, `b_out d`]; [final norm gain, bias]; unembedding
//! `V×d`. Bracketed groups are present only when their flag is set.

use super::params::{ModelConfig, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLMP";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &Params) -> Vec<u8> {
    let c = &params.config;
    let values: usize = params.n_params();
    let mut out = Vec::with_capacity(80 + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = (c.mlp as u64) | ((c.layernorm as u64) << 1);
    for v in [
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_model as u64,
        c.vocab_size as u64,
        c.max_positions as u64,
        c.mlp_hidden as u64,
        flags,
        c.seed,
        values as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u64_at(bytes: &[u8], off: usize) -> Result<u64> {
    bytes
        .get(off..off + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Invalid("truncated parameter blob".into()))
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    if bytes.len() < 80 || &bytes[..4] != MAGIC {
        return Err(Error::Invalid("not a parameter blob".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("unsupported blob version {version}")));
    }
    let field = |i: usize| u64_at(bytes, 8 + 8 * i);
    let flags = field(6)?;
    let config = ModelConfig {
        n_layers: field(0)? as usize,
        n_heads: field(1)? as usize,
        d_model: field(2)? as usize,
        vocab_size: field(3)? as usize,
        max_positions: field(4)? as usize,
        mlp_hidden: field(5)? as usize,
        mlp: flags & 1 != 0,
        layernorm: flags & 2 != 0,
        seed: field(7)?,
    };
    let count = field(8)? as usize;
    let mut params = Params::zeros(&config)?;
    if params.n_params() != count || bytes.len() != 80 + 8 * count {
        return Err(Error::Invalid(format!(
            "blob holds {count} values, config implies {}",
            params.n_params()
        )));
    }
    let mut off = 80;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(layers in 0usize..3, heads in 1usize..3, mlp: bool, ln: bool, seed: u64) {
            let cfg = ModelConfig {
                n_layers: layers,
                n_heads: heads,
                d_model: 4 * heads,
                vocab_size: 7,
                max_positions: 5,
                mlp,
                layernorm: ln,
                mlp_hidden: 6,
                seed,
            };
            let p = Params::init(&cfg, 0.3).unwrap();
            let bytes = encode(&p);
            prop_assert_eq!(bytes.len(), 80 + 8 * p.n_params());
            prop_assert_eq!(decode(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn header_layout() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            vocab_size: 3,
            max_positions: 2,
            mlp: false,
            layernorm: true,
            mlp_hidden: 0,
            seed: 9,
        };
        let p = Params::zeros(&cfg).unwrap();
        let b = encode(&p);
        assert_eq!(&b[..4], b"MLMP");
        assert_eq!(u64::from_le_bytes(b[56..64].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[64..72].try_into().unwrap()), 9);
        // first unembedding value is the last tensor; final norm gain precedes it
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
    }
}
