//! Little-endian flat binary containers.
//!
//! Weight files (`BTIW`) and similarity indexes (`BTIX`) share this layout:
//! a 4-byte magic, a `u32` version, `u32` header fields, then payload
//! arrays of little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderWeights, LayerWeights};
use crate::error::{BtiError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"BTIW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: [u8; 4], version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u32(version);
        w
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn f32s<T: Scalar>(&mut self, data: &[T]) {
        self.buf.reserve(data.len() * 4);
        for &x in data {
            self.buf.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    /// Checks magic and version and positions the reader after them.
    pub(crate) fn open(buf: &'b [u8], magic: [u8; 4], version: u32) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let found: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if found != magic {
            return Err(BtiError::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = r.u32("version")?;
        if v != version {
            return Err(BtiError::UnsupportedVersion(v));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(BtiError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        self.take(n, what)
    }

    pub(crate) fn tensor<T: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| BtiError::Truncated(what.into()))?, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32_exact(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub(crate) fn finish(self) -> Result<()> {
        let extra = self.buf.len() - self.pos;
        if extra != 0 {
            return Err(BtiError::DimensionMismatch(format!(
                "{extra} bytes remain after the arrays implied by the header"
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Arrays in file order, paired with a descriptive name.
    pub fn arrays(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token".to_string(), &self.token),
            ("position".to_string(), &self.position),
            ("segment".to_string(), &self.segment),
            ("embedding_ln.scale".to_string(), &self.embedding_ln_scale),
            ("embedding_ln.shift".to_string(), &self.embedding_ln_shift),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.arrays() {
                out.push((format!("layer{}.{name}", i + 1), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(WEIGHTS_MAGIC, WEIGHTS_VERSION);
        for v in [c.vocab_size, c.hidden, c.layers, c.heads, c.intermediate, c.max_len] {
            w.u32(v as u32);
        }
        for (_, t) in self.arrays() {
            w.f32s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let mut dims = [0usize; 6];
        for (d, name) in dims.iter_mut().zip(["V", "h", "L", "A", "intermediate", "N"]) {
            *d = r.u32(name)? as usize;
        }
        let [vocab_size, hidden, layers, heads, intermediate, max_len] = dims;
        let config = EncoderConfig {
            vocab_size,
            hidden,
            layers,
            heads,
            intermediate,
            max_len,
            ..EncoderConfig::default()
        };
        config
            .validate()
            .map_err(|e| BtiError::DimensionMismatch(format!("header describes an invalid encoder: {e}")))?;
        let (h, i) = (hidden, intermediate);
        let token = r.tensor(&[vocab_size, h], "token")?;
        let position = r.tensor(&[max_len, h], "position")?;
        let segment = r.tensor(&[2, h], "segment")?;
        let embedding_ln_scale = r.tensor(&[h], "embedding_ln.scale")?;
        let embedding_ln_shift = r.tensor(&[h], "embedding_ln.shift")?;
        let mut layer_weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let name = |s: &str| format!("layer{}.{s}", l + 1);
            layer_weights.push(LayerWeights {
                query: r.tensor(&[h, h], &name("query"))?,
                query_bias: r.tensor(&[h], &name("query_bias"))?,
                key: r.tensor(&[h, h], &name("key"))?,
                key_bias: r.tensor(&[h], &name("key_bias"))?,
                value: r.tensor(&[h, h], &name("value"))?,
                value_bias: r.tensor(&[h], &name("value_bias"))?,
                attn_out: r.tensor(&[h, h], &name("attn_out"))?,
                attn_out_bias: r.tensor(&[h], &name("attn_out_bias"))?,
                attn_ln_scale: r.tensor(&[h], &name("attn_ln.scale"))?,
                attn_ln_shift: r.tensor(&[h], &name("attn_ln.shift"))?,
                ffn_in: r.tensor(&[h, i], &name("ffn_in"))?,
                ffn_in_bias: r.tensor(&[i], &name("ffn_in_bias"))?,
                ffn_out: r.tensor(&[i, h], &name("ffn_out"))?,
                ffn_out_bias: r.tensor(&[h], &name("ffn_out_bias"))?,
                ffn_ln_scale: r.tensor(&[h], &name("ffn_ln.scale"))?,
                ffn_ln_shift: r.tensor(&[h], &name("ffn_ln.shift"))?,
            });
        }
        r.finish()?;
        let weights = Self {
            config,
            token,
            position,
            segment,
            embedding_ln_scale,
            embedding_ln_shift,
            layers: layer_weights,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a `BTIW` file; the configuration comes from its header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
