//! Invertible linear encoder/decoder pair between pixel space and the
//! latent space the sampler runs in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, Latent, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    Identity,
    /// One-level orthonormal 2-D Haar transform per channel. The latent
    /// stores the LL band in the top-left quadrant, LH top-right, HL
    /// bottom-left, HH bottom-right.
    Haar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    kind: CodecKind,
    image_shape: Vec<usize>,
}

impl Codec {
    pub fn new(kind: CodecKind, image_shape: &[usize]) -> Result<Self> {
        let [_, h, w] = image_shape else {
            return Err(Error::InvalidArgument(format!(
                "codec image shape must be (C, H, W), got {image_shape:?}"
            )));
        };
        if kind == CodecKind::Haar && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "Haar codec needs even spatial dims, got {h}x{w}"
            )));
        }
        Ok(Self {
            kind,
            image_shape: image_shape.to_vec(),
        })
    }

    pub fn identity(image_shape: &[usize]) -> Result<Self> {
        Self::new(CodecKind::Identity, image_shape)
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    /// Both codecs are shape-preserving.
    pub fn latent_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn encode(&self, x: &Image) -> Result<Latent> {
        x.ensure_shape(&self.image_shape)?;
        match self.kind {
            CodecKind::Identity => Ok(x.clone()),
            CodecKind::Haar => haar_analysis(x),
        }
    }

    pub fn decode(&self, z: &Latent) -> Result<Image> {
        z.ensure_shape(&self.image_shape)?;
        match self.kind {
            CodecKind::Identity => Ok(z.clone()),
            CodecKind::Haar => haar_synthesis(z),
        }
    }

    /// Transpose of [`Codec::decode`]. Both codecs are orthonormal, so this
    /// coincides with `encode`.
    pub fn decode_adjoint(&self, u: &Image) -> Result<Latent> {
        self.encode(u)
    }
}

fn haar_analysis(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (hh, hw) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..hh {
            for xx in 0..hw {
                let a = d[base + 2 * y * w + 2 * xx];
                let b = d[base + 2 * y * w + 2 * xx + 1];
                let cc = d[base + (2 * y + 1) * w + 2 * xx];
                let dd = d[base + (2 * y + 1) * w + 2 * xx + 1];
                out[base + y * w + xx] = 0.5 * (a + b + cc + dd);
                out[base + y * w + xx + hw] = 0.5 * (a - b + cc - dd);
                out[base + (y + hh) * w + xx] = 0.5 * (a + b - cc - dd);
                out[base + (y + hh) * w + xx + hw] = 0.5 * (a - b - cc + dd);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn haar_synthesis(z: &Tensor) -> Result<Tensor> {
    let (c, h, w) = z.dims3()?;
    let (hh, hw) = (h / 2, w / 2);
    let d = z.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..hh {
            for xx in 0..hw {
                let ll = d[base + y * w + xx];
                let lh = d[base + y * w + xx + hw];
                let hl = d[base + (y + hh) * w + xx];
                let hh_ = d[base + (y + hh) * w + xx + hw];
                out[base + 2 * y * w + 2 * xx] = 0.5 * (ll + lh + hl + hh_);
                out[base + 2 * y * w + 2 * xx + 1] = 0.5 * (ll - lh + hl - hh_);
                out[base + (2 * y + 1) * w + 2 * xx] = 0.5 * (ll + lh - hl - hh_);
                out[base + (2 * y + 1) * w + 2 * xx + 1] = 0.5 * (ll - lh - hl + hh_);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
