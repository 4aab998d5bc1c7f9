//! Ground-truth degradations and the differentiable surrogates whose
//! parameters the solver estimates.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::ops;
use crate::tensor::{Image, Latent, Tensor};

/// Standard JPEG luminance quantisation table (quality 50), row-major.
pub const BASE_QUANT_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99., //
];

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruthOperator {
    /// Shared `(k, k)` kernel on every channel, reflect padding.
    Conv { kernel: Tensor },
    /// 8x8 blockwise DCT quantisation on the 0..255 level scale with the
    /// base table multiplied by `quant_factor`.
    DctQuantize { quant_factor: f64 },
    /// Box-average downsampling.
    Downsample { factor: usize },
    /// Channel average to a single plane.
    GrayProject,
}

impl fmt::Display for GroundTruthOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Conv { kernel } => write!(f, "conv-kernel({}x{})", kernel.shape()[0], kernel.shape()[1]),
            Self::DctQuantize { quant_factor } => write!(f, "dct-quantize(q={quant_factor})"),
            Self::Downsample { factor } => write!(f, "downsample({factor})"),
            Self::GrayProject => write!(f, "gray-project"),
        }
    }
}

impl GroundTruthOperator {
    pub fn conv(kernel: Tensor) -> Result<Self> {
        ops::kernel_size(&kernel)?;
        if kernel.data().iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("conv kernel has negative entries".into()));
        }
        if (kernel.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel sums to {}, expected 1",
                kernel.sum()
            )));
        }
        Ok(Self::Conv { kernel })
    }

    pub fn dct_quantize(quant_factor: f64) -> Result<Self> {
        if !(quant_factor > 0.0 && quant_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!("quant factor {quant_factor} must be positive")));
        }
        Ok(Self::DctQuantize { quant_factor })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input else {
            return Err(Error::InvalidArgument(format!("expected (C, H, W), got {input:?}")));
        };
        Ok(match self {
            Self::Downsample { factor } => vec![*c, h / factor, w / factor],
            Self::GrayProject => vec![1, *h, *w],
            _ => input.to_vec(),
        })
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        match self {
            Self::Conv { kernel } => ops::blur(x, kernel),
            Self::DctQuantize { quant_factor } => dct_quantize(x, *quant_factor),
            Self::Downsample { factor } => ops::downsample(x, *factor),
            Self::GrayProject => {
                let (c, h, w) = x.dims3()?;
                let d = x.data();
                Ok(Tensor::from_fn(&[1, h, w], |i| {
                    (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64
                }))
            }
        }
    }
}

/// Applies the ground-truth degradation.
pub fn apply_gt(op: &GroundTruthOperator, x: &Image) -> Result<Image> {
    op.apply(x)
}

fn dct_quantize(x: &Tensor, quant_factor: f64) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let b = ops::DCT_BLOCK;
    if h % b != 0 || w % b != 0 {
        return Err(Error::InvalidArgument(format!(
            "dct-quantize needs dims divisible by {b}, got {h}x{w}"
        )));
    }
    let basis = ops::dct_basis();
    let table: Vec<f64> = BASE_QUANT_TABLE.iter().map(|q| q * quant_factor).collect();
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let mut blk = [0.0; 64];
                for y in 0..b {
                    for xx in 0..b {
                        blk[y * b + xx] = 255.0 * d[ch * h * w + (by + y) * w + bx + xx] - 128.0;
                    }
                }
                let mut coef = ops::dct8x8(&blk, &basis);
                for (cf, q) in coef.iter_mut().zip(&table) {
                    *cf = (*cf / q).round() * q;
                }
                let rec = ops::idct8x8(&coef, &basis);
                for y in 0..b {
                    for xx in 0..b {
                        out[ch * h * w + (by + y) * w + bx + xx] = (rec[y * b + xx] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// A degraded observation together with how it was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: Image,
    pub noise_std: f64,
    pub provenance: String,
}

/// `y = A(x) + sigma * n` with `n` drawn from a ChaCha8 stream seeded by `seed`.
pub fn make_measurement(op: &GroundTruthOperator, x: &Image, sigma: f64, seed: u64) -> Result<Measurement> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std {sigma} must be >= 0")));
    }
    let mut y = op.apply(x)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("measurement".into()));
    }
    Ok(Measurement {
        y,
        noise_std: sigma,
        provenance: format!("{op}; sigma={sigma}; seed={seed}"),
    })
}

/// Normalised isotropic Gaussian kernel of odd size `k`.
pub fn gaussian_kernel(k: usize, std: f64) -> Result<Tensor> {
    if k % 2 == 0 || std <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel needs odd size and positive std, got k={k}, std={std}"
        )));
    }
    let r = (k / 2) as f64;
    let mut t = Tensor::from_fn(&[k, k], |i| {
        let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
        (-(x * x + y * y) / (2.0 * std * std)).exp()
    });
    let s = t.sum();
    for v in t.data_mut() {
        *v /= s;
    }
    Ok(t)
}

pub fn dirac_kernel(k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, k]);
    t.data_mut()[(k / 2) * k + k / 2] = 1.0;
    t
}

/// Clamp negatives to zero and renormalise to unit sum; all-nonpositive
/// input falls back to the centred Dirac delta.
pub fn project_kernel(phi: &Tensor) -> Tensor {
    let clamped = phi.map(|v| v.max(0.0));
    let s = clamped.sum();
    if !(s > 0.0) || !s.is_finite() {
        let k = (phi.len() as f64).sqrt().round() as usize;
        if k * k == phi.len() && k % 2 == 1 {
            return dirac_kernel(k).reshape(phi.shape()).expect("same element count");
        }
        // Non-square parameter vectors: put the unit mass on the middle entry.
        let mut t = Tensor::zeros(phi.shape());
        let mid = phi.len() / 2;
        t.data_mut()[mid] = 1.0;
        return t;
    }
    clamped.scale(1.0 / s)
}

/// Reads a whitespace-separated row-major matrix.
pub fn read_kernel_text(path: &Path) -> Result<Tensor> {
    parse_kernel_text(&std::fs::read_to_string(path)?)
}

pub fn parse_kernel_text(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: `{tok}`: {e}", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::Format("kernel rows must be non-empty and equal length".into()));
    }
    Tensor::new(vec![h, w], rows.into_iter().flatten().collect())
}

pub fn format_kernel_text(kernel: &Tensor) -> Result<String> {
    let [h, w] = kernel.shape() else {
        return Err(Error::InvalidArgument(format!("kernel must be rank 2, got {:?}", kernel.shape())));
    };
    let mut s = String::new();
    for y in 0..*h {
        let row: Vec<String> = kernel.data()[y * w..(y + 1) * w]
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_kernel_text(path: &Path, kernel: &Tensor) -> Result<()> {
    std::fs::write(path, format_kernel_text(kernel)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SurrogateFamily {
    /// One `(size, size)` kernel shared across channels.
    Kernel { size: usize },
    /// Three-level encoder/decoder network with two 3x3 conv blocks per
    /// level, ReLU activations, channel skips, and a 1x1 output head.
    Neural { widths: [usize; 3] },
}

/// One named block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOperator {
    family: SurrogateFamily,
    channels: usize,
    manifest: Vec<ParamBlock>,
}

impl SurrogateOperator {
    pub fn new(family: SurrogateFamily, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("surrogate needs at least one channel".into()));
        }
        let mut manifest = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            manifest.push(ParamBlock { name, shape, offset });
            offset += n;
        };
        match &family {
            SurrogateFamily::Kernel { size } => {
                if size % 2 == 0 {
                    return Err(Error::InvalidArgument(format!("kernel size {size} must be odd")));
                }
                push("kernel".into(), vec![*size, *size]);
            }
            SurrogateFamily::Neural { widths } => {
                if widths.contains(&0) {
                    return Err(Error::InvalidArgument("network widths must be positive".into()));
                }
                let [w1, w2, w3] = *widths;
                let mut conv = |name: &str, cin: usize, cout: usize, k: usize| {
                    push(format!("{name}.weight"), vec![cout, cin, k, k]);
                    push(format!("{name}.bias"), vec![cout]);
                };
                conv("enc1a", channels, w1, 3);
                conv("enc1b", w1, w1, 3);
                conv("enc2a", w1, w2, 3);
                conv("enc2b", w2, w2, 3);
                conv("mid_a", w2, w3, 3);
                conv("mid_b", w3, w3, 3);
                conv("dec2a", w3 + w2, w2, 3);
                conv("dec2b", w2, w2, 3);
                conv("dec1a", w2 + w1, w1, 3);
                conv("dec1b", w1, w1, 3);
                conv("head", w1, channels, 1);
            }
        }
        Ok(Self {
            family,
            channels,
            manifest,
        })
    }

    pub fn kernel(size: usize, channels: usize) -> Result<Self> {
        Self::new(SurrogateFamily::Kernel { size }, channels)
    }

    pub fn neural(widths: [usize; 3], channels: usize) -> Result<Self> {
        Self::new(SurrogateFamily::Neural { widths }, channels)
    }

    pub fn family(&self) -> &SurrogateFamily {
        &self.family
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn manifest(&self) -> &[ParamBlock] {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest.iter().map(ParamBlock::len).sum()
    }

    pub fn is_kernel(&self) -> bool {
        matches!(self.family, SurrogateFamily::Kernel { .. })
    }

    pub fn check_params(&self, phi: &Tensor) -> Result<()> {
        match self.family {
            SurrogateFamily::Kernel { size } => phi.ensure_shape(&[size, size]),
            SurrogateFamily::Neural { .. } => phi.ensure_shape(&[self.param_count()]),
        }
    }

    /// Shape that parameter vectors for this surrogate must have.
    pub fn param_shape(&self) -> Vec<usize> {
        match self.family {
            SurrogateFamily::Kernel { size } => vec![size, size],
            SurrogateFamily::Neural { .. } => vec![self.param_count()],
        }
    }

    /// Random initialisation. Kernels: uniform positive entries projected
    /// to the simplex. Networks: He-normal weights and zero biases.
    pub fn random_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.family {
            SurrogateFamily::Kernel { size } => {
                let t = Tensor::from_fn(&[size, size], |_| rng.gen::<f64>());
                project_kernel(&t)
            }
            SurrogateFamily::Neural { .. } => {
                let mut data = vec![0.0; self.param_count()];
                for block in &self.manifest {
                    if block.name.ends_with(".weight") {
                        let fan_in: usize = block.shape[1..].iter().product();
                        let std = (2.0 / fan_in as f64).sqrt();
                        for v in &mut data[block.offset..block.offset + block.len()] {
                            let n: f64 = rng.sample(StandardNormal);
                            *v = std * n;
                        }
                    }
                }
                Tensor::new(vec![self.param_count()], data).expect("manifest length")
            }
        }
    }

    /// Adds the surrogate's forward pass to `g`.
    pub fn build(&self, g: &mut Graph, phi: Var, x: Var) -> Result<Var> {
        self.check_params(g.value(phi))?;
        let (c, _, _) = g.value(x).dims3()?;
        if c != self.channels {
            return Err(Error::shape(&[self.channels], &[c]));
        }
        match self.family {
            SurrogateFamily::Kernel { .. } => g.blur(x, phi),
            SurrogateFamily::Neural { .. } => {
                let mut blocks = self.manifest.iter();
                let mut conv = |g: &mut Graph, input: Var, relu: bool| -> Result<Var> {
                    let wb = blocks.next().expect("manifest weight");
                    let bb = blocks.next().expect("manifest bias");
                    let w = g.slice(phi, wb.offset, &wb.shape)?;
                    let b = g.slice(phi, bb.offset, &bb.shape)?;
                    let out = g.conv2d(input, w, b)?;
                    Ok(if relu { g.relu(out) } else { out })
                };
                let e1 = conv(g, x, true)?;
                let e1 = conv(g, e1, true)?;
                let p1 = g.avg_pool2(e1)?;
                let e2 = conv(g, p1, true)?;
                let e2 = conv(g, e2, true)?;
                let p2 = g.avg_pool2(e2)?;
                let m = conv(g, p2, true)?;
                let m = conv(g, m, true)?;
                let u2 = g.upsample2(m)?;
                let c2 = g.concat(u2, e2)?;
                let d2 = conv(g, c2, true)?;
                let d2 = conv(g, d2, true)?;
                let u1 = g.upsample2(d2)?;
                let c1 = g.concat(u1, e1)?;
                let d1 = conv(g, c1, true)?;
                let d1 = conv(g, d1, true)?;
                conv(g, d1, false)
            }
        }
    }

    /// Plain forward evaluation.
    pub fn apply(&self, phi: &Tensor, x: &Image) -> Result<Image> {
        if let SurrogateFamily::Kernel { .. } = self.family {
            self.check_params(phi)?;
            return ops::blur(x, phi);
        }
        let mut g = Graph::new();
        let p = g.leaf(phi.clone());
        let xv = g.leaf(x.clone());
        let out = self.build(&mut g, p, xv)?;
        Ok(g.value(out).clone())
    }
}

pub fn apply_surrogate(s: &SurrogateOperator, phi_hat: &Tensor, x: &Image) -> Result<Image> {
    s.apply(phi_hat, x)
}

/// Builds `||y - A_phi(D(z0))||^2 + lambda_phi * ||phi||_1` in `g`.
pub fn operator_loss_graph(
    g: &mut Graph,
    s: &SurrogateOperator,
    phi: Var,
    z0: Var,
    codec: &Codec,
    y: Var,
    lambda_phi: f64,
) -> Result<Var> {
    let x = g.decode(z0, codec)?;
    let ax = s.build(g, phi, x)?;
    let r = g.sub(y, ax)?;
    let data = g.sum_sq(r);
    if lambda_phi == 0.0 {
        return Ok(data);
    }
    let l1 = g.l1(phi);
    let reg = g.scale(l1, lambda_phi);
    g.add(data, reg)
}

/// Scalar value of the operator-fitting objective.
pub fn operator_loss(
    s: &SurrogateOperator,
    phi_hat: &Tensor,
    z0: &Latent,
    codec: &Codec,
    y: &Image,
    lambda_phi: f64,
) -> Result<f64> {
    let x = codec.decode(z0)?;
    let ax = s.apply(phi_hat, &x)?;
    Ok(y.sub(&ax)?.norm_sq() + lambda_phi * phi_hat.l1())
}
