//! Procedural patterns, prior construction and seeded problem generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{derive_seed, ExperimentConfig};
use super::imageio::{read_image, write_image};
use super::tensorio::write_tensor;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::operators::{make_measurement, write_kernel_text, GroundTruthOperator, Measurement, SurrogateOperator};
use crate::prior::{Condition, GmmPrior};
use crate::tensor::{Image, Tensor};

pub const SHARP: &str = "sharp";
pub const DEGRADED: &str = "degraded";

const LO: f64 = 0.2;
const HI: f64 = 0.8;

/// Renders a named pattern at `(c, h, w)`. Names take an optional
/// `:argument`: `bars[:period]`, `hbars[:period]`, `checker[:cell]`,
/// `disc`, `rings[:period]`, `gradient`, `rects[:seed]`, `blobs[:seed]`,
/// `file:<path>` (relative to `base_dir`). A trailing `@dx,dy` rolls the
/// pattern circularly by `dx` columns and `dy` rows. A trailing `~n`
/// inverts a 4x4 block at a position drawn from seed `n`.
pub fn pattern(spec: &str, shape: [usize; 3], base_dir: &Path) -> Result<Image> {
    if let Some((base, seed)) = spec.rsplit_once('~') {
        let img = pattern(base, shape, base_dir)?;
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("pattern `{spec}`: bad variant seed")))?;
        return Ok(invert_block(&img, seed, 4));
    }
    if let Some((base, shift)) = spec.rsplit_once('@') {
        let img = pattern(base, shape, base_dir)?;
        let bad = || Error::Config(format!("pattern `{spec}`: bad shift"));
        let (dx, dy) = shift.split_once(',').ok_or_else(bad)?;
        let dx: isize = dx.trim().parse().map_err(|_| bad())?;
        let dy: isize = dy.trim().parse().map_err(|_| bad())?;
        return Ok(roll(&img, dx, dy));
    }
    let [c, h, w] = shape;
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (spec, None),
    };
    let num = |default: usize| -> Result<usize> {
        match arg {
            None => Ok(default),
            Some(a) => a
                .parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::Config(format!("pattern `{spec}`: bad argument"))),
        }
    };
    let level = |on: bool| if on { HI } else { LO };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane: Vec<f64> = match name {
        "bars" => {
            let p = num(8)?.max(2);
            (0..h * w).map(|i| level((i % w) % p < p / 2)).collect()
        }
        "hbars" => {
            let p = num(8)?.max(2);
            (0..h * w).map(|i| level((i / w) % p < p / 2)).collect()
        }
        "checker" => {
            let cell = num(8)?;
            (0..h * w).map(|i| level(((i / w) / cell + (i % w) / cell) % 2 == 0)).collect()
        }
        "disc" => {
            let r = 0.3 * h.min(w) as f64;
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    level(x * x + y * y <= r * r)
                })
                .collect()
        }
        "rings" => {
            let p = num(8)? as f64;
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    level(((x * x + y * y).sqrt() / (p / 2.0)).floor() as usize % 2 == 0)
                })
                .collect()
        }
        "gradient" => (0..h * w)
            .map(|i| LO + (HI - LO) * (i % w) as f64 / (w.max(2) - 1) as f64)
            .collect(),
        "rects" => {
            let mut rng = ChaCha8Rng::seed_from_u64(num(1)? as u64);
            let mut p = vec![LO; h * w];
            for _ in 0..4 {
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (rh, rw) = (rng.gen_range(1..=h.div_ceil(2)), rng.gen_range(1..=w.div_ceil(2)));
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        p[y * w + x] = HI;
                    }
                }
            }
            p
        }
        "blobs" => {
            let mut rng = ChaCha8Rng::seed_from_u64(num(1)? as u64);
            let centres: Vec<(f64, f64, f64)> = (0..5)
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.08..0.2) * h.min(w) as f64,
                    )
                })
                .collect();
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let v: f64 = centres
                        .iter()
                        .map(|(by, bx, r)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    LO + (HI - LO) * v.min(1.0)
                })
                .collect()
        }
        "file" => {
            let path = arg.ok_or_else(|| Error::Config("`file:` pattern needs a path".into()))?;
            let img = read_image(&base_dir.join(path))?;
            img.ensure_shape(&shape)?;
            return Ok(img);
        }
        _ => return Err(Error::Config(format!("unknown pattern `{spec}`"))),
    };
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![c, h, w], data)
}

fn roll(img: &Image, dx: isize, dy: isize) -> Image {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let d = img.data();
    Tensor::from_fn(img.shape(), |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
        d[ch * h * w + sy * w + sx]
    })
    .reshape(&[c, h, w])
    .expect("same shape")
}

fn invert_block(img: &Image, seed: u64, size: usize) -> Image {
    let [h, w] = [img.shape()[1], img.shape()[2]];
    let (bh, bw) = (size.min(h), size.min(w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y0, x0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
    let d = img.data();
    Tensor::from_fn(img.shape(), |i| {
        let (y, x) = ((i / w) % h, i % w);
        if (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x) {
            LO + HI - d[i]
        } else {
            d[i]
        }
    })
}

/// Mixture prior in latent space with `sharp`, `degraded` (when configured)
/// and `unconditional` conditions.
pub fn build_prior(cfg: &ExperimentConfig, codec: &Codec) -> Result<GmmPrior> {
    let spec = &cfg.problem.prior;
    let shape = cfg.problem.image_shape();
    let sharp: Vec<Image> = spec
        .patterns
        .iter()
        .map(|p| pattern(p, shape, &cfg.base_dir))
        .collect::<Result<_>>()?;
    let k = sharp.len();
    let base_w = if spec.weights.is_empty() {
        vec![1.0; k]
    } else {
        spec.weights.clone()
    };
    let mut means: Vec<Tensor> = sharp.iter().map(|x| codec.encode(x)).collect::<Result<_>>()?;
    let mut weights = base_w.clone();
    if let Some(deg) = &spec.degraded {
        let op = deg.build(&cfg.base_dir)?;
        for x in &sharp {
            let d = op.apply(x)?;
            if d.shape() != x.shape() {
                return Err(Error::Config("prior degradation must preserve the image shape".into()));
            }
            means.push(codec.encode(&d)?);
        }
        weights.extend_from_slice(&base_w);
    }
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut prior = GmmPrior::new(means, spec.s, weights)?;
    let leak = spec.sharp_leak;
    if leak > 0.0 {
        let bw: f64 = base_w.iter().sum();
        let w: Vec<f64> = base_w
            .iter()
            .map(|w| (1.0 - leak) * w / bw)
            .chain(base_w.iter().map(|w| leak * w / bw))
            .collect();
        prior.add_condition(Condition::new(SHARP, (0..2 * k).collect()).with_weights(w))?;
    } else {
        prior.add_condition(Condition::new(SHARP, (0..k).collect()))?;
    }
    if spec.degraded.is_some() {
        prior.add_condition(Condition::new(DEGRADED, (k..2 * k).collect()))?;
    }
    Ok(prior)
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug)]
pub struct Problem {
    pub config: ExperimentConfig,
    pub prior: GmmPrior,
    pub codec: Codec,
    pub surrogate: SurrogateOperator,
    pub operator: GroundTruthOperator,
    pub truth: Image,
    pub truth_component: usize,
    pub measurement: Measurement,
}

/// A clean image drawn from sharp component `k`: `D(mu_k + s * n)`.
pub fn sample_component<R: Rng + ?Sized>(prior: &GmmPrior, codec: &Codec, k: usize, rng: &mut R) -> Result<Image> {
    let mu = prior
        .means()
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("component {k} out of range")))?;
    let n = Tensor::randn(mu.shape(), rng);
    codec.decode(&mu.lincomb(1.0, &n, prior.comp_std())?)
}

/// Builds the problem described by `cfg`, drawing the truth and the
/// measurement noise from streams derived from `cfg.seed`.
pub fn generate_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    cfg.validate()?;
    let shape = cfg.problem.image_shape();
    let codec = Codec::new(cfg.model.codec, &shape)?;
    let prior = build_prior(cfg, &codec)?;
    let surrogate = SurrogateOperator::new(cfg.model.surrogate.clone(), cfg.problem.channels)?;
    let operator = cfg.problem.operator.build(&cfg.base_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "truth"));
    let n_sharp = cfg.problem.prior.patterns.len();
    let k = match cfg.problem.truth_component {
        Some(k) => k,
        None => rng.gen_range(0..n_sharp),
    };
    let truth = sample_component(&prior, &codec, k, &mut rng)?;
    let measurement = make_measurement(&operator, &truth, cfg.problem.noise_std, derive_seed(cfg.seed, "noise"))?;
    Ok(Problem {
        config: cfg.clone(),
        prior,
        codec,
        surrogate,
        operator,
        truth,
        truth_component: k,
        measurement,
    })
}

#[derive(Serialize)]
struct ProblemManifest<'a> {
    name: &'a str,
    seed: u64,
    truth_component: usize,
    image_shape: &'a [usize],
    measurement_shape: &'a [usize],
    noise_std: f64,
    operator: String,
    provenance: &'a str,
}

/// Writes `truth.{pgm,brt}`, `measurement.{pgm,brt}`, `kernel.txt` for
/// convolution operators, and `problem.json`.
pub fn write_problem(p: &Problem, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tensor(&dir.join("truth.brt"), &p.truth)?;
    write_tensor(&dir.join("measurement.brt"), &p.measurement.y)?;
    if matches!(p.truth.shape()[0], 1 | 3) {
        write_image(&dir.join("truth.pgm"), &p.truth)?;
    }
    if matches!(p.measurement.y.shape().first(), Some(1 | 3)) && p.measurement.y.rank() == 3 {
        write_image(&dir.join("measurement.pgm"), &p.measurement.y)?;
    }
    if let GroundTruthOperator::Conv { kernel } = &p.operator {
        write_kernel_text(&dir.join("kernel.txt"), kernel)?;
    }
    let manifest = ProblemManifest {
        name: &p.config.name,
        seed: p.config.seed,
        truth_component: p.truth_component,
        image_shape: p.truth.shape(),
        measurement_shape: p.measurement.y.shape(),
        noise_std: p.measurement.noise_std,
        operator: p.operator.to_string(),
        provenance: &p.measurement.provenance,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("problem.json"), json + "\n")?;
    Ok(())
}
