//! Exact references: linear-Gaussian posteriors, brute-force blind MAP over
//! small discrete grids, and PSNR.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::blur;
use crate::tensor::{Image, Tensor};

/// Value returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Default limit on `|X| * |Phi|` for [`enumerate_blind_map`].
pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior of `x ~ N(mu, sigma_prior)` given `y = A x + sigma * n`.
///
/// The innovation covariance `A Sigma A^T + sigma^2 I` is factored by
/// Cholesky; failure (for example `sigma = 0` with a rank-deficient `A`)
/// is reported as [`Error::Singular`].
pub fn gaussian_posterior(
    mu: &DVector<f64>,
    sigma_prior: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: f64,
    y: &DVector<f64>,
) -> Result<GaussianPosterior> {
    let n = mu.len();
    let m = y.len();
    if sigma_prior.shape() != (n, n) {
        return Err(Error::shape(&[n, n], &[sigma_prior.nrows(), sigma_prior.ncols()]));
    }
    if a.shape() != (m, n) {
        return Err(Error::shape(&[m, n], &[a.nrows(), a.ncols()]));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std {sigma} must be >= 0")));
    }
    let sat = sigma_prior * a.transpose();
    let mut s = a * &sat;
    for i in 0..m {
        s[(i, i)] += sigma * sigma;
    }
    let s = (&s + s.transpose()) * 0.5;
    let singular = || Error::Singular("A Sigma A^T + sigma^2 I".into());
    let scale = s.diagonal().amax();
    let chol = Cholesky::new(s).ok_or_else(singular)?;
    let pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(pivot * pivot > 1e-14 * scale) {
        return Err(singular());
    }
    let innov = y - a * mu;
    let mean = mu + &sat * chol.solve(&innov);
    let gain_t = chol.solve(&sat.transpose());
    let cov = sigma_prior - &sat * gain_t;
    let cov = (&cov + cov.transpose()) * 0.5;
    if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(Error::Singular("posterior is not finite".into()));
    }
    Ok(GaussianPosterior { mean, cov })
}

/// Dense matrix of `x -> blur(x, kernel)` on images of `shape`, acting on
/// row-major flattened tensors.
pub fn conv_matrix(kernel: &Tensor, shape: &[usize]) -> Result<DMatrix<f64>> {
    let n: usize = shape.iter().product();
    let mut m = DMatrix::zeros(n, n);
    let mut e = Tensor::zeros(shape);
    for j in 0..n {
        e.data_mut()[j] = 1.0;
        let col = blur(&e, kernel)?;
        e.data_mut()[j] = 0.0;
        for (i, v) in col.data().iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

pub fn to_vector(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

pub fn from_vector(v: &DVector<f64>, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), v.as_slice().to_vec())
}

/// Finite candidate sets for a blind problem with forward map
/// `x -> blur(x, phi)`.
#[derive(Clone, Debug)]
pub struct DiscreteBlindGrid {
    pub images: Vec<Image>,
    pub image_log_prior: Vec<f64>,
    pub kernels: Vec<Tensor>,
    pub kernel_log_prior: Vec<f64>,
}

impl DiscreteBlindGrid {
    /// Uniform priors on both candidate sets.
    pub fn uniform(images: Vec<Image>, kernels: Vec<Tensor>) -> Self {
        let image_log_prior = vec![-(images.len() as f64).ln(); images.len()];
        let kernel_log_prior = vec![-(kernels.len() as f64).ln(); kernels.len()];
        Self {
            images,
            image_log_prior,
            kernels,
            kernel_log_prior,
        }
    }

    /// Every image of `shape` whose entries are drawn from `levels`, in
    /// odometer order with the last pixel varying fastest.
    pub fn all_images(shape: &[usize], levels: &[f64]) -> Result<Vec<Image>> {
        let n: usize = shape.iter().product();
        let count = (levels.len() as u64).checked_pow(n as u32).unwrap_or(u64::MAX);
        if levels.is_empty() || count > DEFAULT_BUDGET {
            return Err(Error::Budget {
                needed: count,
                budget: DEFAULT_BUDGET,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut digits = vec![0usize; n];
        for _ in 0..count {
            out.push(Tensor::new(shape.to_vec(), digits.iter().map(|&d| levels[d]).collect())?);
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < levels.len() {
                    break;
                }
                *d = 0;
            }
        }
        Ok(out)
    }

    pub fn size(&self) -> u64 {
        self.images.len() as u64 * self.kernels.len() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.kernels.is_empty() {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        if self.images.len() != self.image_log_prior.len() || self.kernels.len() != self.kernel_log_prior.len() {
            return Err(Error::InvalidArgument("log-prior length differs from candidate count".into()));
        }
        let shape = self.images[0].shape();
        for x in &self.images {
            x.ensure_shape(shape)?;
        }
        Ok(())
    }

    /// Exact log-joint `log p(y | x, phi) + log p(x) + log p(phi)` up to an
    /// additive constant. With `sigma = 0` the likelihood is an indicator:
    /// zero on an exact match, `-inf` otherwise.
    pub fn log_joint(&self, ix: usize, ik: usize, y: &Image, sigma: f64) -> Result<f64> {
        let pred = blur(&self.images[ix], &self.kernels[ik])?;
        let prior = self.image_log_prior[ix] + self.kernel_log_prior[ik];
        let r2 = pred.sub(y)?.norm_sq();
        if sigma == 0.0 {
            return Ok(if r2 == 0.0 { prior } else { f64::NEG_INFINITY });
        }
        Ok(prior - r2 / (2.0 * sigma * sigma))
    }

    /// The full `|Phi| x |X|` log-joint table, kernel-major.
    pub fn log_joint_table(&self, y: &Image, sigma: f64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        (0..self.kernels.len())
            .map(|k| (0..self.images.len()).map(|i| self.log_joint(i, k, y, sigma)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlindMap {
    pub image_index: usize,
    pub kernel_index: usize,
    pub log_joint: f64,
}

/// Exhaustive maximiser of the log-joint over the grid.
///
/// Ties are broken towards the lowest kernel index, then the lowest image
/// index. Errors with [`Error::Budget`] when `|X| * |Phi| > budget`.
pub fn enumerate_blind_map(grid: &DiscreteBlindGrid, y: &Image, sigma: f64, budget: u64) -> Result<BlindMap> {
    if grid.size() > budget {
        return Err(Error::Budget {
            needed: grid.size(),
            budget,
        });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std {sigma} must be >= 0")));
    }
    grid.validate()?;
    let mut best = BlindMap {
        image_index: 0,
        kernel_index: 0,
        log_joint: f64::NEG_INFINITY,
    };
    for k in 0..grid.kernels.len() {
        for (i, x) in grid.images.iter().enumerate() {
            let pred = blur(x, &grid.kernels[k])?;
            let r2 = pred.sub(y)?.norm_sq();
            let lik = if sigma == 0.0 {
                if r2 == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                -r2 / (2.0 * sigma * sigma)
            };
            // same summation order as `log_joint`, so both agree bit for bit
            let lj = (grid.image_log_prior[i] + grid.kernel_log_prior[k]) + lik;
            if lj > best.log_joint {
                best = BlindMap {
                    image_index: i,
                    kernel_index: k,
                    log_joint: lj,
                };
            }
        }
    }
    if best.log_joint == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("no grid pair explains the measurement".into()));
    }
    Ok(best)
}

/// Index of the dictionary kernel closest in L2 to `phi` (lowest index on ties).
pub fn nearest_kernel(dictionary: &[Tensor], phi: &Tensor) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (i, k) in dictionary.iter().enumerate() {
        let d = k.sub(phi)?.norm_sq();
        if d < best.1 {
            best = (i, d);
        }
    }
    if dictionary.is_empty() {
        return Err(Error::InvalidArgument("empty kernel dictionary".into()));
    }
    Ok(best.0)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP`] when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak {peak} must be positive")));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Outcome of one built-in oracle self-check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Gradient descent on the negative log posterior, used as an independent
/// reference for the posterior mean.
pub fn posterior_mean_by_descent(
    mu: &DVector<f64>,
    sigma_prior: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: f64,
    y: &DVector<f64>,
    iters: usize,
) -> Result<DVector<f64>> {
    let p = sigma_prior
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("prior covariance".into()))?;
    let h = &p + a.transpose() * a / (sigma * sigma);
    let lmax = h.symmetric_eigenvalues().max();
    let step = 1.0 / lmax;
    let mut x = mu.clone();
    for _ in 0..iters {
        let g = &p * (&x - mu) - a.transpose() * (y - a * &x) / (sigma * sigma);
        x -= g * step;
    }
    Ok(x)
}

/// Duplicate brute-force MAP search written as plain nested loops over
/// raw slices, sharing no code with [`enumerate_blind_map`].
pub fn nested_loop_map(grid: &DiscreteBlindGrid, y: &Image, sigma: f64) -> (usize, usize) {
    let (_, h, w) = y.dims3().expect("image");
    let mut best = (0, 0);
    let mut best_val = f64::NEG_INFINITY;
    for k in 0..grid.kernels.len() {
        let ker = grid.kernels[k].data();
        let ks = grid.kernels[k].shape()[0];
        let r = (ks / 2) as isize;
        for i in 0..grid.images.len() {
            let x = grid.images[i].data();
            let c = x.len() / (h * w);
            let mut r2 = 0.0;
            for ch in 0..c {
                for py in 0..h as isize {
                    for px in 0..w as isize {
                        let mut acc = 0.0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let mut sy = py + dy;
                                let mut sx = px + dx;
                                if sy < 0 {
                                    sy = -sy;
                                }
                                if sy >= h as isize {
                                    sy = 2 * (h as isize - 1) - sy;
                                }
                                if sx < 0 {
                                    sx = -sx;
                                }
                                if sx >= w as isize {
                                    sx = 2 * (w as isize - 1) - sx;
                                }
                                let kv = ker[((dy + r) as usize) * ks + (dx + r) as usize];
                                acc += kv * x[ch * h * w + sy as usize * w + sx as usize];
                            }
                        }
                        let d = acc - y.data()[ch * h * w + py as usize * w + px as usize];
                        r2 += d * d;
                    }
                }
            }
            let v = grid.image_log_prior[i] + grid.kernel_log_prior[k] - r2 / (2.0 * sigma * sigma);
            if v > best_val {
                best_val = v;
                best = (i, k);
            }
        }
    }
    best
}

/// Runs the built-in oracle validations used by the `oracle-check` command.
pub fn self_check(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let one = DMatrix::from_element(1, 1, 1.0);
    let post = gaussian_posterior(&DVector::from_element(1, 0.0), &one, &one, 1.0, &DVector::from_element(1, 2.0))?;
    out.push(check(
        "gaussian_scalar_conjugacy",
        (post.mean[0] - 1.0).abs() < 1e-12 && (post.cov[(0, 0)] - 0.5).abs() < 1e-12,
        format!("mean={} cov={}", post.mean[0], post.cov[(0, 0)]),
    ));

    let n = 4;
    let mu = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let sig = random_spd(n, &mut rng);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let post = gaussian_posterior(&mu, &sig, &a, 0.7, &y)?;
    let gd = posterior_mean_by_descent(&mu, &sig, &a, 0.7, &y, 200_000)?;
    let err = (&post.mean - &gd).amax();
    out.push(check("gaussian_vs_descent", err < 1e-6, format!("max abs diff {err:e}")));

    let c = 3.7;
    let scaled = gaussian_posterior(&mu, &sig, &(&a * c), 0.7 * c, &(&y * c))?;
    let err = (&post.mean - &scaled.mean).amax();
    out.push(check("gaussian_rescale_invariance", err < 1e-9, format!("max abs diff {err:e}")));

    let id = DMatrix::identity(n, n);
    let tiny = gaussian_posterior(&mu, &sig, &id, 1e-6, &y)?;
    let err = (&tiny.mean - &y).amax();
    out.push(check("gaussian_identity_small_noise", err < 1e-6, format!("max abs diff {err:e}")));

    let images = DiscreteBlindGrid::all_images(&[1, 3, 3], &[0.0, 1.0])?;
    let kernels = vec![
        crate::operators::dirac_kernel(3),
        Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0])?,
    ];
    let grid = DiscreteBlindGrid::uniform(images, kernels);
    let xi = rng.gen_range(0..grid.images.len());
    let mut yv = blur(&grid.images[xi], &grid.kernels[1])?;
    for v in yv.data_mut() {
        *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let map = enumerate_blind_map(&grid, &yv, 0.1, DEFAULT_BUDGET)?;
    let dup = nested_loop_map(&grid, &yv, 0.1);
    out.push(check(
        "enumeration_vs_nested_loops",
        (map.image_index, map.kernel_index) == dup,
        format!("enumerate=({}, {}) nested={dup:?}", map.image_index, map.kernel_index),
    ));

    let mut spot_ok = true;
    for _ in 0..1000 {
        let i = rng.gen_range(0..grid.images.len());
        let k = rng.gen_range(0..grid.kernels.len());
        spot_ok &= grid.log_joint(i, k, &yv, 0.1)? <= map.log_joint;
    }
    out.push(check("enumeration_spot_check", spot_ok, "1000 random pairs".into()));

    let a_img = Tensor::filled(&[1, 4, 4], 0.2);
    let b_img = Tensor::filled(&[1, 4, 4], 0.3);
    let p = psnr(&a_img, &b_img, 1.0)?;
    let cap = psnr(&a_img, &a_img, 1.0)?;
    out.push(check(
        "psnr_examples",
        (p - 20.0).abs() < 1e-9 && cap == PSNR_CAP,
        format!("offset={p} identical={cap}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::dirac_kernel;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn self_check_passes_across_seeds() {
        for seed in 0..30 {
            for c in self_check(seed).unwrap() {
                assert!(c.passed, "seed {seed}: {} {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn map_score_equals_log_joint_of_map_pair() {
        let images = DiscreteBlindGrid::all_images(&[1, 2, 2], &[0.0, 0.5, 1.0]).unwrap();
        let grid = DiscreteBlindGrid::uniform(images, vec![dirac_kernel(3), crate::operators::gaussian_kernel(3, 0.7).unwrap()]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y = Tensor::from_fn(&[1, 2, 2], |_| rng.gen_range(0.0..1.0));
            let map = enumerate_blind_map(&grid, &y, 0.1, DEFAULT_BUDGET).unwrap();
            assert_eq!(map.log_joint, grid.log_joint(map.image_index, map.kernel_index, &y, 0.1).unwrap());
        }
    }

    #[test]
    fn scalar_conjugacy() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = gaussian_posterior(&DVector::zeros(1), &one, &one, 1.0, &DVector::from_element(1, 2.0)).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_operator_small_noise_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig = random_spd(5, &mut rng);
        let y = DVector::from_fn(5, |i, _| i as f64);
        let p = gaussian_posterior(&DVector::zeros(5), &sig, &DMatrix::identity(5, 5), 1e-7, &y).unwrap();
        assert!((&p.mean - &y).amax() < 1e-8);
        let p0 = gaussian_posterior(&DVector::zeros(5), &sig, &DMatrix::identity(5, 5), 0.0, &y).unwrap();
        assert!((&p0.mean - &y).amax() < 1e-10);
    }

    #[test]
    fn singular_system_is_reported() {
        let sig = DMatrix::identity(2, 2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = gaussian_posterior(&DVector::zeros(2), &sig, &a, 0.0, &DVector::zeros(2));
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn random_system_matches_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let sig = random_spd(4, &mut rng);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let p = gaussian_posterior(&mu, &sig, &a, 0.5, &y).unwrap();
        let gd = posterior_mean_by_descent(&mu, &sig, &a, 0.5, &y, 200_000).unwrap();
        assert!((&p.mean - &gd).amax() < 1e-6);
        let cov_sym = (&p.cov - p.cov.transpose()).amax();
        assert!(cov_sym < 1e-14);
        assert!(p.cov.symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn conv_matrix_matches_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = crate::operators::gaussian_kernel(3, 0.8).unwrap();
        let x = Tensor::randn(&[1, 5, 6], &mut rng);
        let m = conv_matrix(&k, &[1, 5, 6]).unwrap();
        let via = from_vector(&(&m * to_vector(&x)), &[1, 5, 6]).unwrap();
        assert!(via.distance(&blur(&x, &k).unwrap()).unwrap() < 1e-12);
    }

    fn small_grid() -> DiscreteBlindGrid {
        let images = DiscreteBlindGrid::all_images(&[1, 3, 3], &[0.0, 1.0]).unwrap();
        let kernels = vec![
            dirac_kernel(3),
            Tensor::new(vec![3, 3], vec![0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0, 0.25, 0.0]).unwrap(),
        ];
        DiscreteBlindGrid::uniform(images, kernels)
    }

    #[test]
    fn all_images_enumerates_binary_grid() {
        let g = small_grid();
        assert_eq!(g.images.len(), 512);
        assert_eq!(g.images[1].data()[8], 1.0);
        assert_eq!(g.images[511].sum(), 9.0);
    }

    #[test]
    fn noiseless_unique_generator_recovered() {
        let g = small_grid();
        let y = blur(&g.images[77], &g.kernels[1]).unwrap();
        let m = enumerate_blind_map(&g, &y, 0.0, DEFAULT_BUDGET).unwrap();
        assert_eq!((m.image_index, m.kernel_index), (77, 1));
    }

    #[test]
    fn identical_kernels_tie_to_lowest_index() {
        let images = DiscreteBlindGrid::all_images(&[1, 3, 3], &[0.0, 1.0]).unwrap();
        let k = dirac_kernel(3);
        let g = DiscreteBlindGrid::uniform(images, vec![k.clone(), k]);
        let y = g.images[300].clone();
        let m = enumerate_blind_map(&g, &y, 0.1, DEFAULT_BUDGET).unwrap();
        assert_eq!((m.image_index, m.kernel_index), (300, 0));
    }

    #[test]
    fn matches_nested_loop_duplicate() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let i = rng.gen_range(0..g.images.len());
            let k = rng.gen_range(0..2);
            let mut y = blur(&g.images[i], &g.kernels[k]).unwrap();
            for v in y.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let m = enumerate_blind_map(&g, &y, 0.1, DEFAULT_BUDGET).unwrap();
            assert_eq!((m.image_index, m.kernel_index), nested_loop_map(&g, &y, 0.1));
        }
    }

    #[test]
    fn budget_is_enforced() {
        let g = small_grid();
        let y = g.images[0].clone();
        assert!(matches!(enumerate_blind_map(&g, &y, 0.1, 100), Err(Error::Budget { .. })));
    }

    #[test]
    fn log_joint_table_dimensions() {
        let g = small_grid();
        let t = g.log_joint_table(&g.images[3], 0.1).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|r| r.len() == 512));
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::filled(&[1, 3, 3], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[2, 4, 4], &mut rng);
        let b = Tensor::randn(&[2, 4, 4], &mut rng);
        let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let mut mse = 0.0;
        for d in &diffs {
            mse += d * d;
        }
        mse /= diffs.len() as f64;
        let reference = 10.0 * (4.0 / mse).log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - reference).abs() < 1e-9);
    }

    #[test]
    fn self_check_passes() {
        for c in self_check(1).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    proptest! {
        #[test]
        fn posterior_mean_rescale_invariant(seed in 0u64..500, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let sig = random_spd(3, &mut rng);
            let a = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let p1 = gaussian_posterior(&mu, &sig, &a, 0.3, &y).unwrap();
            let p2 = gaussian_posterior(&mu, &sig, &(&a * c), 0.3 * c, &(&y * c)).unwrap();
            prop_assert!((&p1.mean - &p2.mean).amax() < 1e-9);
        }

        #[test]
        fn psnr_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[1, 3, 3], &mut rng);
            let b = Tensor::randn(&[1, 3, 3], &mut rng);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }
}
