//! Differentiable layers and the upsampling generator built from them.
//!
//! Every layer has an explicit forward that records what its backward needs
//! in a cache, and an explicit backward producing exact reverse-mode
//! gradients. The generator for an `S x S` output (`S` in {32, 64}) is:
//!
//! ```text
//! z [N,d] -> linear -> [N, base, 4, 4]
//!         -> { convT(k4,s2,p1) -> batchnorm -> relu }  x  (log2(S/4) - 1)
//!         -> convT(k4,s2,p1) -> tanh -> [N, C, S, S]
//! ```
//!
//! Channel widths halve per block from `base` (default `8·S`).

use crate::conv::{conv2d, conv_transpose2d, conv_transpose2d_kernel_grad};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered, named parameter tensors of one generator, including the
/// batch-norm running statistics (which carry zero gradients).
///
/// The version counter increments on every mutation; layer caches remember
/// the version they were built against so a backward pass against updated
/// parameters is rejected instead of silently returning wrong gradients.
#[derive(Clone, Debug)]
pub struct GeneratorParams<T> {
    entries: Vec<(String, Tensor<T>)>,
    version: u64,
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn new() -> Self {
        GeneratorParams {
            entries: Vec::new(),
            version: 0,
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    /// Mutable access; bumps the version so outstanding caches go stale.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.version += 1;
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Applies `f` to every tensor; bumps the version once.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        self.version += 1;
        for (n, t) in &mut self.entries {
            f(n, t);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Same names and shapes, all zeros. This is the gradient container.
    pub fn zeros_like(&self) -> Self {
        GeneratorParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.zeros_like()))
                .collect(),
            version: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
            version: 0,
        }
    }
}

impl<T: Scalar> Default for GeneratorParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Standalone batch-norm state for use outside the generator.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

/// What the batch-norm backward needs from its forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    mode: Mode,
    input: Tensor<T>,
    gamma: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    epsilon: f64,
}

/// Normalizes per channel over `N,H,W`.
///
/// Train mode uses batch statistics and updates the running estimates with
/// the configured momentum (running variance uses the unbiased estimate);
/// eval mode normalizes by the running statistics and mutates nothing.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let channels = state.gamma.numel();
    bn_forward_impl(
        x,
        state.gamma.data(),
        state.beta.data(),
        state.running_mean.data_mut(),
        state.running_var.data_mut(),
        state.epsilon,
        state.momentum,
        mode,
        channels,
    )
}

/// Gradients of [`batchnorm_forward`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            left: grad_out.shape().to_vec(),
            right: cache.input.shape().to_vec(),
        });
    }
    let s = cache.input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut grad_x = vec![T::zero(); cache.input.numel()];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let xd = cache.input.data();
    let gd = grad_out.data();
    for ch in 0..c {
        let mean = cache.mean[ch];
        let istd = 1.0 / (cache.var[ch] + cache.epsilon).sqrt();
        let gamma = cache.gamma[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let dy = gd[base + p].to_f64();
                let xhat = (xd[base + p].to_f64() - mean) * istd;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        grad_gamma[ch] = T::from_f64(sum_dy_xhat);
        grad_beta[ch] = T::from_f64(sum_dy);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let dy = gd[base + p].to_f64();
                let xhat = (xd[base + p].to_f64() - mean) * istd;
                let dx = match cache.mode {
                    // batch statistics depend on x, so the mean/variance
                    // paths feed back into dx
                    Mode::Train => {
                        gamma * istd * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                    }
                    // running statistics are constants
                    Mode::Eval => gamma * istd * dy,
                };
                grad_x[base + p] = T::from_f64(dx);
            }
        }
    }
    Ok((
        Tensor::from_vec(s, grad_x)?,
        Tensor::from_vec(&[c], grad_gamma)?,
        Tensor::from_vec(&[c], grad_beta)?,
    ))
}

#[allow(clippy::too_many_arguments)]
fn bn_forward_impl<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    epsilon: f64,
    momentum: f64,
    mode: Mode,
    channels: usize,
) -> Result<(Tensor<T>, BnCache<T>)> {
    if x.rank() != 4 || x.shape()[1] != channels {
        return Err(Error::InvalidShape {
            op: "batchnorm_forward",
            shape: x.shape().to_vec(),
            reason: "expected [N,C,H,W] with C matching the state",
        });
    }
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let m = n * plane;
    if mode == Mode::Train && m < 2 {
        return Err(Error::InvalidArgument(
            "batch-norm train mode needs at least two values per channel".into(),
        ));
    }
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for p in 0..plane {
                        sum += xd[base + p].to_f64();
                    }
                }
                let mu = sum / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for p in 0..plane {
                        let d = xd[base + p].to_f64() - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
                let unbiased = sq / (m as f64 - 1.0);
                running_mean[ch] = T::from_f64(
                    (1.0 - momentum) * running_mean[ch].to_f64() + momentum * mu,
                );
                running_var[ch] = T::from_f64(
                    (1.0 - momentum) * running_var[ch].to_f64() + momentum * unbiased,
                );
            }
        }
        Mode::Eval => {
            for ch in 0..c {
                mean[ch] = running_mean[ch].to_f64();
                var[ch] = running_var[ch].to_f64();
            }
        }
    }
    let mut out = vec![T::zero(); x.numel()];
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + epsilon).sqrt();
        let g = gamma[ch].to_f64();
        let b_ = beta[ch].to_f64();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let xhat = (xd[base + p].to_f64() - mean[ch]) * istd;
                out[base + p] = T::from_f64(g * xhat + b_);
            }
        }
    }
    let cache = BnCache {
        mode,
        input: x.clone(),
        gamma: gamma.iter().map(|v| v.to_f64()).collect(),
        mean,
        var,
        epsilon,
    };
    Ok((Tensor::from_vec(s, out)?, cache))
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `grad_in = grad_out * [input > 0]`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.mul(&input.map(|v| if v > T::zero() { T::one() } else { T::zero() }))
}

pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Backward through tanh given the forward *output*.
pub fn tanh_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.mul(&output.map(|y| T::one() - y * y))
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Architecture hyper-parameters; the parameter shapes all derive from this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
}

impl GenConfig {
    pub fn new(latent_dim: usize, image_size: usize, channels: usize) -> Result<Self> {
        let base_width = 8 * image_size;
        Self::with_base_width(latent_dim, image_size, channels, base_width)
    }

    pub fn with_base_width(
        latent_dim: usize,
        image_size: usize,
        channels: usize,
        base_width: usize,
    ) -> Result<Self> {
        if image_size != 32 && image_size != 64 {
            return Err(Error::InvalidArgument(format!(
                "image size must be 32 or 64, got {image_size}"
            )));
        }
        if latent_dim == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "latent dimension and channel count must be positive".into(),
            ));
        }
        let blocks = Self::blocks_for(image_size);
        if base_width >> blocks == 0 {
            return Err(Error::InvalidArgument(format!(
                "base width {base_width} too small for {blocks} halving blocks"
            )));
        }
        Ok(GenConfig {
            latent_dim,
            image_size,
            channels,
            base_width,
        })
    }

    fn blocks_for(image_size: usize) -> usize {
        // upsamplings from 4x4 to S, minus the output layer
        (usize::BITS - (image_size / 4).leading_zeros()) as usize - 2
    }

    pub fn num_blocks(&self) -> usize {
        Self::blocks_for(self.image_size)
    }
}

/// The generator's layer structure. Parameters live in [`GeneratorParams`];
/// this struct only knows shapes and wiring.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GenConfig,
    widths: Vec<usize>,
}

struct BlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    relu_in: Tensor<T>,
}

/// Saved activations from one generator forward pass, single-use.
pub struct LayerCache<T> {
    params_version: u64,
    mode: Mode,
    z: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    output_in: Tensor<T>,
    image: Tensor<T>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn image(&self) -> &Tensor<T> {
        &self.image
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Self {
        let blocks = cfg.num_blocks();
        // stem width, then each block's output width; the last entry feeds
        // the output convolution
        let widths = (0..=blocks).map(|i| cfg.base_width >> i).collect();
        Generator { cfg, widths }
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn stem_name() -> &'static str {
        "stem.weight"
    }

    /// Fresh parameters: weights from `N(0, 0.02)`, batch-norm at identity.
    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> GeneratorParams<T> {
        let mut params = GeneratorParams::new();
        let std = T::from_f64(WEIGHT_INIT_STD);
        let mut normal = |shape: &[usize]| crate::rng::rng_normal::<T>(rng, shape).scale(std);
        params
            .push(
                Self::stem_name(),
                normal(&[self.cfg.latent_dim, self.widths[0] * 16]),
            )
            .expect("fresh name");
        for b in 0..self.cfg.num_blocks() {
            let (cin, cout) = (self.widths[b], self.widths[b + 1]);
            params
                .push(&format!("block{b}.convt.weight"), normal(&[cin, cout, 4, 4]))
                .expect("fresh name");
            params
                .push(&format!("block{b}.bn.gamma"), Tensor::ones(&[cout]))
                .expect("fresh name");
            params
                .push(&format!("block{b}.bn.beta"), Tensor::zeros(&[cout]))
                .expect("fresh name");
            params
                .push(&format!("block{b}.bn.running_mean"), Tensor::zeros(&[cout]))
                .expect("fresh name");
            params
                .push(&format!("block{b}.bn.running_var"), Tensor::ones(&[cout]))
                .expect("fresh name");
        }
        let last = *self.widths.last().expect("at least one width");
        params
            .push(
                "output.convt.weight",
                normal(&[last, self.cfg.channels, 4, 4]),
            )
            .expect("fresh name");
        params
    }

    /// Checks that `params` carries exactly the tensors this architecture
    /// expects, with consistent shapes and positive running variances.
    pub fn validate_params<T: Scalar>(&self, params: &GeneratorParams<T>) -> Result<()> {
        let mut rng = Rng::new(0);
        let reference = self.init_params::<T>(&mut rng);
        if params.len() != reference.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, tensor) in reference.iter() {
            let found = params.get(name)?;
            if found.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "validate_params",
                    left: found.shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            if name.ends_with("running_var") && found.data().iter().any(|&v| v <= T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be strictly positive"
                )));
            }
        }
        Ok(())
    }

    /// Runs the generator. Train mode normalizes by batch statistics and
    /// updates the running estimates in `params`; eval mode is a pure
    /// function of `(params, z)`.
    pub fn forward<T: Scalar>(
        &self,
        params: &mut GeneratorParams<T>,
        z: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        if z.rank() != 2 || z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::InvalidShape {
                op: "generator_forward",
                shape: z.shape().to_vec(),
                reason: "latent batch must be [N,d] with d matching the generator",
            });
        }
        let n = z.shape()[0];
        let stem = params.get(Self::stem_name())?;
        let mut x = z
            .matmul(stem)?
            .reshape(&[n, self.widths[0], 4, 4])?;
        let mut blocks = Vec::with_capacity(self.cfg.num_blocks());
        for b in 0..self.cfg.num_blocks() {
            let cout = self.widths[b + 1];
            let kernel = params.get(&format!("block{b}.convt.weight"))?.clone();
            let gamma = params.get(&format!("block{b}.bn.gamma"))?.clone();
            let beta = params.get(&format!("block{b}.bn.beta"))?.clone();
            let pre_bn = conv_transpose2d(&x, &kernel, 2, 1)?;
            let (normed, bn_cache) = match mode {
                Mode::Train => {
                    // split borrows: running stats are updated in place
                    let mut rm = params.get(&format!("block{b}.bn.running_mean"))?.clone();
                    let mut rv = params.get(&format!("block{b}.bn.running_var"))?.clone();
                    let out = bn_forward_impl(
                        &pre_bn,
                        gamma.data(),
                        beta.data(),
                        rm.data_mut(),
                        rv.data_mut(),
                        BN_EPSILON,
                        BN_MOMENTUM,
                        mode,
                        cout,
                    )?;
                    *params.get_mut(&format!("block{b}.bn.running_mean"))? = rm;
                    *params.get_mut(&format!("block{b}.bn.running_var"))? = rv;
                    out
                }
                Mode::Eval => {
                    let mut rm = params.get(&format!("block{b}.bn.running_mean"))?.clone();
                    let mut rv = params.get(&format!("block{b}.bn.running_var"))?.clone();
                    bn_forward_impl(
                        &pre_bn,
                        gamma.data(),
                        beta.data(),
                        rm.data_mut(),
                        rv.data_mut(),
                        BN_EPSILON,
                        BN_MOMENTUM,
                        mode,
                        cout,
                    )?
                }
            };
            let activated = relu(&normed);
            blocks.push(BlockCache {
                input: x,
                bn: bn_cache,
                relu_in: normed,
            });
            x = activated;
        }
        let out_kernel = params.get("output.convt.weight")?;
        let pre_tanh = conv_transpose2d(&x, out_kernel, 2, 1)?;
        let image = tanh_forward(&pre_tanh);
        let cache = LayerCache {
            params_version: params.version(),
            mode,
            z: z.clone(),
            blocks,
            output_in: x,
            image: image.clone(),
        };
        Ok((image, cache))
    }

    /// Exact reverse-mode gradients with respect to every parameter and to
    /// `z`. Running-statistic entries get zero gradients.
    pub fn backward<T: Scalar>(
        &self,
        params: &GeneratorParams<T>,
        cache: &LayerCache<T>,
        grad_images: &Tensor<T>,
    ) -> Result<(GeneratorParams<T>, Tensor<T>)> {
        let (grads, grad_z) = self.backward_impl(params, cache, grad_images, true)?;
        Ok((grads.expect("param grads requested"), grad_z))
    }

    /// Gradient with respect to `z` only; skips the kernel-gradient work.
    pub fn backward_codes<T: Scalar>(
        &self,
        params: &GeneratorParams<T>,
        cache: &LayerCache<T>,
        grad_images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (_, grad_z) = self.backward_impl(params, cache, grad_images, false)?;
        Ok(grad_z)
    }

    fn backward_impl<T: Scalar>(
        &self,
        params: &GeneratorParams<T>,
        cache: &LayerCache<T>,
        grad_images: &Tensor<T>,
        want_param_grads: bool,
    ) -> Result<(Option<GeneratorParams<T>>, Tensor<T>)> {
        if cache.params_version != params.version() {
            return Err(Error::StaleCache {
                expected: cache.params_version,
                found: params.version(),
            });
        }
        if grad_images.shape() != cache.image.shape() {
            return Err(Error::ShapeMismatch {
                op: "generator_backward",
                left: grad_images.shape().to_vec(),
                right: cache.image.shape().to_vec(),
            });
        }
        let mut grads = if want_param_grads {
            Some(params.zeros_like())
        } else {
            None
        };
        let dy = tanh_backward(grad_images, &cache.image)?;
        let out_kernel = params.get("output.convt.weight")?;
        if let Some(g) = grads.as_mut() {
            *g.get_mut("output.convt.weight")? =
                conv_transpose2d_kernel_grad(&cache.output_in, &dy, out_kernel.shape(), 2, 1)?;
        }
        let mut dx = conv2d(&dy, out_kernel, 2, 1)?;
        for b in (0..self.cfg.num_blocks()).rev() {
            let du = relu_backward(&dx, &cache.blocks[b].relu_in)?;
            let (dt, dgamma, dbeta) = batchnorm_backward(&du, &cache.blocks[b].bn)?;
            let kernel = params.get(&format!("block{b}.convt.weight"))?;
            if let Some(g) = grads.as_mut() {
                *g.get_mut(&format!("block{b}.bn.gamma"))? = dgamma;
                *g.get_mut(&format!("block{b}.bn.beta"))? = dbeta;
                *g.get_mut(&format!("block{b}.convt.weight"))? = conv_transpose2d_kernel_grad(
                    &cache.blocks[b].input,
                    &dt,
                    kernel.shape(),
                    2,
                    1,
                )?;
            }
            dx = conv2d(&dt, kernel, 2, 1)?;
        }
        let n = cache.z.shape()[0];
        let dh = dx.reshape(&[n, self.widths[0] * 16])?;
        let stem = params.get(Self::stem_name())?;
        if let Some(g) = grads.as_mut() {
            *g.get_mut(Self::stem_name())? = cache.z.transpose2()?.matmul(&dh)?;
        }
        let grad_z = dh.matmul(&stem.transpose2()?)?;
        if let Some(g) = grads.as_mut() {
            g.version = 0;
        }
        Ok((grads, grad_z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gen() -> (Generator, GeneratorParams<f32>) {
        let cfg = GenConfig::with_base_width(3, 32, 1, 8).unwrap();
        let gen = Generator::new(cfg);
        let params = gen.init_params::<f32>(&mut Rng::new(5));
        (gen, params)
    }

    #[test]
    fn output_shape_and_range() {
        let (gen, mut params) = tiny_gen();
        let z = crate::rng::rng_normal::<f32>(&mut Rng::new(9), &[2, 3]);
        let (img, _) = gen.forward(&mut params, &z, Mode::Eval).unwrap();
        assert_eq!(img.shape(), &[2, 1, 32, 32]);
        assert!(img.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn zero_latent_gives_finite_image() {
        let (gen, mut params) = tiny_gen();
        let z = Tensor::<f32>::zeros(&[1, 3]);
        let (img, _) = gen.forward(&mut params, &z, Mode::Eval).unwrap();
        assert!(img.is_finite());
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn identical_latents_identical_images() {
        let (gen, mut params) = tiny_gen();
        let mut z = crate::rng::rng_normal::<f32>(&mut Rng::new(2), &[1, 3]).into_data();
        z.extend_from_slice(&z.clone());
        let z = Tensor::from_vec(&[2, 3], z).unwrap();
        let (img, _) = gen.forward(&mut params, &z, Mode::Eval).unwrap();
        let per = img.numel() / 2;
        assert_eq!(&img.data()[..per], &img.data()[per..]);
    }

    #[test]
    fn latent_dim_mismatch_rejected() {
        let (gen, mut params) = tiny_gen();
        let z = Tensor::<f32>::zeros(&[1, 5]);
        assert!(gen.forward(&mut params, &z, Mode::Eval).is_err());
    }

    #[test]
    fn zero_grad_images_zero_grads() {
        let (gen, mut params) = tiny_gen();
        let z = crate::rng::rng_normal::<f32>(&mut Rng::new(4), &[2, 3]);
        let (img, cache) = gen.forward(&mut params, &z, Mode::Train).unwrap();
        let (gp, gz) = gen.backward(&params, &cache, &img.zeros_like()).unwrap();
        assert!(gz.data().iter().all(|&v| v == 0.0));
        for (_, t) in gp.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let (gen, mut params) = tiny_gen();
        let z = Tensor::<f32>::zeros(&[1, 3]);
        let (img, cache) = gen.forward(&mut params, &z, Mode::Eval).unwrap();
        params.get_mut("output.convt.weight").unwrap();
        assert!(matches!(
            gen.backward(&params, &cache, &img.zeros_like()),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn bn_train_normalizes() {
        let x = crate::rng::rng_normal::<f64>(&mut Rng::new(3), &[4, 2, 3, 3])
            .scale(2.5)
            .map(|v| v + 0.7);
        let mut state = BatchNormState::<f64>::new(2);
        let (y, _) = batchnorm_forward(&x, &mut state, Mode::Train).unwrap();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for n in 0..4 {
                let base = (n * 2 + ch) * 9;
                vals.extend_from_slice(&y.data()[base..base + 9]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel var {v}");
        }
    }

    #[test]
    fn bn_constant_channel_collapses_to_beta() {
        let x = Tensor::<f64>::full(&[3, 1, 2, 2], 4.2);
        let mut state = BatchNormState::<f64>::new(1);
        state.beta = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut state, Mode::Train).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_eval_identity_at_unit_stats() {
        let x = crate::rng::rng_normal::<f64>(&mut Rng::new(8), &[2, 3, 4, 4]);
        let mut state = BatchNormState::<f64>::new(3);
        let (y, _) = batchnorm_forward(&x, &mut state, Mode::Eval).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bn_degenerate_batch_rejected() {
        let x = Tensor::<f32>::ones(&[1, 2, 1, 1]);
        let mut state = BatchNormState::<f32>::new(2);
        assert!(batchnorm_forward(&x, &mut state, Mode::Train).is_err());
        assert!(batchnorm_forward(&x, &mut state, Mode::Eval).is_ok());
    }
}
