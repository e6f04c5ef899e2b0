//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Parameters of all layers live in one flat vector so optimizer state,
//! target-network averaging and serialization work on plain slices. Batches
//! are row-major `batch x features`; the matrix products go through
//! `matrixmultiply`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const NET_MAGIC: &[u8; 4] = b"MTNN";
const ADAM_MAGIC: &[u8; 4] = b"MTAD";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// `C = A * B` (beta = 0) or `C += A * B` (beta = 1) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices whose extents cover every index
    // reachable with the given dimensions and strides; C is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Multi-layer perceptron. Layer `l` maps `sizes[l]` inputs to `sizes[l+1]`
/// outputs with weight matrix `out x in` (row-major) followed by the bias.
#[derive(Clone, Debug)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    offsets: Vec<usize>,
    /// Bumped whenever the parameters may change, so old caches are rejected.
    revision: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(other) && self.params == other.params
    }
}

/// Activations retained by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    /// `values[0]` is the input, `values[l + 1]` the post-activation output of layer `l`.
    values: Vec<Vec<f64>>,
    fingerprint: (usize, u64),
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))` for weights
    /// and biases. `last_scale` shrinks the final layer.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        last_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        let layers = net.num_layers();
        for l in 0..layers {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            let scale = if l + 1 == layers { last_scale } else { 1.0 };
            let (start, end) = (net.offsets[l], net.offsets[l + 1]);
            for p in &mut net.params[start..end] {
                *p = scale * rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "mlp: {} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape("mlp: zero-width layer".into()));
        }
        let mut offsets = vec![0];
        for w in sizes.windows(2) {
            let last = *offsets.last().unwrap();
            offsets.push(last + w[0] * w[1] + w[1]);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; *offsets.last().unwrap()],
            offsets,
            revision: 0,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.params
    }

    /// Weight block of layer `l` (`out x in`, row-major) and its bias.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let (w, b) = self.params[start..start + inp * out + out].split_at(inp * out);
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        self.revision += 1;
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        self.params[start..start + inp * out + out].split_at_mut(inp * out)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.activations == other.activations
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Forward pass on a row-major `batch x input_dim` block.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<ForwardCache> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp forward: expected {} x {} inputs, got {}",
                batch,
                self.input_dim(),
                x.len()
            )));
        }
        let mut values = Vec::with_capacity(self.num_layers() + 1);
        values.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let mut y = vec![0.0; batch * out];
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(b);
            }
            // Y (batch x out) += X (batch x in) * W^T (in x out)
            gemm(batch, inp, out, &values[l], inp, 1, w, 1, inp, 1.0, &mut y);
            match self.activations[l] {
                Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Linear => {}
            }
            values.push(y);
        }
        Ok(ForwardCache {
            batch,
            values,
            fingerprint: self.fingerprint(),
        })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut cache = self.forward(x, batch)?;
        Ok(cache.values.pop().unwrap_or_default())
    }

    /// Identifies this parameter buffer at its current revision.
    fn fingerprint(&self) -> (usize, u64) {
        (self.params.as_ptr() as usize, self.revision)
    }

    /// Reverse pass. Parameter gradients are accumulated into `grads`; the
    /// gradient with respect to the input is returned when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out_grad: &[f64],
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        if grads.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "mlp backward: grads {} (want {})",
                grads.len(),
                self.num_params()
            )));
        }
        self.reverse(cache, out_grad, Some(grads), want_input)
    }

    /// Gradient of `sum(out_grad * output)` with respect to the input only.
    pub fn input_gradient(&self, cache: &ForwardCache, out_grad: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reverse(cache, out_grad, None, true)?.unwrap_or_default())
    }

    fn reverse(
        &self,
        cache: &ForwardCache,
        out_grad: &[f64],
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let batch = cache.batch;
        if cache.values.len() != self.num_layers() + 1 || cache.fingerprint != self.fingerprint() {
            return Err(Error::Shape("mlp backward: cache does not belong to this network".into()));
        }
        if out_grad.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "mlp backward: out_grad {} (want {})",
                out_grad.len(),
                batch * self.output_dim()
            )));
        }
        let mut delta = out_grad.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let y = &cache.values[l + 1];
            match self.activations[l] {
                Activation::Relu => delta
                    .iter_mut()
                    .zip(y)
                    .for_each(|(d, &v)| if v <= 0.0 { *d = 0.0 }),
                Activation::Tanh => delta.iter_mut().zip(y).for_each(|(d, &v)| *d *= 1.0 - v * v),
                Activation::Linear => {}
            }
            if let Some(grads) = grads.as_deref_mut() {
                let x = &cache.values[l];
                let start = self.offsets[l];
                let (gw, gb) = grads[start..start + inp * out + out].split_at_mut(inp * out);
                // dW (out x in) += delta^T (out x batch) * X (batch x in)
                gemm(out, batch, inp, &delta, 1, out, x, inp, 1, 1.0, gw);
                for row in delta.chunks_exact(out) {
                    gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
            if l > 0 || want_input {
                let (w, _) = self.layer(l);
                let mut dx = vec![0.0; batch * inp];
                // dX (batch x in) = delta (batch x out) * W (out x in)
                gemm(batch, out, inp, &delta, out, 1, w, inp, 1, 0.0, &mut dx);
                delta = dx;
            }
        }
        Ok(if want_input { Some(delta) } else { None })
    }

    /// `self <- (1 - tau) self + tau source`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if !self.same_shape(source) {
            return Err(Error::Shape("polyak: network shapes differ".into()));
        }
        self.revision += 1;
        polyak_update(&mut self.params, &source.params, tau);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 12 * self.num_layers() + 8 * self.params.len());
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for l in 0..self.num_layers() {
            out.extend_from_slice(&(self.sizes[l] as u32).to_le_bytes());
            out.extend_from_slice(&(self.sizes[l + 1] as u32).to_le_bytes());
            out.extend_from_slice(&self.activations[l].code().to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != NET_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 64 {
            return Err(format!("implausible layer count {layers}"));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        let mut acts = Vec::with_capacity(layers);
        for l in 0..layers {
            let (inp, out) = (r.u32()? as usize, r.u32()? as usize);
            let act = Activation::from_code(r.u32()?).ok_or("unknown activation")?;
            if l == 0 {
                sizes.push(inp);
            } else if sizes[l] != inp {
                return Err(format!("layer {l} input {inp} != previous output {}", sizes[l]));
            }
            sizes.push(out);
            acts.push(act);
        }
        let mut net = Mlp::zeros(&sizes, &acts).map_err(|e| e.to_string())?;
        for p in net.params.iter_mut() {
            *p = r.f64()?;
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        if !net.all_finite() {
            return Err("non-finite parameters".into());
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::checkpoint(path, e))
    }
}

/// `target <- (1 - tau) target + tau source`, element-wise.
pub fn polyak_update(target: &mut [f64], source: &[f64], tau: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * s;
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated file".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    faults: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            faults: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates skipped because of non-finite gradients.
    pub fn faults(&self) -> u64 {
        self.faults
    }

    /// Applies one update. Returns `false` (and leaves everything untouched
    /// apart from the fault counter) when a gradient is not finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: state {} params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.faults += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / c1;
        let c2_sqrt = c2.sqrt();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() / c2_sqrt + self.eps);
        }
        Ok(true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 16 * self.m.len());
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.faults.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in [self.lr, self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != ADAM_MAGIC {
            return Err("bad magic".into());
        }
        if r.u32()? != FORMAT_VERSION {
            return Err("unsupported version".into());
        }
        let step = r.u64()?;
        let faults = r.u64()?;
        let n = r.u64()? as usize;
        if n > bytes.len() {
            return Err("truncated file".into());
        }
        let mut adam = Adam::new(n, r.f64()?);
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        adam.step = step;
        adam.faults = faults;
        for x in adam.m.iter_mut() {
            *x = r.f64()?;
        }
        for x in adam.v.iter_mut() {
            *x = r.f64()?;
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::checkpoint(path, e))
    }
}

/// `log(1 - tanh(z)^2)` without cancellation.
pub fn log_one_minus_tanh_sq(z: f64) -> f64 {
    // 1 - tanh^2 z = 4 / (e^z + e^-z)^2
    let a = z.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// One reparameterized draw from a tanh-squashed diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedSample {
    /// `bounds * tanh(mean + std * noise)`
    pub action: Vec<f64>,
    /// Log density of `action` (in the units of `bounds`).
    pub log_prob: f64,
    /// Standard-normal draw used.
    pub noise: Vec<f64>,
}

/// Log density of `bounds * tanh(mean + exp(log_std) * noise)` at that action.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], noise: &[f64], bounds: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let ls = log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
        let z = mean[i] + ls.exp() * noise[i];
        lp += -0.5 * noise[i] * noise[i] - ls - half_ln_2pi - log_one_minus_tanh_sq(z) - bounds[i].ln();
    }
    lp
}

pub fn squashed_from_noise(mean: &[f64], log_std: &[f64], noise: &[f64], bounds: &[f64]) -> SquashedSample {
    let action = (0..mean.len())
        .map(|i| {
            let ls = log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
            bounds[i] * (mean[i] + ls.exp() * noise[i]).tanh()
        })
        .collect();
    SquashedSample {
        action,
        log_prob: squashed_log_prob(mean, log_std, noise, bounds),
        noise: noise.to_vec(),
    }
}

/// Samples `bounds * tanh(mean + std * xi)`, `xi ~ N(0, I)`, with its log density.
pub fn squashed_gaussian_sample<R: Rng + ?Sized>(
    mean: &[f64],
    log_std: &[f64],
    rng: &mut R,
    bounds: &[f64],
) -> SquashedSample {
    let noise: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
    squashed_from_noise(mean, log_std, &noise, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], &[Activation::Relu, Activation::Relu]).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.0], 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[3, 3], &[Activation::Linear]).unwrap();
        let (w, _) = net.layer_mut(0);
        for i in 0..3 {
            w[4 * i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0, 7.0, 8.0, 9.0];
        assert_eq!(net.predict(&x, 2).unwrap(), x.to_vec());
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 2], &[Activation::Linear], 1.0, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let cache = net.forward(&x, 1).unwrap();
        let mut g = vec![0.0; net.num_params()];
        net.backward(&cache, &[1.0, 1.0], &mut g, false).unwrap();
        assert_eq!(&g[..6], &[0.3, -0.7, 1.1, 0.3, -0.7, 1.1]);
        assert_eq!(&g[6..], &[1.0, 1.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut net = Mlp::zeros(&[1, 1, 1], &[Activation::Relu, Activation::Linear]).unwrap();
        net.params_mut().copy_from_slice(&[1.0, -5.0, 1.0, 0.0]);
        let cache = net.forward(&[1.0], 1).unwrap();
        let mut g = vec![0.0; 4];
        let dx = net.backward(&cache, &[1.0], &mut g, true).unwrap().unwrap();
        assert_eq!(g[..2], [0.0, 0.0]);
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Mlp::new(&[2, 3, 1], &[Activation::Relu, Activation::Linear], 1.0, &mut rng).unwrap();
        let b = Mlp::new(&[2, 3, 1], &[Activation::Relu, Activation::Linear], 1.0, &mut rng).unwrap();
        let cache = a.forward(&[0.1, 0.2], 1).unwrap();
        let mut g = vec![0.0; b.num_params()];
        assert!(b.backward(&cache, &[1.0], &mut g, false).is_err());
    }

    #[test]
    fn cache_goes_stale_after_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[2, 1], &[Activation::Linear], 1.0, &mut rng).unwrap();
        let cache = net.forward(&[0.1, 0.2], 1).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(net.input_gradient(&cache, &[1.0]).is_err());
    }

    #[test]
    fn forward_shape_mismatch() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Linear]).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = Adam::new(3, 3e-4);
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let (lr, g) = (3e-4, 0.37);
        let mut p = vec![1.0];
        let mut adam = Adam::new(1, lr);
        adam.step(&mut p, &[g]).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let lr = 1e-3;
        let mut p = vec![0.0];
        let mut adam = Adam::new(1, lr);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam.step(&mut p, &[-2.5]).unwrap();
            last = p[0] - before;
        }
        assert!((last - lr).abs() < 1e-9, "{last}");
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut p = vec![1.0, 1.0];
        let mut adam = Adam::new(2, 0.1);
        assert!(!adam.step(&mut p, &[f64::NAN, 1.0]).unwrap());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.faults(), 1);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn polyak_limits() {
        let src = vec![1.0, 2.0];
        let mut t = vec![5.0, -5.0];
        polyak_update(&mut t, &src, 0.0);
        assert_eq!(t, vec![5.0, -5.0]);
        polyak_update(&mut t, &src, 1.0);
        assert_eq!(t, src);
    }

    #[test]
    fn serialization_roundtrip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[4, 6, 2], &[Activation::Relu, Activation::Tanh], 1.0, &mut rng).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), net);
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Mlp::from_bytes(&bad).is_err());

        let mut adam = Adam::new(net.num_params(), 3e-4);
        let mut p = net.params().to_vec();
        let g = vec![0.1; p.len()];
        adam.step(&mut p, &g).unwrap();
        assert_eq!(Adam::from_bytes(&adam.to_bytes()).unwrap(), adam);
    }

    #[test]
    fn squash_degenerate_std_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = [0.3, -1.2];
        let s = squashed_gaussian_sample(&mean, &[-20.0, -20.0], &mut rng, &[4.0, 20.0]);
        assert!((s.action[0] - 4.0 * 0.3f64.tanh()).abs() < 1e-7);
        assert!((s.action[1] - 20.0 * (-1.2f64).tanh()).abs() < 1e-7);
    }

    #[test]
    fn squash_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = [4.0, 4.0, 4.0, 20.0];
        for _ in 0..2000 {
            let s = squashed_gaussian_sample(&[0.0; 4], &[2.0; 4], &mut rng, &bounds);
            for (a, b) in s.action.iter().zip(bounds) {
                assert!(a.abs() <= b);
            }
            assert!(s.log_prob.is_finite());
        }
    }

    #[test]
    fn log_one_minus_tanh_sq_is_accurate() {
        for z in [-30.0, -3.0, -0.1, 0.0, 0.5, 4.0, 25.0] {
            let direct = (1.0 - f64::tanh(z).powi(2)).ln();
            let stable = log_one_minus_tanh_sq(z);
            if z.abs() < 5.0 {
                assert!((direct - stable).abs() < 1e-12, "{z}");
            } else {
                assert!(stable.is_finite());
            }
        }
    }
}
