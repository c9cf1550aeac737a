//! Concise articulatory representations: a VQ-VAE over flattened coordination
//! vectors.
//!
//! The encoder maps a `D*C*C` vector to `M` latent rows of width `E`; each row
//! is snapped to its nearest codebook entry and the decoder reconstructs the
//! input from the quantized rows. Gradients cross the quantizer unchanged
//! (straight-through), the codebook follows the codebook term, and the encoder
//! is additionally pulled toward its codes by the commitment term.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    decisions, max_relative_error, piecewise_gradient_pair, Activation, Adam, LayerCache, LayerSpec, Param, Parameterized,
    Sequential,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartConfig {
    /// Codes per segment (`M`).
    pub codes_per_segment: usize,
    /// Width of each code (`E`).
    pub code_dim: usize,
    /// Codebook entries (`K`).
    pub codebook_size: usize,
    pub hidden: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig {
            codes_per_segment: 4,
            code_dim: 32,
            codebook_size: 64,
            hidden: 256,
            beta: 0.25,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl CartConfig {
    pub fn latent_len(&self) -> usize {
        self.codes_per_segment * self.code_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.codes_per_segment == 0 || self.code_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("cart dimensions and batch size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid beta {} or lr {}", self.beta, self.lr)));
        }
        Ok(())
    }
}

/// `K x E` code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() < 2 || entries.ncols() == 0 {
            return Err(Error::Validation(format!("codebook of shape {:?} too small", entries.dim())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("codebook has non-finite entries".into()));
        }
        Ok(Codebook { entries })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Nearest codebook entry (squared L2, ties to the lowest index) for each row of `z_e`.
pub fn quantize(z_e: ArrayView2<'_, f64>, codebook: ArrayView2<'_, f64>) -> Result<(Vec<usize>, Array2<f64>)> {
    if codebook.nrows() == 0 {
        return Err(Error::Validation("empty codebook".into()));
    }
    if z_e.ncols() != codebook.ncols() {
        return Err(Error::Shape(format!(
            "latent width {} differs from code width {}",
            z_e.ncols(),
            codebook.ncols()
        )));
    }
    if z_e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite encoder output".into()));
    }
    let mut indices = Vec::with_capacity(z_e.nrows());
    let mut z_q = Array2::zeros(z_e.raw_dim());
    for (m, row) in z_e.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, code) in codebook.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(code.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        indices.push(best);
        z_q.row_mut(m).assign(&codebook.row(best));
    }
    Ok((indices, z_q))
}

/// Components of the three-term VQ-VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

/// `|x - x_hat|^2 / N + |sg(z_e) - z_q|^2 / (M E) + beta |z_e - sg(z_q)|^2 / (M E)`.
///
/// The stop-gradients only matter for differentiation; as values the last two
/// terms share the same distance.
pub fn vqvae_loss(
    x: &[f64],
    x_hat: &[f64],
    z_e: ArrayView2<'_, f64>,
    z_q: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<VqLoss> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::Shape(format!("reconstruction of {} vs input {}", x_hat.len(), x.len())));
    }
    if z_e.dim() != z_q.dim() || z_e.is_empty() {
        return Err(Error::Shape(format!("z_e {:?} vs z_q {:?}", z_e.dim(), z_q.dim())));
    }
    let reconstruction = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let dist = z_e.iter().zip(z_q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z_e.len() as f64;
    Ok(VqLoss {
        reconstruction,
        codebook: dist,
        commitment: beta * dist,
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CartTrace {
    pub epoch_loss: Vec<VqLoss>,
    pub reseeded_codes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartModel {
    pub input_dim: usize,
    pub config: CartConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    /// `K x E`, flattened row-major.
    pub codebook: Param,
    pub trace: CartTrace,
}

/// Intermediate values from one forward pass.
#[derive(Debug, Clone)]
pub struct CartForward {
    pub z_e: Array2<f64>,
    pub indices: Vec<usize>,
    pub z_q: Array2<f64>,
    pub x_hat: Array1<f64>,
    pub loss: VqLoss,
    enc_caches: Vec<LayerCache>,
    dec_caches: Vec<LayerCache>,
}

impl CartModel {
    /// Fresh model: he-uniform linear layers, codebook uniform in `±1/K`.
    pub fn init(input_dim: usize, config: &CartConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("cart input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let latent = config.latent_len();
        let encoder = Sequential::from_specs(
            "encoder",
            &[
                LayerSpec::Linear {
                    in_features: input_dim,
                    out_features: config.hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: config.hidden,
                    out_features: latent,
                },
            ],
            &mut rng,
        );
        let decoder = Sequential::from_specs(
            "decoder",
            &[
                LayerSpec::Linear {
                    in_features: latent,
                    out_features: config.hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: config.hidden,
                    out_features: input_dim,
                },
            ],
            &mut rng,
        );
        let k = config.codebook_size;
        let bound = 1.0 / k as f64;
        let mut codebook = Param::zeros("codebook", vec![k, config.code_dim]);
        loop {
            for v in &mut codebook.value {
                *v = rng.gen_range(-bound..bound) as f32 as f64;
            }
            let rows: Vec<&[f64]> = codebook.value.chunks(config.code_dim).collect();
            let distinct = (0..k).all(|a| (a + 1..k).all(|b| rows[a] != rows[b]));
            if distinct {
                break;
            }
        }
        Ok(CartModel {
            input_dim,
            config: config.clone(),
            encoder,
            decoder,
            codebook,
            trace: CartTrace::default(),
        })
    }

    pub fn codebook_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.config.codebook_size, self.config.code_dim), &self.codebook.value)
            .expect("codebook shape")
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.codebook_view().to_owned())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("cart expects {} inputs, got {}", self.input_dim, x.len())));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let z = self.encoder.infer(Activation::Flat(Array1::from(x.to_vec())))?.into_flat()?;
        Ok(z
            .into_shape_with_order((self.config.codes_per_segment, self.config.code_dim))
            .expect("encoder width"))
    }

    pub fn decode(&self, z_q: &Array1<f64>) -> Result<Array1<f64>> {
        self.decoder.infer(Activation::Flat(z_q.clone()))?.into_flat()
    }

    pub fn forward(&self, x: &[f64]) -> Result<CartForward> {
        self.check_input(x)?;
        let (z, enc_caches) = self.encoder.forward(Activation::Flat(Array1::from(x.to_vec())))?;
        let z_e = z
            .into_flat()?
            .into_shape_with_order((self.config.codes_per_segment, self.config.code_dim))
            .expect("encoder width");
        let (indices, z_q) = quantize(z_e.view(), self.codebook_view())?;
        let flat_q = Array1::from(z_q.iter().copied().collect::<Vec<_>>());
        let (x_hat, dec_caches) = self.decoder.forward(Activation::Flat(flat_q))?;
        let x_hat = x_hat.into_flat()?;
        let loss = vqvae_loss(x, x_hat.as_slice().expect("contiguous"), z_e.view(), z_q.view(), self.config.beta)?;
        Ok(CartForward {
            z_e,
            indices,
            z_q,
            x_hat,
            loss,
            enc_caches,
            dec_caches,
        })
    }

    /// Accumulates `weight`-scaled gradients of the full objective.
    ///
    /// Returns the gradient that reached the decoder input (the quantized
    /// latent); the same vector is handed to the encoder output unchanged.
    pub fn backward(&mut self, x: &[f64], fwd: &CartForward, weight: f64) -> Result<Array1<f64>> {
        let n = x.len() as f64;
        let me = fwd.z_e.len() as f64;
        let g_xhat: Array1<f64> = fwd
            .x_hat
            .iter()
            .zip(x)
            .map(|(xh, xv)| weight * 2.0 * (xh - xv) / n)
            .collect();
        let g_zq = self.decoder.backward(&fwd.dec_caches, Activation::Flat(g_xhat))?.into_flat()?;

        let e = self.config.code_dim;
        for (m, &k) in fwd.indices.iter().enumerate() {
            for d in 0..e {
                self.codebook.grad[k * e + d] += weight * 2.0 * (fwd.z_q[[m, d]] - fwd.z_e[[m, d]]) / me;
            }
        }
        let beta = self.config.beta;
        let g_ze: Array1<f64> = g_zq
            .iter()
            .zip(fwd.z_e.iter().zip(fwd.z_q.iter()))
            .map(|(g, (ze, zq))| g + weight * beta * 2.0 * (ze - zq) / me)
            .collect();
        self.encoder.backward(&fwd.enc_caches, Activation::Flat(g_ze))?;
        Ok(g_zq)
    }
}

impl CartModel {
    /// Checks the straight-through gradients of [`CartModel::backward`] against
    /// central differences of the surrogate objective in which the quantizer's
    /// choices and every stop-gradient operand are frozen at the current point.
    pub fn straight_through_grad_check(&mut self, x: &[f64], eps: f64) -> Result<f64> {
        let reference = self.forward(x)?;
        let (m, e) = (self.config.codes_per_segment, self.config.code_dim);
        let z_e0 = reference.z_e.clone();
        let q0 = reference.z_q.clone();
        let idx = reference.indices.clone();
        let beta = self.config.beta;
        let surrogate = |model: &CartModel| -> Result<(f64, Vec<usize>)> {
            let (z, enc) = model.encoder.forward(Activation::Flat(Array1::from(x.to_vec())))?;
            let z_e = z.into_flat()?;
            let q: Vec<f64> = idx
                .iter()
                .flat_map(|&k| model.codebook.value[k * e..(k + 1) * e].iter().copied())
                .collect();
            let dec_in: Array1<f64> = z_e
                .iter()
                .zip(q0.iter().zip(z_e0.iter()))
                .map(|(z, (q0, z0))| z + (q0 - z0))
                .collect();
            let (x_hat, dec) = model.decoder.forward(Activation::Flat(dec_in))?;
            let x_hat = x_hat.into_flat()?;
            let me = (m * e) as f64;
            let recon = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
            let cb = z_e0.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / me;
            let commit = z_e.iter().zip(q0.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / me;
            let mut d = decisions(&enc);
            d.extend(decisions(&dec));
            Ok((recon + cb + beta * commit, d))
        };
        let backward = |model: &mut CartModel| -> Result<()> { model.backward(x, &reference, 1.0).map(|_| ()) };
        let (a, n) = piecewise_gradient_pair(self, surrogate, backward, eps)?;
        Ok(max_relative_error(&a, &n))
    }
}

impl Parameterized for CartModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.push(&self.codebook);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(&mut self.codebook);
        p
    }
}

/// Trains a VQ-VAE on the rows of `vectors` (`N x D*C*C`).
///
/// Codes left unused for a whole epoch are re-seeded to a randomly chosen
/// encoder output from that epoch.
pub fn train_cart(vectors: ArrayView2<'_, f32>, config: &CartConfig) -> Result<CartModel> {
    let (n, dim) = vectors.dim();
    if n == 0 {
        return Err(Error::Validation("no training vectors for cart".into()));
    }
    let mut model = CartModel::init(dim, config)?;
    let data: Vec<Vec<f64>> = vectors.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ca27);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let k = config.codebook_size;
    let e = config.code_dim;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; k];
        let mut epoch_latents: Vec<Vec<f64>> = Vec::new();
        let mut sum = VqLoss::default();
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let fwd = model.forward(&data[i])?;
                let total = fwd.loss.total();
                if !total.is_finite() {
                    return Err(Error::Divergence(format!("cart loss {total} at epoch {epoch}, sample {i}")));
                }
                sum.reconstruction += fwd.loss.reconstruction;
                sum.codebook += fwd.loss.codebook;
                sum.commitment += fwd.loss.commitment;
                for &idx in &fwd.indices {
                    used[idx] = true;
                }
                epoch_latents.extend(fwd.z_e.rows().into_iter().map(|r| r.to_vec()));
                model.backward(&data[i], &fwd, w)?;
            }
            adam.step(&mut model, config.lr, true)?;
        }
        let mean = VqLoss {
            reconstruction: sum.reconstruction / n as f64,
            codebook: sum.codebook / n as f64,
            commitment: sum.commitment / n as f64,
        };
        let mut reseeded = 0;
        for (code, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
            let src = &epoch_latents[rng.gen_range(0..epoch_latents.len())];
            for (dst, &v) in model.codebook.value[code * e..(code + 1) * e].iter_mut().zip(src.iter()) {
                *dst = v as f32 as f64;
            }
            reseeded += 1;
        }
        log::debug!(
            "cart epoch {epoch}: recon {:.5} codebook {:.5} reseeded {reseeded}",
            mean.reconstruction,
            mean.codebook
        );
        model.trace.epoch_loss.push(mean);
        model.trace.reseeded_codes.push(reseeded);
    }
    model.zero_grad();
    Ok(model)
}

/// Flattened quantized latent for one coordination vector.
pub fn cart_representation(model: &CartModel, fvtc_vector: &[f32]) -> Result<Tensor> {
    let x: Vec<f64> = fvtc_vector.iter().map(|&v| v as f64).collect();
    let z_e = model.encode(&x)?;
    let (_, z_q) = quantize(z_e.view(), model.codebook_view())?;
    Tensor::new(vec![z_q.len()], z_q.iter().map(|&v| v as f32).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CartSidecar {
    format: String,
    input_dim: usize,
    config: CartConfig,
    trace: CartTrace,
}

const CART_FORMAT: &str = "mmst-cart-v1";

pub fn save_cart(model: &CartModel, dir: impl AsRef<Path>) -> Result<()> {
    let sidecar = CartSidecar {
        format: CART_FORMAT.into(),
        input_dim: model.input_dim,
        config: model.config.clone(),
        trace: model.trace.clone(),
    };
    checkpoint::write_dir(dir.as_ref(), &sidecar, &model.params())
}

pub fn load_cart(dir: impl AsRef<Path>) -> Result<CartModel> {
    let dir = dir.as_ref();
    let sidecar: CartSidecar = checkpoint::read_sidecar(dir)?;
    if sidecar.format != CART_FORMAT {
        return Err(Error::Format(format!("unexpected checkpoint format {:?}", sidecar.format)));
    }
    let mut model = CartModel::init(sidecar.input_dim, &sidecar.config)?;
    checkpoint::read_params(dir, model.params_mut())?;
    model.trace = sidecar.trace;
    Ok(model)
}
