use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Param, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Maxpool2d {
        kernel: usize,
    },
    Avgpool2d {
        kernel: usize,
    },
    Relu,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// Output side length of a valid, stride-1 convolution.
pub fn conv_output_dim(n: usize, k: usize) -> Option<usize> {
    (k >= 1 && n >= k).then(|| n - k + 1)
}

/// Output side length of non-overlapping pooling; the remainder is discarded.
pub fn pool_output_dim(n: usize, k: usize) -> usize {
    n.checked_div(k).unwrap_or(0)
}

/// Value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    /// `channels x height x width`
    Spatial(Array3<f64>),
    Flat(Array1<f64>),
}

impl Activation {
    pub fn into_flat(self) -> Result<Array1<f64>> {
        match self {
            Activation::Flat(v) => Ok(v),
            Activation::Spatial(_) => Err(Error::Shape("expected a flat activation".into())),
        }
    }

    pub fn into_spatial(self) -> Result<Array3<f64>> {
        match self {
            Activation::Spatial(v) => Ok(v),
            Activation::Flat(_) => Err(Error::Shape("expected a spatial activation".into())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Activation::Spatial(a) => a.len(),
            Activation::Flat(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x in x k x k`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let r = (ci * k + dy) * k + dx;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..oh {
                    let src = ci * h * w + (y + dy) * w + dx;
                    row[y * ow..(y + 1) * ow].copy_from_slice(&xs[src..src + ow]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, in_dim: (usize, usize, usize), k: usize) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let r = (ci * k + dy) * k + dx;
                let row = cols.row(r);
                let row = row.as_slice().expect("standard layout");
                for y in 0..oh {
                    let dst = ci * h * w + (y + dy) * w + dx;
                    for (o, g) in out[dst..dst + ow].iter_mut().zip(&row[y * ow..(y + 1) * ow]) {
                        *o += g;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("sized above")
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::he_uniform(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let k2 = self.in_channels * self.kernel * self.kernel;
        ArrayView2::from_shape((self.out_channels, k2), &self.weight.value).expect("weight shape")
    }

    /// Valid (unpadded) stride-1 convolution:
    /// `out[o,y,x] = bias[o] + sum_{c,dy,dx} w[o,c,dy,dx] * in[c,y+dy,x+dx]`.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let (Some(oh), Some(ow)) = (conv_output_dim(h, k), conv_output_dim(w, k)) else {
            return Err(Error::Shape(format!("input {h}x{w} smaller than kernel {k}")));
        };
        let cols = im2col(x, k);
        let mut out = self.weight_matrix().dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(&self.bias.value) {
            row += b;
        }
        let out = out.into_shape_with_order((self.out_channels, oh, ow)).expect("conv output shape");
        Ok((out, ConvCache { cols, in_dim: (c, h, w) }))
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (o, oh, ow) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, oh * ow))
            .expect("grad shape");
        let gw = g.dot(&cache.cols.t());
        for (acc, v) in self.weight.grad.iter_mut().zip(gw.iter()) {
            *acc += v;
        }
        for (acc, row) in self.bias.grad.iter_mut().zip(g.rows()) {
            *acc += row.sum();
        }
        let gcols = self.weight_matrix().t().dot(&g);
        col2im(&gcols, cache.in_dim, self.kernel)
    }
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub kernel: usize,
    pub mode: PoolMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolCache {
    in_dim: (usize, usize, usize),
    kernel: usize,
    mode: PoolMode,
    /// Flat input index of each output's maximum (max mode only).
    argmax: Vec<usize>,
}

/// Non-overlapping `k x k` pooling with stride `k`; trailing rows/columns that
/// do not fill a window are discarded.
pub fn pool2d(x: &Array3<f64>, k: usize, mode: PoolMode) -> Result<(Array3<f64>, PoolCache)> {
    let (c, h, w) = x.dim();
    if k == 0 || (k > h && k > w) {
        return Err(Error::Shape(format!("pool kernel {k} larger than input {h}x{w}")));
    }
    let (oh, ow) = (pool_output_dim(h, k), pool_output_dim(w, k));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut argmax = Vec::new();
    let scale = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + oy * k * w + ox * k;
                match mode {
                    PoolMode::Max => {
                        let mut best = base;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = base + dy * w + dx;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                        }
                        out[[ci, oy, ox]] = xs[best];
                        argmax.push(best);
                    }
                    PoolMode::Avg => {
                        let mut sum = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                sum += xs[base + dy * w + dx];
                            }
                        }
                        out[[ci, oy, ox]] = sum * scale;
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            in_dim: (c, h, w),
            kernel: k,
            mode,
            argmax,
        },
    ))
}

/// Max mode routes each output gradient to its (first) maximum; avg mode
/// spreads it as `1/k^2` over the window.
pub fn pool2d_backward(cache: &PoolCache, grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = cache.in_dim;
    let k = cache.kernel;
    let mut gin = vec![0.0; c * h * w];
    match cache.mode {
        PoolMode::Max => {
            for (&idx, g) in cache.argmax.iter().zip(grad_out.iter()) {
                gin[idx] += g;
            }
        }
        PoolMode::Avg => {
            let scale = 1.0 / (k * k) as f64;
            for ((ci, oy, ox), g) in grad_out.indexed_iter() {
                let base = ci * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        gin[base + dy * w + dx] += g * scale;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), gin).expect("sized above")
}

// ---------------------------------------------------------------------------
// linear

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`
    pub weight: Param,
    pub bias: Param,
}

/// `W x + b` with `W` of shape `out x in`.
pub fn linear_forward(x: &Array1<f64>, weight: ArrayView2<'_, f64>, bias: &[f64]) -> Result<Array1<f64>> {
    let (out, inp) = weight.dim();
    if x.len() != inp || bias.len() != out {
        return Err(Error::Shape(format!(
            "linear {inp}->{out} given input {} and bias {}",
            x.len(),
            bias.len()
        )));
    }
    let mut y = weight.dot(x);
    for (v, b) in y.iter_mut().zip(bias) {
        *v += b;
    }
    Ok(y)
}

/// Returns `(dW, db, dx)` for `y = W x + b`.
pub fn linear_backward(
    x: &Array1<f64>,
    weight: ArrayView2<'_, f64>,
    grad_out: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let gw = grad_out
        .view()
        .insert_axis(Axis(1))
        .dot(&x.view().insert_axis(Axis(0)));
    let gx = weight.t().dot(grad_out);
    (gw, grad_out.clone(), gx)
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::he_uniform(format!("{name}.weight"), vec![out_features, in_features], in_features, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
        }
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_features, self.in_features), &self.weight.value).expect("weight shape")
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        linear_forward(x, self.weight_matrix(), &self.bias.value)
    }

    pub fn backward(&mut self, x: &Array1<f64>, grad_out: &Array1<f64>) -> Array1<f64> {
        let (gw, gb, gx) = linear_backward(x, self.weight_matrix(), grad_out);
        for (acc, v) in self.weight.grad.iter_mut().zip(gw.iter()) {
            *acc += v;
        }
        for (acc, v) in self.bias.grad.iter_mut().zip(gb.iter()) {
            *acc += v;
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// layer enum and sequential stack

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Pool2d(Pool2d),
    Relu,
    Flatten,
    Linear(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Conv(ConvCache),
    Pool(PoolCache),
    Relu(Vec<bool>),
    Flatten((usize, usize, usize)),
    Linear(Array1<f64>),
}

impl LayerCache {
    /// Appends the discrete choices made in this layer (relu gates, max-pool
    /// winners). Two passes with equal decisions lie on the same linear piece.
    pub fn push_decisions(&self, out: &mut Vec<usize>) {
        match self {
            LayerCache::Relu(mask) => out.extend(mask.iter().map(|&b| b as usize)),
            LayerCache::Pool(p) => out.extend_from_slice(&p.argmax),
            _ => {}
        }
    }
}

/// Decisions of a whole stack, in layer order.
pub fn decisions(caches: &[LayerCache]) -> Vec<usize> {
    let mut out = Vec::new();
    for c in caches {
        c.push_decisions(&mut out);
    }
    out
}

fn relu_inplace(values: &mut [f64]) -> Vec<bool> {
    values
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

fn mask_inplace<'a>(values: impl Iterator<Item = &'a mut f64>, mask: &[bool]) {
    for (v, &on) in values.zip(mask) {
        if !on {
            *v = 0.0;
        }
    }
}

impl Layer {
    pub fn from_spec<R: Rng + ?Sized>(name: &str, spec: LayerSpec, rng: &mut R) -> Self {
        match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Layer::Conv2d(Conv2d::new(name, in_channels, out_channels, kernel, rng)),
            LayerSpec::Maxpool2d { kernel } => Layer::Pool2d(Pool2d {
                kernel,
                mode: PoolMode::Max,
            }),
            LayerSpec::Avgpool2d { kernel } => Layer::Pool2d(Pool2d {
                kernel,
                mode: PoolMode::Avg,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(name, in_features, out_features, rng)),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
            },
            Layer::Pool2d(Pool2d {
                kernel,
                mode: PoolMode::Max,
            }) => LayerSpec::Maxpool2d { kernel: *kernel },
            Layer::Pool2d(Pool2d {
                kernel,
                mode: PoolMode::Avg,
            }) => LayerSpec::Avgpool2d { kernel: *kernel },
            Layer::Relu => LayerSpec::Relu,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
        }
    }

    pub fn forward(&self, x: Activation) -> Result<(Activation, LayerCache)> {
        match (self, x) {
            (Layer::Conv2d(c), Activation::Spatial(a)) => {
                let (out, cache) = c.forward(&a)?;
                Ok((Activation::Spatial(out), LayerCache::Conv(cache)))
            }
            (Layer::Pool2d(p), Activation::Spatial(a)) => {
                let (out, cache) = pool2d(&a, p.kernel, p.mode)?;
                Ok((Activation::Spatial(out), LayerCache::Pool(cache)))
            }
            (Layer::Relu, Activation::Spatial(mut a)) => {
                let mask = relu_inplace(a.as_slice_mut().expect("standard layout"));
                Ok((Activation::Spatial(a), LayerCache::Relu(mask)))
            }
            (Layer::Relu, Activation::Flat(mut a)) => {
                let mask = relu_inplace(a.as_slice_mut().expect("contiguous"));
                Ok((Activation::Flat(a), LayerCache::Relu(mask)))
            }
            (Layer::Flatten, Activation::Spatial(a)) => {
                let dim = a.dim();
                let flat = a.as_standard_layout().iter().copied().collect();
                Ok((Activation::Flat(flat), LayerCache::Flatten(dim)))
            }
            (Layer::Flatten, Activation::Flat(a)) => {
                let n = a.len();
                Ok((Activation::Flat(a), LayerCache::Flatten((n, 1, 1))))
            }
            (Layer::Linear(l), Activation::Flat(a)) => {
                let y = l.forward(&a)?;
                Ok((Activation::Flat(y), LayerCache::Linear(a)))
            }
            (layer, act) => Err(Error::Shape(format!(
                "{:?} cannot consume a {} activation",
                layer.spec(),
                if matches!(act, Activation::Flat(_)) { "flat" } else { "spatial" }
            ))),
        }
    }

    pub fn backward(&mut self, cache: &LayerCache, grad: Activation) -> Result<Activation> {
        match (self, cache, grad) {
            (Layer::Conv2d(c), LayerCache::Conv(cc), Activation::Spatial(g)) => Ok(Activation::Spatial(c.backward(cc, &g))),
            (Layer::Pool2d(_), LayerCache::Pool(pc), Activation::Spatial(g)) => Ok(Activation::Spatial(pool2d_backward(pc, &g))),
            (Layer::Relu, LayerCache::Relu(mask), Activation::Spatial(mut g)) => {
                mask_inplace(g.iter_mut(), mask);
                Ok(Activation::Spatial(g))
            }
            (Layer::Relu, LayerCache::Relu(mask), Activation::Flat(mut g)) => {
                mask_inplace(g.iter_mut(), mask);
                Ok(Activation::Flat(g))
            }
            (Layer::Flatten, LayerCache::Flatten(dim), Activation::Flat(g)) => Ok(Activation::Spatial(
                g.into_shape_with_order(*dim)
                    .map_err(|e| Error::Shape(format!("flatten backward: {e}")))?,
            )),
            (Layer::Linear(l), LayerCache::Linear(x), Activation::Flat(g)) => Ok(Activation::Flat(l.backward(x, &g))),
            _ => Err(Error::Shape("layer/cache/gradient kinds disagree".into())),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    /// Builds layers from specs, naming parameters `{prefix}.{index}.weight|bias`.
    pub fn from_specs<R: Rng + ?Sized>(prefix: &str, specs: &[LayerSpec], rng: &mut R) -> Self {
        Sequential {
            layers: specs
                .iter()
                .enumerate()
                .map(|(i, &s)| Layer::from_spec(&format!("{prefix}.{i}"), s, rng))
                .collect(),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&self, mut x: Activation) -> Result<(Activation, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn infer(&self, mut x: Activation) -> Result<Activation> {
        for layer in &self.layers {
            x = layer.forward(x)?.0;
        }
        Ok(x)
    }

    pub fn backward(&mut self, caches: &[LayerCache], mut grad: Activation) -> Result<Activation> {
        if caches.len() != self.layers.len() {
            return Err(Error::Shape("cache count differs from layer count".into()));
        }
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            grad = layer.backward(cache, grad)?;
        }
        Ok(grad)
    }
}

impl Parameterized for Sequential {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::central_difference;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-loop direct convolution.
    fn naive_conv(x: &Array3<f64>, w: &[f64], b: &[f64], o: usize, k: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let mut out = Array3::zeros((o, oh, ow));
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[oc];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                s += w[((oc * c + ci) * k + dy) * k + dx] * x[[ci, y + dy, xx + dx]];
                            }
                        }
                    }
                    out[[oc, y, xx]] = s;
                }
            }
        }
        out
    }

    fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_k1_unit_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 1, 1, &mut rng);
        conv.weight.value = vec![1.0];
        let x = rand3(&mut rng, (1, 3, 4));
        assert_eq!(conv.forward(&x).unwrap().0, x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 2, 2, &mut rng);
        conv.bias.value = vec![0.5, -1.5];
        let (out, _) = conv.forward(&Array3::zeros((1, 4, 4))).unwrap();
        assert!(out.index_axis(Axis(0), 0).iter().all(|&v| v == 0.5));
        assert!(out.index_axis(Axis(0), 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", 1, 2, 2, &mut rng);
        conv.bias.value = vec![0.1, -0.2];
        let x = rand3(&mut rng, (1, 4, 4));
        let got = conv.forward(&x).unwrap().0;
        let want = naive_conv(&x, &conv.weight.value, &conv.bias.value, 2, 2);
        assert!(got.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-6));

        let conv3 = Conv2d::new("c", 3, 4, 3, &mut rng);
        let x = rand3(&mut rng, (3, 7, 9));
        let got = conv3.forward(&x).unwrap().0;
        let want = naive_conv(&x, &conv3.weight.value, &conv3.bias.value, 4, 3);
        assert!(got.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_rejects_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 1, 1, 3, &mut rng);
        assert!(conv.forward(&Array3::zeros((1, 2, 5))).is_err());
        assert!(conv.forward(&Array3::zeros((2, 5, 5))).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 2, 3, 3, &mut rng);
        let x = rand3(&mut rng, (2, 5, 6));
        let (out, cache) = conv.forward(&x).unwrap();
        let gout = rand3(&mut rng, out.dim());
        let gin = conv.backward(&cache, &gout);
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x).unwrap().0 * &gout).sum();

        let mut xp = x.clone();
        for idx in 0..x.len() {
            let num = central_difference(
                |v| {
                    xp.as_slice_mut().unwrap()[idx] = v;
                    loss(&conv, &xp)
                },
                x.as_slice().unwrap()[idx],
                1e-5,
            );
            xp.as_slice_mut().unwrap()[idx] = x.as_slice().unwrap()[idx];
            assert!((num - gin.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        let analytic = conv.weight.grad.clone();
        for (idx, &want) in analytic.iter().enumerate() {
            let orig = conv.weight.value[idx];
            let mut c2 = conv.clone();
            let num = central_difference(
                |v| {
                    c2.weight.value[idx] = v;
                    loss(&c2, &x)
                },
                orig,
                1e-5,
            );
            assert!((num - want).abs() < 1e-7);
        }
        let bsum: Vec<f64> = gout.outer_iter().map(|m| m.sum()).collect();
        assert!(conv.bias.grad.iter().zip(&bsum).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn pool_examples() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        assert_eq!(pool2d(&x, 2, PoolMode::Max).unwrap().0, array![[[4.0]]]);
        assert_eq!(pool2d(&x, 2, PoolMode::Avg).unwrap().0, array![[[2.5]]]);
        assert!(pool2d(&x, 3, PoolMode::Max).is_err());
        // remainder discarded
        let y = Array3::from_shape_fn((1, 5, 3), |(_, i, j)| (i * 3 + j) as f64);
        assert_eq!(pool2d(&y, 2, PoolMode::Max).unwrap().0.dim(), (1, 2, 1));
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let x = array![[[1.0, 1.0], [1.0, 1.0]]];
        let (_, cache) = pool2d(&x, 2, PoolMode::Max).unwrap();
        let g = pool2d_backward(&cache, &array![[[1.0]]]);
        assert_eq!(g, array![[[1.0, 0.0], [0.0, 0.0]]]);
    }

    #[test]
    fn pool_matches_window_scan_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand3(&mut rng, (1, 6, 6));
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let (out, cache) = pool2d(&x, 2, mode).unwrap();
            for oy in 0..3 {
                for ox in 0..3 {
                    let win = [
                        x[[0, 2 * oy, 2 * ox]],
                        x[[0, 2 * oy, 2 * ox + 1]],
                        x[[0, 2 * oy + 1, 2 * ox]],
                        x[[0, 2 * oy + 1, 2 * ox + 1]],
                    ];
                    let want = match mode {
                        PoolMode::Max => win.iter().cloned().fold(f64::MIN, f64::max),
                        PoolMode::Avg => win.iter().sum::<f64>() / 4.0,
                    };
                    assert_eq!(out[[0, oy, ox]], want);
                }
            }
            let gout = rand3(&mut rng, out.dim());
            let gin = pool2d_backward(&cache, &gout);
            let mut xp = x.clone();
            for idx in 0..x.len() {
                let num = central_difference(
                    |v| {
                        xp.as_slice_mut().unwrap()[idx] = v;
                        (pool2d(&xp, 2, mode).unwrap().0 * &gout).sum()
                    },
                    x.as_slice().unwrap()[idx],
                    1e-5,
                );
                xp.as_slice_mut().unwrap()[idx] = x.as_slice().unwrap()[idx];
                assert!((num - gin.as_slice().unwrap()[idx]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn linear_examples() {
        let x = array![1.0, -2.0, 3.0];
        let eye = Array2::<f64>::eye(3);
        assert_eq!(linear_forward(&x, eye.view(), &[0.0; 3]).unwrap(), x);
        let zero = Array2::<f64>::zeros((2, 3));
        assert_eq!(linear_forward(&x, zero.view(), &[1.0, 2.0]).unwrap(), array![1.0, 2.0]);
        assert!(linear_forward(&x, zero.view(), &[1.0]).is_err());

        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let y = linear_forward(&x, w.view(), &[0.1, 0.2]).unwrap();
        // hand multiply
        let want = [0.5 * 1.0 + 1.0 * 2.0 + 2.0 * 3.0 + 0.1, 1.5 - 0.5 - 2.25 + 0.2];
        assert!((y[0] - want[0]).abs() < 1e-15 && (y[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn sequential_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = Sequential::from_specs(
            "s",
            &[LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            }],
            &mut rng,
        );
        assert!(seq.infer(Activation::Spatial(Array3::zeros((1, 2, 2)))).is_err());
        assert!(seq.infer(Activation::Flat(Array1::zeros(3))).is_err());
        assert_eq!(seq.infer(Activation::Flat(Array1::zeros(4))).unwrap().len(), 2);
    }
}
