//! A small classifier built from LHC layers: each convolution is followed by
//! a bias and a rectifier, then global average pooling and a linear head.

use rand::Rng;

use crate::error::{LhcError, Result};
use crate::layer::{LhcCache, LhcLayer, MaskTensor, ShapeMode, TopologyConstraints};
use crate::tensor::Tensor4;

/// How a convolution participates in topology learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Lhc(ShapeMode),
    /// Plain convolution: mask permanently disabled, excluded from density.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_o: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub constraints: TopologyConstraints,
}

#[derive(Debug, Clone)]
pub struct ModelLayer {
    pub conv: LhcLayer,
    pub bias: Vec<f64>,
    pub learns_topology: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<ModelLayer>,
    in_channels: usize,
    classes: usize,
    /// `(c_last, classes)` row-major.
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<(LhcCache, Tensor4)>,
    pooled: Vec<f64>,
    last_dims: [usize; 4],
}

impl ForwardCache {
    pub fn layer_cache(&self, i: usize) -> &LhcCache {
        &self.layers[i].0
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub kernel: Tensor4,
    pub bias: Vec<f64>,
    pub effect: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let z = &logits[n * classes..(n + 1) * classes];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + m - z[label];
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            grad[n * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b.max(1) as f64, grad)
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        in_channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() || classes == 0 || in_channels == 0 {
            return Err(LhcError::InvalidArgument(
                "model needs at least one layer, one class and one input channel".into(),
            ));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut c_i = in_channels;
        for s in specs {
            let (mode, learns) = match s.kind {
                LayerKind::Lhc(m) => (m, true),
                LayerKind::Standard => (ShapeMode::Free, false),
            };
            let constraints = s.constraints.clamped(c_i, s.c_o);
            let mut conv =
                LhcLayer::init(mode, s.k, c_i, s.c_o, constraints, s.stride, s.padding, rng)?;
            if !learns {
                conv.set_mask_enabled(false);
            }
            layers.push(ModelLayer {
                conv,
                bias: vec![0.0; s.c_o],
                learns_topology: learns,
            });
            c_i = s.c_o;
        }
        let bound = (6.0 / (c_i + classes) as f64).sqrt();
        let head_w = (0..c_i * classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut model = Self {
            layers,
            in_channels,
            classes,
            head_w,
            head_b: vec![0.0; classes],
        };
        model.round_params_to_f32();
        Ok(model)
    }

    pub fn from_parts(
        layers: Vec<ModelLayer>,
        in_channels: usize,
        classes: usize,
        head_w: Vec<f64>,
        head_b: Vec<f64>,
    ) -> Result<Self> {
        let mut c = in_channels;
        for (i, l) in layers.iter().enumerate() {
            if l.conv.c_i() != c {
                return Err(LhcError::InvalidArgument(format!(
                    "layer {i} expects {} input channels, gets {c}",
                    l.conv.c_i()
                )));
            }
            if l.bias.len() != l.conv.c_o() {
                return Err(LhcError::shape(&[l.conv.c_o()], &[l.bias.len()]));
            }
            c = l.conv.c_o();
        }
        if head_w.len() != c * classes || head_b.len() != classes {
            return Err(LhcError::shape(
                &[c * classes, classes],
                &[head_w.len(), head_b.len()],
            ));
        }
        Ok(Self {
            layers,
            in_channels,
            classes,
            head_w,
            head_b,
        })
    }

    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ModelLayer] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn head(&self) -> (&[f64], &[f64]) {
        (&self.head_w, &self.head_b)
    }

    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.head_w, &mut self.head_b)
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map(|l| l.conv.c_o()).unwrap_or(self.in_channels)
    }

    /// Indices of layers that learn topology.
    pub fn lhc_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].learns_topology)
            .collect()
    }

    /// Forward masks of the topology-learning layers.
    pub fn masks(&self) -> Result<Vec<MaskTensor>> {
        self.lhc_indices()
            .into_iter()
            .map(|i| self.layers[i].conv.build_masks())
            .collect()
    }

    /// Effect-derived masks of the topology-learning layers, ignoring the
    /// enable flags.
    pub fn topology_masks(&self) -> Result<Vec<MaskTensor>> {
        self.lhc_indices()
            .into_iter()
            .map(|i| self.layers[i].conv.topology_masks())
            .collect()
    }

    pub fn set_masks_enabled(&mut self, enabled: &[bool]) -> Result<()> {
        let idx = self.lhc_indices();
        if enabled.len() != idx.len() {
            return Err(LhcError::shape(&[idx.len()], &[enabled.len()]));
        }
        for (&i, &e) in idx.iter().zip(enabled) {
            self.layers[i].conv.set_mask_enabled(e);
        }
        Ok(())
    }

    pub fn round_params_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for l in &mut self.layers {
            l.conv.round_params_to_f32();
            l.bias.iter_mut().for_each(r);
        }
        self.head_w.iter_mut().for_each(r);
        self.head_b.iter_mut().for_each(r);
    }

    pub fn forward(&self, input: &Tensor4) -> Result<(Vec<f64>, ForwardCache)> {
        if input.dims()[3] != self.in_channels {
            return Err(LhcError::shape(
                &[self.in_channels],
                &[input.dims()[3]],
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for l in &self.layers {
            let (mut y, cache) = l.conv.forward(&x)?;
            let c_o = l.bias.len();
            for (j, v) in y.data_mut().iter_mut().enumerate() {
                *v += l.bias[j % c_o];
            }
            let act = y.map(|v| v.max(0.0));
            caches.push((cache, y));
            x = act;
        }
        let [b, h, w, c] = x.dims();
        let hw = (h * w) as f64;
        let mut pooled = vec![0.0; b * c];
        for n in 0..b {
            for p in 0..h * w {
                for ch in 0..c {
                    pooled[n * c + ch] += x.data()[(n * h * w + p) * c + ch];
                }
            }
        }
        pooled.iter_mut().for_each(|v| *v /= hw);
        let mut logits = vec![0.0; b * self.classes];
        for n in 0..b {
            for k in 0..self.classes {
                let mut s = self.head_b[k];
                for ch in 0..c {
                    s += pooled[n * c + ch] * self.head_w[ch * self.classes + k];
                }
                logits[n * self.classes + k] = s;
            }
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(LhcError::NonFinite("logits"));
        }
        Ok((
            logits,
            ForwardCache {
                layers: caches,
                pooled,
                last_dims: [b, h, w, c],
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<ModelGrads> {
        let [b, h, w, c] = cache.last_dims;
        let k = self.classes;
        if dlogits.len() != b * k {
            return Err(LhcError::shape(&[b * k], &[dlogits.len()]));
        }
        let mut head_w = vec![0.0; c * k];
        let mut head_b = vec![0.0; k];
        let mut dpooled = vec![0.0; b * c];
        for n in 0..b {
            for j in 0..k {
                let g = dlogits[n * k + j];
                head_b[j] += g;
                for ch in 0..c {
                    head_w[ch * k + j] += cache.pooled[n * c + ch] * g;
                    dpooled[n * c + ch] += self.head_w[ch * k + j] * g;
                }
            }
        }
        let hw = (h * w) as f64;
        let mut up = Tensor4::from_fn([b, h, w, c], |[n, _, _, ch]| dpooled[n * c + ch] / hw);

        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, (lc, pre)) in self.layers.iter().zip(&cache.layers).rev() {
            let c_o = l.bias.len();
            let dpre = up.hadamard(&pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
            let mut bias = vec![0.0; c_o];
            for (j, v) in dpre.data().iter().enumerate() {
                bias[j % c_o] += v;
            }
            let g = l.conv.backward(lc, &dpre)?;
            up = g.input;
            grads.push(LayerGrads {
                kernel: g.kernel,
                bias,
                effect: g.effect,
            });
        }
        grads.reverse();
        Ok(ModelGrads {
            layers: grads,
            head_w,
            head_b,
        })
    }

    /// Predicted class per sample.
    pub fn predict(&self, input: &Tensor4) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(input)?;
        Ok(logits
            .chunks(self.classes)
            .map(|z| {
                let mut best = 0;
                for (i, &v) in z.iter().enumerate() {
                    if v > z[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}
