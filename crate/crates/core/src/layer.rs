//! The learnable heterogeneous convolution layer.
//!
//! Every `c_gi x c_go` block of kernel slices owns one set of effect factors.
//! A hard step turns the factors into a k x k binary mask slice, the slice is
//! tiled across the block, and the convolution runs on `kernel * mask`. The
//! step has no useful derivative, so the backward pass routes the mask
//! gradient through a fixed surrogate: 1 inside a unit band and
//! [`SURROGATE_OUTSIDE`] elsewhere.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};
use crate::shapes::{rigid_catalog, RigidCatalog, ShapeSlice, CATALOG_K, RIGID_SHAPES};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeometry, Tensor4};

/// Surrogate slope outside the unit band.
pub const SURROGATE_OUTSIDE: f64 = 0.1;

pub(crate) fn catalog() -> &'static RigidCatalog {
    static CATALOG: OnceLock<RigidCatalog> = OnceLock::new();
    CATALOG.get_or_init(rigid_catalog)
}

/// Which shape family the effect factors select from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeMode {
    /// 15 rigid shapes, one score per shape.
    Rigid,
    /// Any binary k x k pattern, one score per cell.
    Free,
}

impl ShapeMode {
    pub fn code(self) -> u8 {
        match self {
            ShapeMode::Rigid => 0,
            ShapeMode::Free => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShapeMode::Rigid),
            1 => Some(ShapeMode::Free),
            _ => None,
        }
    }
}

/// Block sizes over the input and output channel axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyConstraints {
    pub c_gi: usize,
    pub c_go: usize,
}

impl TopologyConstraints {
    pub fn new(c_gi: usize, c_go: usize) -> Result<Self> {
        if c_gi == 0 || c_go == 0 {
            return Err(LhcError::InvalidArgument(
                "topology constraints must be positive".into(),
            ));
        }
        Ok(Self { c_gi, c_go })
    }

    pub fn check(&self, c_i: usize, c_o: usize) -> Result<()> {
        if self.c_gi == 0 || self.c_go == 0 || !c_i.is_multiple_of(self.c_gi) || !c_o.is_multiple_of(self.c_go) {
            return Err(LhcError::Constraint {
                c_gi: self.c_gi,
                c_go: self.c_go,
                c_i,
                c_o,
            });
        }
        Ok(())
    }

    /// Fits the constraints to a layer with too few channels (typically the
    /// first layer): `c_gi` drops to `c_i` when larger, otherwise to the
    /// largest common divisor, and likewise for `c_go`.
    pub fn clamped(&self, c_i: usize, c_o: usize) -> Self {
        let fit = |c: usize, g: usize| if g >= c { c } else { gcd(c, g) };
        Self {
            c_gi: fit(c_i, self.c_gi),
            c_go: fit(c_o, self.c_go),
        }
    }

    pub fn parallelism(&self) -> usize {
        self.c_gi * self.c_go
    }

    pub fn grid(&self, c_i: usize, c_o: usize) -> (usize, usize) {
        (c_i / self.c_gi, c_o / self.c_go)
    }
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-block effect factors, stored block after block with the input-block
/// index major: block `(x, y)` lives at `x * grid.1 + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectFactors {
    mode: ShapeMode,
    k: usize,
    grid: (usize, usize),
    values: Vec<f64>,
}

impl EffectFactors {
    pub fn new(mode: ShapeMode, k: usize, grid: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if mode == ShapeMode::Rigid && k != CATALOG_K {
            return Err(LhcError::InvalidArgument(format!(
                "rigid shapes need k = 3, got {k}"
            )));
        }
        let expected = grid.0 * grid.1 * Self::per_block_for(mode, k);
        if values.len() != expected {
            return Err(LhcError::shape(&[expected], &[values.len()]));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(LhcError::NonFinite("effect factors"));
        }
        Ok(Self {
            mode,
            k,
            grid,
            values,
        })
    }

    fn per_block_for(mode: ShapeMode, k: usize) -> usize {
        match mode {
            ShapeMode::Rigid => RIGID_SHAPES,
            ShapeMode::Free => k * k,
        }
    }

    pub fn mode(&self) -> ShapeMode {
        self.mode
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn per_block(&self) -> usize {
        Self::per_block_for(self.mode, self.k)
    }

    pub fn block_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn block(&self, x: usize, y: usize) -> &[f64] {
        let n = self.per_block();
        &self.values[(x * self.grid.1 + y) * n..][..n]
    }

    pub fn block_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let n = self.per_block();
        let start = (x * self.grid.1 + y) * n;
        &mut self.values[start..start + n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rigid-mode step: the shape with the largest score wins (lowest index on
/// ties). Returns the winning catalog index, its slice, and the surrogate
/// derivative of each score.
pub fn step_r(e: &[f64]) -> Result<(usize, ShapeSlice, Vec<f64>)> {
    if e.len() != RIGID_SHAPES {
        return Err(LhcError::shape(&[RIGID_SHAPES], &[e.len()]));
    }
    if !e.iter().all(|v| v.is_finite()) {
        return Err(LhcError::NonFinite("rigid effect factors"));
    }
    let mut best = 0;
    for (i, &v) in e.iter().enumerate().skip(1) {
        if v > e[best] {
            best = i;
        }
    }
    let mean = e.iter().sum::<f64>() / RIGID_SHAPES as f64;
    let surrogate = e
        .iter()
        .map(|&v| {
            if (v - mean).abs() < 1.0 {
                1.0
            } else {
                SURROGATE_OUTSIDE
            }
        })
        .collect();
    Ok((best, catalog().shapes()[best].slice.clone(), surrogate))
}

/// Free-mode step: a cell is on iff its score is strictly positive.
pub fn step_f(e: &[f64], k: usize) -> Result<(ShapeSlice, Vec<f64>)> {
    if e.len() != k * k {
        return Err(LhcError::shape(&[k * k], &[e.len()]));
    }
    if !e.iter().all(|v| v.is_finite()) {
        return Err(LhcError::NonFinite("free effect factors"));
    }
    let bits = e.iter().map(|&v| v > 0.0).collect();
    let surrogate = e
        .iter()
        .map(|&v| if v.abs() < 1.0 { 1.0 } else { SURROGATE_OUTSIDE })
        .collect();
    Ok((ShapeSlice::new(k, bits)?, surrogate))
}

/// Result of the step function for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStep {
    pub slice: ShapeSlice,
    /// Winning catalog index (rigid mode only).
    pub rigid_index: Option<usize>,
    pub surrogate: Vec<f64>,
}

/// Binary mask over a `(k, k, c_i, c_o)` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    bits: Tensor4,
}

impl MaskTensor {
    pub fn new(bits: Tensor4) -> Result<Self> {
        if let Some(v) = bits.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(LhcError::InvalidArgument(format!(
                "non-binary mask entry {v}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn ones(dims: [usize; 4]) -> Self {
        Self {
            bits: Tensor4::filled(dims, 1.0),
        }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            bits: Tensor4::zeros(dims),
        }
    }

    /// Tiles one slice per block over the channel grid.
    pub fn tile(
        k: usize,
        c_i: usize,
        c_o: usize,
        constraints: TopologyConstraints,
        slices: &[ShapeSlice],
    ) -> Result<Self> {
        constraints.check(c_i, c_o)?;
        let (gx, gy) = constraints.grid(c_i, c_o);
        if slices.len() != gx * gy {
            return Err(LhcError::shape(&[gx * gy], &[slices.len()]));
        }
        if let Some(s) = slices.iter().find(|s| s.k() != k) {
            return Err(LhcError::shape(&[k], &[s.k()]));
        }
        let bits = Tensor4::from_fn([k, k, c_i, c_o], |[u, v, x, y]| {
            let s = &slices[(x / constraints.c_gi) * gy + y / constraints.c_go];
            if s.get(u, v) {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &Tensor4 {
        &self.bits
    }

    pub fn dims(&self) -> [usize; 4] {
        self.bits.dims()
    }

    pub fn size(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn density(&self) -> f64 {
        if self.size() == 0 {
            return 0.0;
        }
        self.count_ones() as f64 / self.size() as f64
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> bool {
        self.bits.at(idx) != 0.0
    }

    /// The k x k slice at channel pair `(x, y)`.
    pub fn slice_at(&self, x: usize, y: usize) -> ShapeSlice {
        let k = self.dims()[0];
        let bits = (0..k * k).map(|j| self.get([j / k, j % k, x, y])).collect();
        ShapeSlice::new(k, bits).expect("k*k bits")
    }

    /// One slice per block if every block is constant, else a constraint
    /// error naming the first offending block.
    pub fn block_slices(&self, constraints: TopologyConstraints) -> Result<Vec<ShapeSlice>> {
        let [k, _, c_i, c_o] = self.dims();
        constraints.check(c_i, c_o)?;
        let (gx, gy) = constraints.grid(c_i, c_o);
        let mut out = Vec::with_capacity(gx * gy);
        for bx in 0..gx {
            for by in 0..gy {
                let x0 = bx * constraints.c_gi;
                let y0 = by * constraints.c_go;
                let s = self.slice_at(x0, y0);
                for x in x0..x0 + constraints.c_gi {
                    for y in y0..y0 + constraints.c_go {
                        for j in 0..k * k {
                            if self.get([j / k, j % k, x, y]) != s.bits()[j] {
                                return Err(LhcError::InvalidArgument(format!(
                                    "mask is not constant over block ({bx}, {by})"
                                )));
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn is_block_constant(&self, constraints: TopologyConstraints) -> bool {
        self.block_slices(constraints).is_ok()
    }
}

/// Cached forward state consumed by [`LhcLayer::backward`].
#[derive(Debug, Clone)]
pub struct LhcCache {
    generation: u64,
    geom: ConvGeometry,
    input: Tensor4,
    masks: MaskTensor,
    masked_kernel: Tensor4,
    steps: Option<Vec<BlockStep>>,
}

impl LhcCache {
    pub fn masks(&self) -> &MaskTensor {
        &self.masks
    }

    pub fn masked_kernel(&self) -> &Tensor4 {
        &self.masked_kernel
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    /// Step results per block, or `None` when the mask was disabled.
    pub fn steps(&self) -> Option<&[BlockStep]> {
        self.steps.as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct LhcGrads {
    pub input: Tensor4,
    pub kernel: Tensor4,
    /// Same layout as [`EffectFactors::values`].
    pub effect: Vec<f64>,
    /// Gradient with respect to each block's mask slice, `k * k` per block.
    pub slices: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LhcLayer {
    kernel: Tensor4,
    effect: EffectFactors,
    constraints: TopologyConstraints,
    stride: usize,
    padding: usize,
    mask_enabled: bool,
    generation: u64,
}

impl LhcLayer {
    pub fn from_parts(
        kernel: Tensor4,
        effect: EffectFactors,
        constraints: TopologyConstraints,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [k, k2, c_i, c_o] = kernel.dims();
        if k != k2 || k == 0 {
            return Err(LhcError::InvalidArgument(format!(
                "kernel must be square, got {k}x{k2}"
            )));
        }
        constraints.check(c_i, c_o)?;
        if effect.k != k || effect.grid != constraints.grid(c_i, c_o) {
            return Err(LhcError::shape(
                &[k, c_i / constraints.c_gi, c_o / constraints.c_go],
                &[effect.k, effect.grid.0, effect.grid.1],
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(LhcError::InvalidArgument(format!(
                "stride must be 1 or 2, got {stride}"
            )));
        }
        Ok(Self {
            kernel,
            effect,
            constraints,
            stride,
            padding,
            mask_enabled: true,
            generation: 0,
        })
    }

    /// Random layer: He-uniform kernel, effect factors uniform in
    /// `(-a, a)` with `a = min(1, sqrt(6 / (fan_in + fan_out)))` counted over
    /// the effect-factor grid. Exact zeros are redrawn.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        mode: ShapeMode,
        k: usize,
        c_i: usize,
        c_o: usize,
        constraints: TopologyConstraints,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        constraints.check(c_i, c_o)?;
        let wb = (6.0 / (k * k * c_i) as f64).sqrt();
        let kernel = Tensor4::from_fn([k, k, c_i, c_o], |_| rng.random_range(-wb..wb));
        let grid = constraints.grid(c_i, c_o);
        let per = EffectFactors::per_block_for(mode, k);
        let eb = (6.0 / (per * (grid.0 + grid.1)) as f64).sqrt().min(1.0);
        let values = (0..grid.0 * grid.1 * per)
            .map(|_| loop {
                let v: f64 = rng.random_range(-eb..eb);
                if v != 0.0 {
                    break v;
                }
            })
            .collect();
        let effect = EffectFactors::new(mode, k, grid, values)?;
        Self::from_parts(kernel, effect, constraints, stride, padding)
    }

    pub fn kernel(&self) -> &Tensor4 {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor4 {
        self.generation += 1;
        &mut self.kernel
    }

    pub fn effect(&self) -> &EffectFactors {
        &self.effect
    }

    pub fn effect_mut(&mut self) -> &mut EffectFactors {
        self.generation += 1;
        &mut self.effect
    }

    pub fn mode(&self) -> ShapeMode {
        self.effect.mode
    }

    pub fn constraints(&self) -> TopologyConstraints {
        self.constraints
    }

    pub fn k(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn c_i(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn c_o(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn mask_enabled(&self) -> bool {
        self.mask_enabled
    }

    pub fn set_mask_enabled(&mut self, enabled: bool) {
        if enabled != self.mask_enabled {
            self.generation += 1;
        }
        self.mask_enabled = enabled;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn geometry(&self, h_i: usize, w_i: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(
            self.k(),
            self.stride,
            self.padding,
            self.c_i(),
            self.c_o(),
            h_i,
            w_i,
        )
    }

    /// Effect factors per kernel element. Free mode gives `1 / (c_gi * c_go)`;
    /// rigid blocks carry 15 scores instead of 9, so `15 / (9 * c_gi * c_go)`.
    pub fn extra_parameter_ratio(&self) -> f64 {
        self.effect.len() as f64 / self.kernel.len() as f64
    }

    /// Rounds kernel and effect factors to the nearest `f32`, the precision
    /// used by checkpoints.
    pub fn round_params_to_f32(&mut self) {
        self.generation += 1;
        for v in self.kernel.data_mut() {
            *v = *v as f32 as f64;
        }
        for v in self.effect.values_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn block_steps(&self) -> Result<Vec<BlockStep>> {
        let (gx, gy) = self.effect.grid;
        let mut out = Vec::with_capacity(gx * gy);
        for x in 0..gx {
            for y in 0..gy {
                let e = self.effect.block(x, y);
                out.push(match self.effect.mode {
                    ShapeMode::Rigid => {
                        let (i, slice, surrogate) = step_r(e)?;
                        BlockStep {
                            slice,
                            rigid_index: Some(i),
                            surrogate,
                        }
                    }
                    ShapeMode::Free => {
                        let (slice, surrogate) = step_f(e, self.k())?;
                        BlockStep {
                            slice,
                            rigid_index: None,
                            surrogate,
                        }
                    }
                });
            }
        }
        Ok(out)
    }

    fn tile_steps(&self, steps: &[BlockStep]) -> Result<MaskTensor> {
        let slices: Vec<ShapeSlice> = steps.iter().map(|s| s.slice.clone()).collect();
        MaskTensor::tile(self.k(), self.c_i(), self.c_o(), self.constraints, &slices)
    }

    /// Masks derived from the effect factors, ignoring the enable flag.
    pub fn topology_masks(&self) -> Result<MaskTensor> {
        self.tile_steps(&self.block_steps()?)
    }

    /// Masks applied in the forward pass: the topology masks, or all ones
    /// while the mask is disabled.
    pub fn build_masks(&self) -> Result<MaskTensor> {
        if self.mask_enabled {
            self.topology_masks()
        } else {
            Ok(MaskTensor::ones(self.kernel.dims()))
        }
    }

    pub fn masked_kernel(&self) -> Result<Tensor4> {
        self.kernel.hadamard(self.build_masks()?.bits())
    }

    pub fn forward(&self, input: &Tensor4) -> Result<(Tensor4, LhcCache)> {
        let [_, h_i, w_i, _] = input.dims();
        let geom = self.geometry(h_i, w_i)?;
        let (masks, steps) = if self.mask_enabled {
            let steps = self.block_steps()?;
            (self.tile_steps(&steps)?, Some(steps))
        } else {
            (MaskTensor::ones(self.kernel.dims()), None)
        };
        let masked_kernel = self.kernel.hadamard(masks.bits())?;
        let output = conv2d_forward(input, &masked_kernel, &geom)?;
        Ok((
            output,
            LhcCache {
                generation: self.generation,
                geom,
                input: input.clone(),
                masks,
                masked_kernel,
                steps,
            },
        ))
    }

    pub fn backward(&self, cache: &LhcCache, upstream: &Tensor4) -> Result<LhcGrads> {
        if cache.generation != self.generation {
            return Err(LhcError::StaleCache {
                layer: self.generation,
                cache: cache.generation,
            });
        }
        let (grad_input, raw) =
            conv2d_backward(upstream, &cache.input, &cache.masked_kernel, &cache.geom)?;
        let grad_kernel = raw.hadamard(cache.masks.bits())?;

        let kk = self.k() * self.k();
        let (gx, gy) = self.effect.grid;
        let TopologyConstraints { c_gi, c_go } = self.constraints;
        let mut slices = vec![0.0; gx * gy * kk];
        let effect = match &cache.steps {
            Some(steps) => {
                let k = self.k();
                for bx in 0..gx {
                    for by in 0..gy {
                        let g = &mut slices[(bx * gy + by) * kk..][..kk];
                        for (j, gj) in g.iter_mut().enumerate() {
                            let (u, v) = (j / k, j % k);
                            let mut s = 0.0;
                            for x in bx * c_gi..(bx + 1) * c_gi {
                                for y in by * c_go..(by + 1) * c_go {
                                    s += self.kernel.at([u, v, x, y]) * raw.at([u, v, x, y]);
                                }
                            }
                            *gj = s;
                        }
                    }
                }
                self.effect_grad_from_slices(steps, &slices)?
            }
            None => vec![0.0; self.effect.len()],
        };
        Ok(LhcGrads {
            input: grad_input,
            kernel: grad_kernel,
            effect,
            slices,
        })
    }

    /// Chains per-block mask-slice gradients through the step surrogate.
    pub fn effect_grad_from_slices(&self, steps: &[BlockStep], slices: &[f64]) -> Result<Vec<f64>> {
        let kk = self.k() * self.k();
        if steps.len() != self.effect.block_count() {
            return Err(LhcError::shape(&[self.effect.block_count()], &[steps.len()]));
        }
        if slices.len() != steps.len() * kk {
            return Err(LhcError::shape(&[steps.len() * kk], &[slices.len()]));
        }
        let per = self.effect.per_block();
        let mut out = Vec::with_capacity(self.effect.len());
        for (step, g) in steps.iter().zip(slices.chunks(kk)) {
            match self.effect.mode {
                ShapeMode::Free => {
                    out.extend(step.surrogate.iter().zip(g).map(|(s, gv)| s * gv));
                }
                ShapeMode::Rigid => {
                    for (i, shape) in catalog().shapes().iter().enumerate().take(per) {
                        let proj: f64 = shape
                            .slice
                            .bits()
                            .iter()
                            .zip(g)
                            .filter(|(&b, _)| b)
                            .map(|(_, gv)| gv)
                            .sum();
                        out.push(step.surrogate[i] * proj);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Effect-factor gradient of a penalty whose derivative is the same value
    /// `per_element` at every mask element (such as the density loss).
    pub fn uniform_mask_effect_grad(&self, cache: &LhcCache, per_element: f64) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(LhcError::StaleCache {
                layer: self.generation,
                cache: cache.generation,
            });
        }
        let Some(steps) = &cache.steps else {
            return Ok(vec![0.0; self.effect.len()]);
        };
        let block = per_element * self.constraints.parallelism() as f64;
        let slices = vec![block; steps.len() * self.k() * self.k()];
        self.effect_grad_from_slices(steps, &slices)
    }
}
