//! Density-targeted mask regularization, the two warm-up schedules, and
//! multiply-accumulate accounting.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};
use crate::layer::{MaskTensor, TopologyConstraints};
use crate::tensor::ConvGeometry;

fn check_target(d_t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&d_t) {
        return Err(LhcError::InvalidArgument(format!(
            "density target {d_t} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Fraction of ones over all masks taken together.
pub fn global_density(masks: &[&MaskTensor]) -> f64 {
    let size: usize = masks.iter().map(|m| m.size()).sum();
    if size == 0 {
        return 0.0;
    }
    masks.iter().map(|m| m.count_ones()).sum::<usize>() as f64 / size as f64
}

/// `|d_t - sum ||M||_1 / sum size(M)|`.
pub fn mask_loss(masks: &[&MaskTensor], d_t: f64) -> Result<f64> {
    check_target(d_t)?;
    Ok((d_t - global_density(masks)).abs())
}

/// Derivative of [`mask_loss`] with respect to any single mask element. The
/// loss depends on the masks only through their summed ones, so this is one
/// number for all elements (zero exactly at the target).
pub fn mask_loss_element_grad(masks: &[&MaskTensor], d_t: f64) -> Result<f64> {
    check_target(d_t)?;
    let size: usize = masks.iter().map(|m| m.size()).sum();
    if size == 0 {
        return Ok(0.0);
    }
    let gap = global_density(masks) - d_t;
    let sign = if gap > 0.0 {
        1.0
    } else if gap < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(sign / size as f64)
}

pub fn total_loss(l_task: f64, l_mask: f64, alpha: f64) -> f64 {
    alpha * l_mask + l_task
}

/// Mask-enabling probability for 1-based `epoch`: `(epoch - 1) / n_warm`,
/// clamped to 1.
pub fn enable_probability(epoch: usize, n_warm: usize) -> f64 {
    if n_warm == 0 {
        return 1.0;
    }
    (epoch.saturating_sub(1) as f64 / n_warm as f64).min(1.0)
}

/// Independent per-layer enable decisions for one epoch.
pub fn mask_enable_schedule<R: Rng + ?Sized>(
    epoch: usize,
    n_warm: usize,
    layers: usize,
    rng: &mut R,
) -> Vec<bool> {
    let p = enable_probability(epoch, n_warm);
    (0..layers)
        .map(|_| {
            // Draw unconditionally so the stream position does not depend on p.
            let u: f64 = rng.random();
            u < p
        })
        .collect()
}

/// Which task loss sets the loss scale `f` of the alpha warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScaleSource {
    /// Measured once, after the first epoch, and kept.
    #[default]
    FirstEpoch,
    /// Refreshed from the previous epoch throughout the warm-up, then frozen.
    LatestEpoch,
}

/// Density target plus the regularization-weight warm-up state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityObjective {
    /// `None` disables the mask loss entirely.
    pub target: Option<f64>,
    pub alpha_t: f64,
    pub n_warm: usize,
    pub scale_source: ScaleSource,
    alpha: f64,
    scale: Option<f64>,
}

impl DensityObjective {
    pub fn new(target: Option<f64>, alpha_t: f64, n_warm: usize) -> Result<Self> {
        if let Some(d) = target {
            check_target(d)?;
        }
        if !(alpha_t.is_finite() && alpha_t > 0.0) {
            return Err(LhcError::InvalidArgument(format!(
                "alpha_t must be positive, got {alpha_t}"
            )));
        }
        if n_warm == 0 {
            return Err(LhcError::InvalidArgument("n_warm must be positive".into()));
        }
        Ok(Self {
            target,
            alpha_t,
            n_warm,
            scale_source: ScaleSource::default(),
            alpha: 0.0,
            scale: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Loss scale `f = l_task / |1 - d_t|` last used, if any.
    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn with_scale_source(mut self, source: ScaleSource) -> Self {
        self.scale_source = source;
        self
    }

    /// Weight for 1-based `epoch`, given the task loss of the epoch before.
    ///
    /// During warm-up `alpha = f * (alpha_t / n_warm) * (epoch - 1)`, where
    /// `f = l_task / |1 - d_t|` comes from the first epoch or, with
    /// [`ScaleSource::LatestEpoch`], from every warm-up epoch. From epoch
    /// `n_warm + 2` on `f` stays frozen and `alpha = f * alpha_t`.
    pub fn alpha_schedule(&mut self, epoch: usize, l_task: f64) -> f64 {
        let Some(d_t) = self.target else {
            self.alpha = 0.0;
            return 0.0;
        };
        if epoch <= 1 {
            self.alpha = 0.0;
            return 0.0;
        }
        let l_max = (1.0 - d_t).abs();
        // A fully dense target has no upper loss bound; fall back to f = l_task.
        let fresh = if l_max > 0.0 { l_task / l_max } else { l_task };
        let warm = epoch <= self.n_warm + 1;
        let f = match (self.scale, self.scale_source) {
            (Some(f), ScaleSource::FirstEpoch) => f,
            (Some(f), ScaleSource::LatestEpoch) if !warm => f,
            _ => fresh,
        };
        self.scale = Some(f);
        let delta = self.alpha_t / self.n_warm as f64;
        let steps = (epoch - 1).min(self.n_warm) as f64;
        self.alpha = f * delta * steps;
        self.alpha
    }
}

/// Dense multiply-accumulates: `h_o * w_o * c_i * c_o * k^2`.
pub fn flops_std(geom: &ConvGeometry) -> u64 {
    (geom.h_o * geom.w_o * geom.c_i * geom.c_o * geom.k * geom.k) as u64
}

/// Structured-sparse multiply-accumulates:
/// `h_o * w_o * c_gi * c_go * sum over blocks of the slice L0`.
pub fn flops_lhc(
    geom: &ConvGeometry,
    masks: &MaskTensor,
    constraints: TopologyConstraints,
) -> Result<u64> {
    if masks.dims() != geom.kernel_dims() {
        return Err(LhcError::shape(&geom.kernel_dims(), &masks.dims()));
    }
    let l0: usize = masks
        .block_slices(constraints)?
        .iter()
        .map(|s| s.l0())
        .sum();
    Ok((geom.h_o * geom.w_o * constraints.parallelism() * l0) as u64)
}

pub fn flops_delta(
    geom: &ConvGeometry,
    masks: &MaskTensor,
    constraints: TopologyConstraints,
) -> Result<u64> {
    Ok(flops_std(geom) - flops_lhc(geom, masks, constraints)?)
}

/// Training-time overhead of topology learning: extra storage for effect
/// factors relative to the kernel, `1 / (c_gi * c_go)`, and extra compute
/// for mask construction relative to the convolution, `1 / (h_o * w_o)`.
pub fn training_overhead(geom: &ConvGeometry, constraints: TopologyConstraints) -> (f64, f64) {
    (
        1.0 / constraints.parallelism() as f64,
        1.0 / (geom.h_o * geom.w_o) as f64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    #[serde(rename = "C_STD")]
    pub c_std: u64,
    #[serde(rename = "C_LHC")]
    pub c_lhc: u64,
    pub delta: u64,
    pub density: f64,
}

/// Per-layer and total computation. Counts are multiply-accumulates unless
/// `unit` says otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub unit: String,
    pub layers: Vec<LayerFlops>,
    pub total_std: u64,
    pub total_lhc: u64,
    pub total_delta: u64,
    pub global_density: f64,
}

impl FlopsReport {
    /// Builds a report from `(geometry, masks, constraints)` per layer.
    pub fn compute(layers: &[(ConvGeometry, &MaskTensor, TopologyConstraints)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(layers.len());
        for (i, (geom, masks, c)) in layers.iter().enumerate() {
            let c_std = flops_std(geom);
            let c_lhc = flops_lhc(geom, masks, *c)?;
            rows.push(LayerFlops {
                layer: i,
                c_std,
                c_lhc,
                delta: c_std - c_lhc,
                density: masks.density(),
            });
        }
        let masks: Vec<&MaskTensor> = layers.iter().map(|l| l.1).collect();
        let total_std = rows.iter().map(|r| r.c_std).sum();
        let total_lhc = rows.iter().map(|r| r.c_lhc).sum();
        Ok(Self {
            unit: "MACs".into(),
            layers: rows,
            total_std,
            total_lhc,
            total_delta: total_std - total_lhc,
            global_density: global_density(&masks),
        })
    }

    /// Same report with counts doubled (one multiply plus one add).
    pub fn as_flops(&self) -> Self {
        let mut r = self.clone();
        r.unit = "FLOPs".into();
        for l in &mut r.layers {
            l.c_std *= 2;
            l.c_lhc *= 2;
            l.delta *= 2;
        }
        r.total_std *= 2;
        r.total_lhc *= 2;
        r.total_delta *= 2;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with columns `layer,C_STD,C_LHC,delta,density`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::shapes::ShapeSlice;

    fn geom(h_o: usize, c_i: usize, c_o: usize, k: usize) -> ConvGeometry {
        // Stride 1, no padding: h_i = h_o + k - 1.
        ConvGeometry::new(k, 1, 0, c_i, c_o, h_o + k - 1, h_o + k - 1).unwrap()
    }

    #[test]
    fn mask_loss_values() {
        let ones = MaskTensor::ones([3, 3, 2, 2]);
        assert!((mask_loss(&[&ones], 0.1).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(mask_loss(&[&ones], 1.0).unwrap(), 0.0);
        let zeros = MaskTensor::zeros([3, 3, 2, 2]);
        assert_eq!(mask_loss(&[&zeros], 0.0).unwrap(), 0.0);
        assert_eq!(mask_loss(&[&ones, &zeros], 0.5).unwrap(), 0.0);
        assert!(mask_loss(&[&ones], 1.5).is_err());
    }

    #[test]
    fn mask_loss_element_grad_sign() {
        let ones = MaskTensor::ones([3, 3, 2, 2]);
        assert_eq!(mask_loss_element_grad(&[&ones], 0.25).unwrap(), 1.0 / 36.0);
        let zeros = MaskTensor::zeros([3, 3, 2, 2]);
        assert_eq!(mask_loss_element_grad(&[&zeros], 0.25).unwrap(), -1.0 / 36.0);
        assert_eq!(mask_loss_element_grad(&[&zeros], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.3, 0.7, 0.0), 1.3);
        assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
    }

    #[test]
    fn enable_schedule_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(mask_enable_schedule(1, 10, 50, &mut rng).iter().all(|&e| !e));
        assert!(mask_enable_schedule(11, 10, 50, &mut rng).iter().all(|&e| e));
        assert!(mask_enable_schedule(30, 10, 50, &mut rng).iter().all(|&e| e));
    }

    #[test]
    fn enable_schedule_midpoint_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = mask_enable_schedule(6, 10, 10_000, &mut rng);
        let rate = draws.iter().filter(|&&e| e).count() as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn alpha_warm_up() {
        let mut obj = DensityObjective::new(Some(0.1), 1.0, 10)
            .unwrap()
            .with_scale_source(ScaleSource::LatestEpoch);
        assert_eq!(obj.alpha_schedule(1, 5.0), 0.0);
        // f = 0.9 / |1 - 0.1| = 1, so alpha = delta * (i - 1).
        for i in 2..=11 {
            let a = obj.alpha_schedule(i, 0.9);
            assert!((a - 0.1 * (i - 1) as f64).abs() < 1e-12, "epoch {i}: {a}");
        }
        // Held with f frozen, even if the task loss moves.
        let a = obj.alpha_schedule(15, 0.1);
        assert!((a - 1.0).abs() < 1e-12);
        assert_eq!(obj.scale(), Some(1.0));
    }

    #[test]
    fn alpha_scale_from_first_epoch() {
        let mut obj = DensityObjective::new(Some(0.5), 2.0, 4).unwrap();
        assert_eq!(obj.alpha_schedule(1, 9.0), 0.0);
        // f = 1.5 / 0.5 = 3 from the first epoch, ignoring later losses.
        assert!((obj.alpha_schedule(2, 1.5) - 1.5).abs() < 1e-12);
        assert!((obj.alpha_schedule(3, 0.01) - 3.0).abs() < 1e-12);
        assert!((obj.alpha_schedule(9, 0.01) - 6.0).abs() < 1e-12);
        assert_eq!(obj.scale(), Some(3.0));
    }

    #[test]
    fn alpha_disabled_target() {
        let mut obj = DensityObjective::new(None, 1.0, 10).unwrap();
        for i in 1..30 {
            assert_eq!(obj.alpha_schedule(i, 2.3), 0.0);
        }
    }

    #[test]
    fn objective_validation() {
        assert!(DensityObjective::new(Some(-0.1), 1.0, 10).is_err());
        assert!(DensityObjective::new(Some(0.1), 0.0, 10).is_err());
        assert!(DensityObjective::new(Some(0.1), 1.0, 0).is_err());
    }

    #[test]
    fn flops_standard() {
        assert_eq!(flops_std(&geom(1, 1, 1, 3)), 9);
        assert_eq!(flops_std(&geom(4, 2, 2, 3)), 576);
        assert_eq!(flops_std(&geom(4, 2, 3, 1)), 4 * 4 * 2 * 3);
    }

    #[test]
    fn flops_lhc_limits() {
        let g = geom(4, 4, 4, 3);
        let c = TopologyConstraints::new(2, 2).unwrap();
        let ones = MaskTensor::ones([3, 3, 4, 4]);
        assert_eq!(flops_lhc(&g, &ones, c).unwrap(), flops_std(&g));
        assert_eq!(flops_delta(&g, &ones, c).unwrap(), 0);
        let zeros = MaskTensor::zeros([3, 3, 4, 4]);
        assert_eq!(flops_lhc(&g, &zeros, c).unwrap(), 0);
        assert_eq!(flops_delta(&g, &zeros, c).unwrap(), flops_std(&g));
    }

    #[test]
    fn flops_single_dot_block() {
        let g = geom(4, 2, 2, 3);
        let c = TopologyConstraints::new(2, 2).unwrap();
        let m = MaskTensor::tile(3, 2, 2, c, &[ShapeSlice::center_dot(3)]).unwrap();
        assert_eq!(flops_lhc(&g, &m, c).unwrap() * 9, flops_std(&g));
    }

    #[test]
    fn flops_rejects_unstructured_masks() {
        let g = geom(2, 2, 2, 3);
        let c = TopologyConstraints::new(2, 2).unwrap();
        let mut bits = crate::tensor::Tensor4::filled([3, 3, 2, 2], 1.0);
        bits.set([0, 0, 1, 1], 0.0);
        let m = MaskTensor::new(bits).unwrap();
        assert!(flops_lhc(&g, &m, c).is_err());
        assert!(flops_lhc(&g, &m, TopologyConstraints::new(1, 1).unwrap()).is_ok());
    }

    #[test]
    fn overhead_ratios() {
        let c = TopologyConstraints::new(64, 8).unwrap();
        let g = ConvGeometry::new(3, 1, 1, 64, 8, 16, 16).unwrap();
        let (storage, compute) = training_overhead(&g, c);
        assert_eq!(format!("{:.4}%", storage * 100.0), "0.1953%");
        assert_eq!(compute, 1.0 / 256.0);
        let (storage, _) = training_overhead(&g, TopologyConstraints::new(8, 4).unwrap());
        assert_eq!(storage, 0.03125);
    }

    #[test]
    fn report_outputs() {
        let g = geom(2, 2, 2, 3);
        let c = TopologyConstraints::new(1, 1).unwrap();
        let ones = MaskTensor::ones([3, 3, 2, 2]);
        let zeros = MaskTensor::zeros([3, 3, 2, 2]);
        let r = FlopsReport::compute(&[(g, &ones, c), (g, &zeros, c)]).unwrap();
        assert_eq!(r.total_std, 2 * 144);
        assert_eq!(r.total_lhc, 144);
        assert_eq!(r.global_density, 0.5);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(
            csv,
            "layer,C_STD,C_LHC,delta,density\n0,144,144,0,1.0\n1,144,0,144,0.0\n"
        );
        assert_eq!(r.as_flops().total_lhc, 288);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["layers"][1]["C_STD"], 144);
    }
}
