//! Topology diagnostics: shape histograms, epoch-to-epoch mask overlap, and
//! the singular-value spectrum of a layer's doubly block Toeplitz operator.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};
use crate::layer::{catalog, LhcLayer, MaskTensor, ShapeMode};
use crate::shapes::{free_decode, free_encode, FREE_SHAPES, RIGID_SHAPES};
use crate::tensor::{conv2d_forward, ConvGeometry, Tensor4};

/// Largest operator (rows x columns) [`dbt_spectrum`] will decompose.
pub const SPECTRUM_MAX_ENTRIES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeHistogram {
    pub layer: usize,
    pub mode: ShapeMode,
    /// One bin per rigid shape (15) or free shape (512).
    pub counts: Vec<u64>,
    pub ratios: Vec<f64>,
}

impl ShapeHistogram {
    pub fn blocks(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Non-empty bins as `(bin, count)`, most frequent first, ties by bin.
    pub fn occupied(&self) -> Vec<(usize, u64)> {
        let mut v: Vec<_> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i, c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    fn label(&self, bin: usize) -> String {
        match self.mode {
            ShapeMode::Rigid => catalog().shapes()[bin].label(),
            ShapeMode::Free => free_decode(bin).map(|s| s.bit_string()).unwrap_or_default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with columns `bin,label,count,ratio`, one row per bin.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "label", "count", "ratio"])?;
        for (i, (c, r)) in self.counts.iter().zip(&self.ratios).enumerate() {
            w.write_record([
                i.to_string(),
                self.label(i),
                c.to_string(),
                r.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of the slice each block of `layer` selects. Rigid layers bin by
/// catalog index, free layers by free-shape index.
pub fn shape_distribution(layer: &LhcLayer, layer_id: usize) -> Result<ShapeHistogram> {
    let steps = layer.block_steps()?;
    let mode = layer.mode();
    let mut counts = vec![
        0u64;
        match mode {
            ShapeMode::Rigid => RIGID_SHAPES,
            ShapeMode::Free => FREE_SHAPES,
        }
    ];
    for s in &steps {
        let bin = match (mode, s.rigid_index) {
            (ShapeMode::Rigid, Some(i)) => i,
            _ => free_encode(&s.slice)?,
        };
        counts[bin] += 1;
    }
    let total = steps.len() as f64;
    let ratios = counts
        .iter()
        .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
        .collect();
    Ok(ShapeHistogram {
        layer: layer_id,
        mode,
        counts,
        ratios,
    })
}

/// Mean of the elementwise logical AND of two masks.
pub fn mask_correlation(a: &MaskTensor, b: &MaskTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(LhcError::shape(&a.dims(), &b.dims()));
    }
    if a.size() == 0 {
        return Ok(0.0);
    }
    let both = a
        .bits()
        .data()
        .iter()
        .zip(b.bits().data())
        .filter(|(&x, &y)| x != 0.0 && y != 0.0)
        .count();
    Ok(both as f64 / a.size() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    /// Snapshot `i` against snapshot `i - 1`.
    Adjacent,
    /// Every snapshot against snapshot `0`.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCorrelationSeries {
    pub layer: usize,
    pub pairing: Pairing,
    /// Epoch label of the later snapshot in each pair.
    pub epochs: Vec<usize>,
    pub values: Vec<f64>,
}

impl MaskCorrelationSeries {
    /// `snapshots` are `(epoch, masks)` in epoch order.
    pub fn compute(
        layer: usize,
        snapshots: &[(usize, &MaskTensor)],
        pairing: Pairing,
    ) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut values = Vec::new();
        for i in 1..snapshots.len() {
            let earlier = match pairing {
                Pairing::Adjacent => snapshots[i - 1].1,
                Pairing::Reference => snapshots[0].1,
            };
            epochs.push(snapshots[i].0);
            values.push(mask_correlation(earlier, snapshots[i].1)?);
        }
        Ok(Self {
            layer,
            pairing,
            epochs,
            values,
        })
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<f64> {
        self.epochs
            .iter()
            .position(|&e| e == epoch)
            .map(|i| self.values[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// How the convolution operator matrix is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DbtConstruction {
    /// Place each kernel tap directly at its (output, input) coordinate.
    Direct,
    /// Run the convolution on every unit impulse and stack the responses.
    ImpulseProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub layer: usize,
    pub input_size: (usize, usize),
    pub padding: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    /// Normalized entropy of the squared singular values, in [0, 1]; 1 is a
    /// perfectly flat spectrum. This score is our own quantification.
    pub uniformity: f64,
}

impl SpectrumReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with columns `index,singular_value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "singular_value"])?;
        for (i, s) in self.singular_values.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stride-1 operator mapping a flattened `(h, w, c_i)` input to the
/// flattened `(h_o, w_o, c_o)` output.
pub fn dbt_matrix(
    kernel: &Tensor4,
    input_size: (usize, usize),
    padding: usize,
    construction: DbtConstruction,
) -> Result<DMatrix<f64>> {
    let [k, _, c_i, c_o] = kernel.dims();
    let (h, w) = input_size;
    let geom = ConvGeometry::new(k, 1, padding, c_i, c_o, h, w)?;
    let rows = geom.h_o * geom.w_o * c_o;
    let cols = h * w * c_i;
    if rows.saturating_mul(cols) > SPECTRUM_MAX_ENTRIES {
        return Err(LhcError::InvalidArgument(format!(
            "operator of {rows}x{cols} exceeds the {SPECTRUM_MAX_ENTRIES}-entry limit"
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    match construction {
        DbtConstruction::Direct => {
            for oy in 0..geom.h_o {
                for ox in 0..geom.w_o {
                    for ky in 0..k {
                        let Some(iy) = geom.source(oy, ky, h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = geom.source(ox, kx, w) else {
                                continue;
                            };
                            for ci in 0..c_i {
                                for co in 0..c_o {
                                    let r = (oy * geom.w_o + ox) * c_o + co;
                                    let c = (iy * w + ix) * c_i + ci;
                                    m[(r, c)] += kernel.at([ky, kx, ci, co]);
                                }
                            }
                        }
                    }
                }
            }
        }
        DbtConstruction::ImpulseProbe => {
            // All impulses as one batch.
            let probe = Tensor4::from_fn([cols, h, w, c_i], |[n, y, x, c]| {
                if (y * w + x) * c_i + c == n {
                    1.0
                } else {
                    0.0
                }
            });
            let resp = conv2d_forward(&probe, kernel, &geom)?;
            for c in 0..cols {
                for r in 0..rows {
                    m[(r, c)] = resp.data()[c * rows + r];
                }
            }
        }
    }
    Ok(m)
}

/// Normalized entropy of `s_i^2 / sum s^2`; 0 for an all-zero spectrum.
pub fn spectrum_uniformity(singular_values: &[f64]) -> f64 {
    let energy: f64 = singular_values.iter().map(|s| s * s).sum();
    if energy == 0.0 {
        return 0.0;
    }
    let n = singular_values.len();
    if n == 1 {
        return 1.0;
    }
    let h: f64 = singular_values
        .iter()
        .map(|s| s * s / energy)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (n as f64).ln()
}

pub fn dbt_spectrum_with(
    kernel: &Tensor4,
    input_size: (usize, usize),
    padding: usize,
    construction: DbtConstruction,
    layer: usize,
) -> Result<SpectrumReport> {
    let m = dbt_matrix(kernel, input_size, padding, construction)?;
    let mut sv: Vec<f64> = m.singular_values().iter().map(|s| s.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectrumReport {
        layer,
        input_size,
        padding,
        uniformity: spectrum_uniformity(&sv),
        singular_values: sv,
    })
}

/// Singular values of the masked kernel's convolution operator at
/// `input_size`, stride 1.
pub fn dbt_spectrum(
    masked_kernel: &Tensor4,
    input_size: (usize, usize),
    padding: usize,
) -> Result<SpectrumReport> {
    dbt_spectrum_with(masked_kernel, input_size, padding, DbtConstruction::Direct, 0)
}
