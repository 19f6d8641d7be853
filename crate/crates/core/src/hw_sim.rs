//! Clock-level model of the structured-sparse inference datapath.
//!
//! Input features are held `c_gi`-aligned: every sliding window is copied
//! into a window buffer of `k * k * c_i / c_gi` rows of `c_gi` values. The
//! weight buffer holds `c_gi * c_go` values per row, grouped by output
//! channel group; rows that are entirely zero are dropped at pack time. For
//! every retained row an incrementing address generator (AGU) walks the
//! weight buffer while the precomputed address lookup table (ALUT) names the
//! window-buffer row it multiplies. One retained row is one clock: `c_gi *
//! c_go` multiplies feed `c_go` output registers.
//!
//! Buffer-fill clocks are counted separately and left out of the headline
//! ratios, as are pipeline fill and drain. The window buffer is single
//! buffered. The batch axis only widens the MAC array.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};
use crate::layer::{LhcLayer, TopologyConstraints};
use crate::tensor::{ConvGeometry, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    k: usize,
    c_i: usize,
    c_o: usize,
    constraints: TopologyConstraints,
    rows: Vec<f64>,
    alut: Vec<usize>,
    group_rows: Vec<Range<usize>>,
    skipped_rows: usize,
}

impl PackedWeights {
    pub fn row_len(&self) -> usize {
        self.constraints.parallelism()
    }

    pub fn row_count(&self) -> usize {
        self.alut.len()
    }

    /// Weights of retained row `r`, input-channel major.
    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.row_len();
        &self.rows[r * n..(r + 1) * n]
    }

    pub fn alut(&self) -> &[usize] {
        &self.alut
    }

    pub fn skipped_rows(&self) -> usize {
        self.skipped_rows
    }

    /// Rows of a fully dense packing: `k * k * (c_i / c_gi) * (c_o / c_go)`.
    pub fn dense_rows(&self) -> usize {
        let (gx, gy) = self.constraints.grid(self.c_i, self.c_o);
        self.k * self.k * gx * gy
    }

    /// Retained-row range belonging to output group `g`.
    pub fn group_rows(&self, g: usize) -> Range<usize> {
        self.group_rows[g].clone()
    }

    pub fn constraints(&self) -> TopologyConstraints {
        self.constraints
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.k, self.k, self.c_i, self.c_o]
    }

    fn window_rows(&self) -> usize {
        self.k * self.k * (self.c_i / self.constraints.c_gi)
    }

    /// Cheap consistency checks on a packing that may have been edited.
    fn validate(&self) -> Result<()> {
        let n = self.row_len();
        if self.rows.len() != self.alut.len() * n {
            return Err(LhcError::Packing(format!(
                "{} weight values for {} ALUT entries of width {n}",
                self.rows.len(),
                self.alut.len()
            )));
        }
        if self.alut.len() + self.skipped_rows != self.dense_rows() {
            return Err(LhcError::Packing(format!(
                "{} retained + {} skipped rows, expected {}",
                self.alut.len(),
                self.skipped_rows,
                self.dense_rows()
            )));
        }
        let mut next = 0;
        for r in &self.group_rows {
            if r.start != next || r.end < r.start {
                return Err(LhcError::Packing("output group ranges are not contiguous".into()));
            }
            next = r.end;
        }
        if next != self.alut.len() {
            return Err(LhcError::Packing(format!(
                "output groups cover {next} rows, ALUT has {}",
                self.alut.len()
            )));
        }
        let limit = self.window_rows();
        if let Some(a) = self.alut.iter().find(|&&a| a >= limit) {
            return Err(LhcError::Packing(format!(
                "ALUT address {a} outside window buffer of {limit} rows"
            )));
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn alut_mut(&mut self) -> &mut Vec<usize> {
        &mut self.alut
    }
}

/// Packs a (masked) kernel into `c_gi * c_go`-wide rows. Rows run
/// output-group major, then input block, then kernel offset; all-zero rows
/// are skipped and never loaded.
pub fn pack_weights(kernel: &Tensor4, constraints: TopologyConstraints) -> Result<PackedWeights> {
    let [k, k2, c_i, c_o] = kernel.dims();
    if k != k2 {
        return Err(LhcError::InvalidArgument(format!(
            "kernel must be square, got {k}x{k2}"
        )));
    }
    constraints.check(c_i, c_o)?;
    let TopologyConstraints { c_gi, c_go } = constraints;
    let (gx, gy) = constraints.grid(c_i, c_o);
    let mut rows = Vec::new();
    let mut alut = Vec::new();
    let mut group_rows = Vec::with_capacity(gy);
    let mut skipped_rows = 0;
    let mut row = vec![0.0; c_gi * c_go];
    for og in 0..gy {
        let start = alut.len();
        for ib in 0..gx {
            for ky in 0..k {
                for kx in 0..k {
                    for ci in 0..c_gi {
                        for co in 0..c_go {
                            row[ci * c_go + co] =
                                kernel.at([ky, kx, ib * c_gi + ci, og * c_go + co]);
                        }
                    }
                    if row.iter().all(|&v| v == 0.0) {
                        skipped_rows += 1;
                    } else {
                        rows.extend_from_slice(&row);
                        alut.push((ky * k + kx) * gx + ib);
                    }
                }
            }
        }
        group_rows.push(start..alut.len());
    }
    Ok(PackedWeights {
        k,
        c_i,
        c_o,
        constraints,
        rows,
        alut,
        group_rows,
        skipped_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// 32-bit operands and accumulators, as on the device.
    F32,
    /// 64-bit reference mode.
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacArrayConfig {
    pub c_gi: usize,
    pub c_go: usize,
    pub batch: usize,
    pub precision: Precision,
}

impl MacArrayConfig {
    pub fn new(constraints: TopologyConstraints, batch: usize, precision: Precision) -> Self {
        Self {
            c_gi: constraints.c_gi,
            c_go: constraints.c_go,
            batch,
            precision,
        }
    }

    /// Multiplies per clock: `b * c_gi * c_go`.
    pub fn parallelism(&self) -> usize {
        self.batch * self.c_gi * self.c_go
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub parallelism: usize,
    pub clocks: u64,
    pub dense_clocks: u64,
    pub fill_clocks: u64,
    pub memory_rows: usize,
    pub dense_rows: usize,
    pub skipped_rows: usize,
    pub clock_ratio: f64,
    pub memory_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

struct Trace<'a, 'w> {
    out: Option<&'a mut (dyn Write + 'w)>,
    layer: usize,
}

fn simulate_inner(
    input: &Tensor4,
    packed: &PackedWeights,
    geom: &ConvGeometry,
    config: &MacArrayConfig,
    trace: &mut Trace<'_, '_>,
) -> Result<(Tensor4, LayerReport)> {
    packed.validate()?;
    let c = packed.constraints;
    if (config.c_gi, config.c_go) != (c.c_gi, c.c_go) {
        return Err(LhcError::Packing(format!(
            "MAC array {}x{} does not match packing {}x{}",
            config.c_gi, config.c_go, c.c_gi, c.c_go
        )));
    }
    if packed.kernel_dims() != geom.kernel_dims() {
        return Err(LhcError::shape(&geom.kernel_dims(), &packed.kernel_dims()));
    }
    let b = input.dims()[0];
    if input.dims() != geom.input_dims(b) {
        return Err(LhcError::shape(&geom.input_dims(b), &input.dims()));
    }
    if config.batch != b {
        return Err(LhcError::InvalidArgument(format!(
            "MAC array configured for batch {}, input has {b}",
            config.batch
        )));
    }

    let g = *geom;
    let (c_gi, c_go) = (c.c_gi, c.c_go);
    let n_ib = g.c_i / c_gi;
    let n_og = g.c_o / c_go;
    let win_rows = packed.window_rows();
    let f32_mode = config.precision == Precision::F32;
    let q = |v: f64| if f32_mode { v as f32 as f64 } else { v };

    let rows: Vec<f64> = packed.rows.iter().map(|&v| q(v)).collect();
    let mut window = vec![0.0; b * win_rows * c_gi];
    let mut regs = vec![0.0; b * c_go];
    let mut out = Tensor4::zeros(g.output_dims(b));
    let mut clocks = 0u64;
    let mut fill_clocks = 0u64;

    for oy in 0..g.h_o {
        for ox in 0..g.w_o {
            // Window fill: one clock per buffer row, all batch lanes at once.
            for n in 0..b {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let src = g
                            .source(oy, ky, g.h_i)
                            .zip(g.source(ox, kx, g.w_i));
                        for ib in 0..n_ib {
                            let addr = (ky * g.k + kx) * n_ib + ib;
                            let dst = &mut window[(n * win_rows + addr) * c_gi..][..c_gi];
                            match src {
                                Some((iy, ix)) => {
                                    for (ci, d) in dst.iter_mut().enumerate() {
                                        *d = q(input.at([n, iy, ix, ib * c_gi + ci]));
                                    }
                                }
                                None => dst.fill(0.0),
                            }
                        }
                    }
                }
            }
            fill_clocks += win_rows as u64;

            for og in 0..n_og {
                regs.fill(0.0);
                for r in packed.group_rows(og) {
                    clocks += 1;
                    let addr = packed.alut[r];
                    if let Some(w) = trace.out.as_deref_mut() {
                        writeln!(w, "{} {},{} {} {}", trace.layer, oy, ox, r, addr)?;
                    }
                    let wrow = &rows[r * c_gi * c_go..][..c_gi * c_go];
                    for n in 0..b {
                        let x = &window[(n * win_rows + addr) * c_gi..][..c_gi];
                        let reg = &mut regs[n * c_go..][..c_go];
                        for (co, acc) in reg.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (ci, &xv) in x.iter().enumerate() {
                                s = q(s + q(xv * wrow[ci * c_go + co]));
                            }
                            *acc = q(*acc + s);
                        }
                    }
                }
                for n in 0..b {
                    for co in 0..c_go {
                        out.set([n, oy, ox, og * c_go + co], regs[n * c_go + co]);
                    }
                }
            }
        }
    }

    let dense_rows = packed.dense_rows();
    let dense_clocks = (g.h_o * g.w_o * dense_rows) as u64;
    let report = LayerReport {
        layer: trace.layer,
        h_o: g.h_o,
        w_o: g.w_o,
        parallelism: config.parallelism(),
        clocks,
        dense_clocks,
        fill_clocks,
        memory_rows: packed.row_count(),
        dense_rows,
        skipped_rows: packed.skipped_rows,
        clock_ratio: ratio(clocks as f64, dense_clocks as f64),
        memory_ratio: ratio(packed.row_count() as f64, dense_rows as f64),
    };
    Ok((out, report))
}

/// Runs one layer through the datapath. `trace`, when given, receives one
/// line per MAC clock: `layer window_y,window_x row alut_address`.
pub fn simulate_layer(
    input: &Tensor4,
    packed: &PackedWeights,
    geom: &ConvGeometry,
    config: &MacArrayConfig,
    trace: Option<&mut dyn Write>,
) -> Result<(Tensor4, LayerReport)> {
    simulate_inner(input, packed, geom, config, &mut Trace { out: trace, layer: 0 })
}

/// One convolution of a simulated model plus the host-side epilogue that
/// follows it (bias and rectifier are not clocked).
#[derive(Debug, Clone)]
pub struct SimStage {
    pub packed: PackedWeights,
    pub stride: usize,
    pub padding: usize,
    pub bias: Option<Vec<f64>>,
    pub relu: bool,
}

impl SimStage {
    pub fn from_layer(layer: &LhcLayer, bias: Option<Vec<f64>>, relu: bool) -> Result<Self> {
        Ok(Self {
            packed: pack_weights(&layer.masked_kernel()?, layer.constraints())?,
            stride: layer.stride(),
            padding: layer.padding(),
            bias,
            relu,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub layers: Vec<LayerReport>,
    pub clocks: u64,
    pub dense_clocks: u64,
    pub fill_clocks: u64,
    pub memory_rows: usize,
    pub dense_rows: usize,
    pub skipped_rows: usize,
    pub clock_ratio: f64,
    pub memory_ratio: f64,
    /// Energy proxy, proportional to MAC clocks.
    pub energy_proxy: u64,
    pub notes: Vec<String>,
}

impl SimReport {
    pub fn from_layers(layers: Vec<LayerReport>) -> Self {
        let clocks = layers.iter().map(|l| l.clocks).sum();
        let dense_clocks = layers.iter().map(|l| l.dense_clocks).sum();
        let memory_rows = layers.iter().map(|l| l.memory_rows).sum();
        let dense_rows = layers.iter().map(|l| l.dense_rows).sum();
        Self {
            clocks,
            dense_clocks,
            fill_clocks: layers.iter().map(|l| l.fill_clocks).sum(),
            memory_rows,
            dense_rows,
            skipped_rows: layers.iter().map(|l| l.skipped_rows).sum(),
            clock_ratio: ratio(clocks as f64, dense_clocks as f64),
            memory_ratio: ratio(memory_rows as f64, dense_rows as f64),
            energy_proxy: clocks,
            notes: vec![
                "ratios count MAC clocks only; window-buffer fill is reported separately".into(),
                "pipeline fill/drain not modeled".into(),
                "single-buffered window buffer".into(),
            ],
            layers,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One CSV row per layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs a chain of stages, feeding each output (after its epilogue) into
/// the next stage.
pub fn simulate_model(
    stages: &[SimStage],
    input: &Tensor4,
    precision: Precision,
    mut trace: Option<&mut dyn Write>,
) -> Result<(Tensor4, SimReport)> {
    let mut x = input.clone();
    let mut reports = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        let [k, _, c_i, c_o] = st.packed.kernel_dims();
        let [b, h, w, c] = x.dims();
        if c != c_i {
            return Err(LhcError::InvalidArgument(format!(
                "stage {i} expects {c_i} input channels, previous stage produced {c}"
            )));
        }
        let geom = ConvGeometry::new(k, st.stride, st.padding, c_i, c_o, h, w)?;
        let config = MacArrayConfig::new(st.packed.constraints, b, precision);
        let mut tr = Trace {
            out: trace.as_deref_mut(),
            layer: i,
        };
        let (mut y, report) = simulate_inner(&x, &st.packed, &geom, &config, &mut tr)?;
        if let Some(bias) = &st.bias {
            if bias.len() != c_o {
                return Err(LhcError::shape(&[c_o], &[bias.len()]));
            }
            for (j, v) in y.data_mut().iter_mut().enumerate() {
                *v += bias[j % c_o];
            }
        }
        if st.relu {
            for v in y.data_mut() {
                *v = v.max(0.0);
            }
        }
        if precision == Precision::F32 {
            for v in y.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        reports.push(report);
        x = y;
    }
    Ok((x, SimReport::from_layers(reports)))
}
