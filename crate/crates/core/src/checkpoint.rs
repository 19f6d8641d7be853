//! Binary checkpoint and mask-snapshot formats. All integers are
//! little-endian `u32`, all reals little-endian IEEE-754 `f32`.
//!
//! Layer segment:
//!
//! ```text
//! "LHC1" | mode u8 (0 rigid, 1 free) | k c_i c_o c_gi c_go | kernel | effect factors
//! ```
//!
//! Kernel values run in `(k, k, c_i, c_o)` order; effect factors block by
//! block (input block major), 15 or `k * k` per block. Masks are never
//! stored; they are rebuilt from the effect factors.
//!
//! Model checkpoint:
//!
//! ```text
//! "LHCM" | version | in_channels | classes | n_layers
//! n_layers x (kind u8 (0 standard, 1 lhc) | stride | padding)
//! n_layers x layer segment
//! n_layers x c_o bias values
//! c_last x classes head weights | classes head biases
//! ```
//!
//! Mask snapshot:
//!
//! ```text
//! "LHCS" | epoch | n_layers | n_layers x (d0 d1 d2 d3 | ceil(len / 8) bytes, LSB first)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{LhcError, Result};
use crate::layer::{EffectFactors, LhcLayer, MaskTensor, ShapeMode, TopologyConstraints};
use crate::model::{Model, ModelLayer};
use crate::shapes::RIGID_SHAPES;
use crate::tensor::Tensor4;

pub const SEGMENT_MAGIC: &[u8; 4] = b"LHC1";
pub const MODEL_MAGIC: &[u8; 4] = b"LHCM";
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"LHCS";
pub const MODEL_VERSION: u32 = 1;

/// Upper bound on any single dimension read from disk.
const MAX_DIM: usize = 1 << 16;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LhcError::parse(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        if self.take(4, "magic")? != magic {
            return Err(LhcError::parse(
                at,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32(what)? as usize;
        if v > MAX_DIM {
            return Err(LhcError::parse(at, format!("{what} = {v} exceeds {MAX_DIM}")));
        }
        Ok(v)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| LhcError::parse(at, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(LhcError::parse(at + 4 * i, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LhcError::parse(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Contents of one layer segment; stride and padding live in the model
/// header.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSegment {
    pub kernel: Tensor4,
    pub effect: EffectFactors,
    pub constraints: TopologyConstraints,
}

impl LayerSegment {
    pub fn into_layer(self, stride: usize, padding: usize) -> Result<LhcLayer> {
        LhcLayer::from_parts(self.kernel, self.effect, self.constraints, stride, padding)
    }
}

pub fn encode_layer_segment(layer: &LhcLayer, out: &mut Vec<u8>) {
    let c = layer.constraints();
    out.extend_from_slice(SEGMENT_MAGIC);
    out.push(layer.mode().code());
    for v in [layer.k(), layer.c_i(), layer.c_o(), c.c_gi, c.c_go] {
        put_u32(out, v);
    }
    put_f32s(out, layer.kernel().data());
    put_f32s(out, layer.effect().values());
}

fn read_segment(r: &mut Reader<'_>) -> Result<LayerSegment> {
    r.magic(SEGMENT_MAGIC)?;
    let at = r.pos;
    let mode = ShapeMode::from_code(r.u8("mode")?)
        .ok_or_else(|| LhcError::parse(at, "unknown shape mode"))?;
    let at = r.pos;
    let k = r.dim("k")?;
    let c_i = r.dim("c_i")?;
    let c_o = r.dim("c_o")?;
    let c_gi = r.dim("c_gi")?;
    let c_go = r.dim("c_go")?;
    if k == 0 || c_i == 0 || c_o == 0 {
        return Err(LhcError::parse(at, "zero kernel dimension"));
    }
    let constraints = TopologyConstraints { c_gi, c_go };
    constraints
        .check(c_i, c_o)
        .map_err(|e| LhcError::parse(at, e.to_string()))?;
    let (gx, gy) = constraints.grid(c_i, c_o);
    let per = match mode {
        ShapeMode::Rigid => RIGID_SHAPES,
        ShapeMode::Free => k * k,
    };
    let kernel_len = k
        .checked_mul(k)
        .and_then(|v| v.checked_mul(c_i))
        .and_then(|v| v.checked_mul(c_o))
        .ok_or_else(|| LhcError::parse(at, "kernel size overflows"))?;
    let kernel = r.f32s(kernel_len, "kernel")?;
    let effect = r.f32s(gx * gy * per, "effect factors")?;
    let kernel = Tensor4::new([k, k, c_i, c_o], kernel)?;
    let effect = EffectFactors::new(mode, k, (gx, gy), effect)
        .map_err(|e| LhcError::parse(at, e.to_string()))?;
    Ok(LayerSegment {
        kernel,
        effect,
        constraints,
    })
}

/// Decodes exactly one layer segment.
pub fn decode_layer_segment(bytes: &[u8]) -> Result<LayerSegment> {
    let mut r = Reader::new(bytes);
    let seg = read_segment(&mut r)?;
    r.finish()?;
    Ok(seg)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION as usize);
    put_u32(&mut out, model.in_channels());
    put_u32(&mut out, model.classes());
    put_u32(&mut out, model.layers().len());
    for l in model.layers() {
        out.push(l.learns_topology as u8);
        put_u32(&mut out, l.conv.stride());
        put_u32(&mut out, l.conv.padding());
    }
    for l in model.layers() {
        encode_layer_segment(&l.conv, &mut out);
    }
    for l in model.layers() {
        put_f32s(&mut out, &l.bias);
    }
    let (w, b) = model.head();
    put_f32s(&mut out, w);
    put_f32s(&mut out, b);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let at = r.pos;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(LhcError::parse(at, format!("unsupported version {version}")));
    }
    let in_channels = r.dim("in_channels")?;
    let classes = r.dim("classes")?;
    let at = r.pos;
    let n = r.dim("layer count")?;
    if n == 0 {
        return Err(LhcError::parse(at, "model without layers"));
    }
    let mut header = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        let kind = match r.u8("layer kind")? {
            0 => false,
            1 => true,
            other => return Err(LhcError::parse(at, format!("unknown layer kind {other}"))),
        };
        header.push((kind, r.dim("stride")?, r.dim("padding")?, at));
    }
    let mut layers = Vec::with_capacity(n.min(1024));
    for &(learns, stride, padding, at) in &header {
        let seg = read_segment(&mut r)?;
        let mut conv = seg
            .into_layer(stride, padding)
            .map_err(|e| LhcError::parse(at, e.to_string()))?;
        conv.set_mask_enabled(learns);
        layers.push(ModelLayer {
            conv,
            bias: Vec::new(),
            learns_topology: learns,
        });
    }
    for l in &mut layers {
        l.bias = r.f32s(l.conv.c_o(), "bias")?;
    }
    let c_last = layers.last().map(|l| l.conv.c_o()).unwrap_or(in_channels);
    let at = r.pos;
    let head_w = r.f32s(c_last.saturating_mul(classes), "head weights")?;
    let head_b = r.f32s(classes, "head biases")?;
    r.finish()?;
    Model::from_parts(layers, in_channels, classes, head_w, head_b)
        .map_err(|e| LhcError::parse(at, e.to_string()))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

/// Per-layer masks recorded at the end of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub epoch: usize,
    pub masks: Vec<MaskTensor>,
}

pub fn encode_snapshot(snap: &MaskSnapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    put_u32(&mut out, snap.epoch);
    put_u32(&mut out, snap.masks.len());
    for m in &snap.masks {
        for d in m.dims() {
            put_u32(&mut out, d);
        }
        let mut bytes = vec![0u8; m.size().div_ceil(8)];
        for (i, &v) in m.bits().data().iter().enumerate() {
            if v != 0.0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<MaskSnapshot> {
    let mut r = Reader::new(bytes);
    r.magic(SNAPSHOT_MAGIC)?;
    let epoch = r.u32("epoch")? as usize;
    let n = r.dim("layer count")?;
    let mut masks = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        let dims = [r.dim("d0")?, r.dim("d1")?, r.dim("d2")?, r.dim("d3")?];
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| LhcError::parse(at, "mask size overflows"))?;
        let raw = r.take(len.div_ceil(8), "mask bits")?;
        if len % 8 != 0 && raw[len / 8] >> (len % 8) != 0 {
            return Err(LhcError::parse(r.pos - 1, "padding bits set"));
        }
        let data = (0..len)
            .map(|i| if raw[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
            .collect();
        masks.push(MaskTensor::new(Tensor4::new(dims, data)?)?);
    }
    r.finish()?;
    Ok(MaskSnapshot { epoch, masks })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{LayerKind, LayerSpec};

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = TopologyConstraints::new(2, 2).unwrap();
        let specs = [
            LayerSpec {
                kind: LayerKind::Standard,
                c_o: 4,
                k: 3,
                stride: 1,
                padding: 1,
                constraints: c,
            },
            LayerSpec {
                kind: LayerKind::Lhc(ShapeMode::Rigid),
                c_o: 4,
                k: 3,
                stride: 2,
                padding: 1,
                constraints: c,
            },
            LayerSpec {
                kind: LayerKind::Lhc(ShapeMode::Free),
                c_o: 6,
                k: 3,
                stride: 1,
                padding: 0,
                constraints: c,
            },
        ];
        Model::init(&specs, 3, 5, &mut rng).unwrap()
    }

    #[test]
    fn segment_layout() {
        let m = model();
        let mut buf = Vec::new();
        encode_layer_segment(&m.layers()[1].conv, &mut buf);
        assert_eq!(&buf[..4], b"LHC1");
        assert_eq!(buf[4], 0);
        assert_eq!(&buf[5..9], &3u32.to_le_bytes());
        let grid = 2 * 2;
        assert_eq!(buf.len(), 4 + 1 + 20 + 4 * (9 * 16 + grid * 15));
        let seg = decode_layer_segment(&buf).unwrap();
        assert_eq!(seg.kernel, *m.layers()[1].conv.kernel());
        assert_eq!(&seg.effect, m.layers()[1].conv.effect());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = model();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(encode_model(&back), bytes);
        let x = Tensor4::from_fn([2, 6, 6, 3], |i| (i[1] * 6 + i[2]) as f64 / 36.0 - i[3] as f64);
        assert_eq!(m.forward(&x).unwrap().0, back.forward(&x).unwrap().0);
        assert!(!back.layers()[0].learns_topology);
        assert!(!back.layers()[0].conv.mask_enabled());
    }

    #[test]
    fn truncation_reports_position() {
        let bytes = encode_model(&model());
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            match decode_model(&bytes[..cut]) {
                Err(LhcError::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(LhcError::Parse { offset: 0, .. })));
    }

    #[test]
    fn snapshot_round_trip() {
        let m = model();
        let snap = MaskSnapshot {
            epoch: 7,
            masks: m.topology_masks().unwrap(),
        };
        let bytes = encode_snapshot(&snap);
        assert_eq!(decode_snapshot(&bytes).unwrap(), snap);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 1);
        assert!(decode_snapshot(&bad).is_err());
    }

    #[test]
    fn oversized_dims_rejected_before_allocation() {
        let mut buf = Vec::new();
        buf.extend_from_slice(SEGMENT_MAGIC);
        buf.push(1);
        for v in [3u32, 60000, 60000, 1, 1] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            decode_layer_segment(&buf),
            Err(LhcError::Parse { .. })
        ));
    }
}
