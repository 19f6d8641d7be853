//! Fixed LHC configurations that reproduce classical convolution variants.
//!
//! Each constructor keeps the source layer's kernel, stride and padding,
//! replaces the topology constraints, and forces the effect factors so the
//! step function selects the intended slice in every block: in rigid mode
//! the chosen shape scores +1 and the rest 0, in free mode each cell scores
//! +1 or -1.

use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};
use crate::layer::{catalog, EffectFactors, LhcLayer, ShapeMode, TopologyConstraints};
use crate::shapes::ShapeSlice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerationKind {
    /// Group-wise convolution with `n` groups.
    Gwc(usize),
    /// Depth-wise convolution with channel multiplier `c_o / c_i`.
    Dwc(usize),
    /// Heterogeneous kernels with one full slice per `p` input channels.
    HetConv(usize),
}

/// Effect factors that make every block `(x, y)` select `pick(x, y)`.
pub fn forced_effect(
    mode: ShapeMode,
    k: usize,
    grid: (usize, usize),
    pick: impl Fn(usize, usize) -> ShapeSlice,
) -> Result<EffectFactors> {
    let mut values = Vec::new();
    for x in 0..grid.0 {
        for y in 0..grid.1 {
            let slice = pick(x, y);
            match mode {
                ShapeMode::Rigid => {
                    let idx = catalog().position(&slice).ok_or_else(|| {
                        LhcError::InvalidArgument(format!(
                            "slice {} is not a rigid shape",
                            slice.bit_string()
                        ))
                    })?;
                    values.extend((0..catalog().len()).map(|i| if i == idx { 1.0 } else { 0.0 }));
                }
                ShapeMode::Free => {
                    values.extend(slice.bits().iter().map(|&b| if b { 1.0 } else { -1.0 }));
                }
            }
        }
    }
    EffectFactors::new(mode, k, grid, values)
}

fn rebuild(
    layer: &LhcLayer,
    constraints: TopologyConstraints,
    pick: impl Fn(usize, usize) -> ShapeSlice,
) -> Result<LhcLayer> {
    let grid = constraints.grid(layer.c_i(), layer.c_o());
    let effect = forced_effect(layer.mode(), layer.k(), grid, pick)?;
    LhcLayer::from_parts(
        layer.kernel().clone(),
        effect,
        constraints,
        layer.stride(),
        layer.padding(),
    )
}

/// Block-diagonal full slices over an `n_group x n_group` block grid.
pub fn degenerate_gwc(layer: &LhcLayer, n_group: usize) -> Result<LhcLayer> {
    let (c_i, c_o, k) = (layer.c_i(), layer.c_o(), layer.k());
    if n_group == 0 || c_i % n_group != 0 || c_o % n_group != 0 {
        return Err(LhcError::InvalidArgument(format!(
            "{n_group} groups do not divide channels ({c_i}, {c_o})"
        )));
    }
    let constraints = TopologyConstraints::new(c_i / n_group, c_o / n_group)?;
    rebuild(layer, constraints, |x, y| {
        if x == y {
            ShapeSlice::ones(k)
        } else {
            ShapeSlice::zeros(k)
        }
    })
}

/// `c_gi = 1`, `c_go = multiplier`: output channel `y` sees only input
/// channel `y / multiplier`.
pub fn degenerate_dwc(layer: &LhcLayer, multiplier: usize) -> Result<LhcLayer> {
    let (c_i, c_o, k) = (layer.c_i(), layer.c_o(), layer.k());
    if multiplier == 0 || c_o != multiplier * c_i {
        return Err(LhcError::InvalidArgument(format!(
            "multiplier {multiplier} does not map {c_i} input channels to {c_o}"
        )));
    }
    let constraints = TopologyConstraints::new(1, multiplier)?;
    rebuild(layer, constraints, |x, y| {
        if x == y {
            ShapeSlice::ones(k)
        } else {
            ShapeSlice::zeros(k)
        }
    })
}

/// Slice-wise (`1 x 1` constraints): slice `(x, y)`, counted from 1, is full
/// when `(x + y - 1) % p == 0` and a center dot otherwise.
pub fn degenerate_hetconv(layer: &LhcLayer, p: usize) -> Result<LhcLayer> {
    let (c_i, k) = (layer.c_i(), layer.k());
    if p == 0 || p > c_i {
        return Err(LhcError::InvalidArgument(format!(
            "HetConv part {p} outside 1..={c_i}"
        )));
    }
    if k % 2 == 0 {
        return Err(LhcError::InvalidArgument(format!(
            "HetConv needs an odd kernel for the center dot, got {k}"
        )));
    }
    let constraints = TopologyConstraints::new(1, 1)?;
    // x and y are 0-based here; the rule is stated on 1-based indices.
    rebuild(layer, constraints, |x, y| {
        if (x + y + 1) % p == 0 {
            ShapeSlice::ones(k)
        } else {
            ShapeSlice::center_dot(k)
        }
    })
}

pub fn degenerate(layer: &LhcLayer, kind: DegenerationKind) -> Result<LhcLayer> {
    match kind {
        DegenerationKind::Gwc(n) => degenerate_gwc(layer, n),
        DegenerationKind::Dwc(m) => degenerate_dwc(layer, m),
        DegenerationKind::HetConv(p) => degenerate_hetconv(layer, p),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::objective::{flops_lhc, flops_std};

    fn layer(mode: ShapeMode, c_i: usize, c_o: usize) -> LhcLayer {
        let mut rng = ChaCha8Rng::seed_from_u64((c_i * 100 + c_o) as u64);
        let c = TopologyConstraints::new(1, 1).unwrap();
        LhcLayer::init(mode, 3, c_i, c_o, c, 1, 1, &mut rng).unwrap()
    }

    #[test]
    fn single_group_is_dense() {
        for mode in [ShapeMode::Rigid, ShapeMode::Free] {
            let l = degenerate_gwc(&layer(mode, 4, 6), 1).unwrap();
            assert_eq!(l.build_masks().unwrap().density(), 1.0);
        }
    }

    #[test]
    fn two_groups_half_density() {
        let l = degenerate_gwc(&layer(ShapeMode::Free, 4, 4), 2).unwrap();
        let m = l.build_masks().unwrap();
        assert_eq!(m.density(), 0.5);
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(m.slice_at(x, y).l0() == 9, x / 2 == y / 2);
            }
        }
        let g = l.geometry(5, 5).unwrap();
        assert_eq!(
            flops_lhc(&g, &m, l.constraints()).unwrap() * 2,
            flops_std(&g)
        );
    }

    #[test]
    fn depthwise_density() {
        let l = degenerate_dwc(&layer(ShapeMode::Rigid, 3, 3), 1).unwrap();
        let m = l.build_masks().unwrap();
        assert!((m.density() - 1.0 / 3.0).abs() < 1e-15);
        for y in 0..3 {
            let seen: Vec<usize> = (0..3).filter(|&x| m.slice_at(x, y).l0() > 0).collect();
            assert_eq!(seen, vec![y]);
        }
        let l = degenerate_dwc(&layer(ShapeMode::Free, 1, 1), 1).unwrap();
        assert_eq!(l.build_masks().unwrap().density(), 1.0);
        assert!(degenerate_dwc(&layer(ShapeMode::Free, 3, 4), 1).is_err());
    }

    #[test]
    fn hetconv_density() {
        let l = degenerate_hetconv(&layer(ShapeMode::Free, 4, 4), 1).unwrap();
        assert_eq!(l.build_masks().unwrap().density(), 1.0);
        for c_i in [1, 2, 5] {
            let l = degenerate_hetconv(&layer(ShapeMode::Rigid, c_i, 3), c_i).unwrap();
            let d = l.build_masks().unwrap().density();
            let expected = (9 + (c_i - 1)) as f64 / (9 * c_i) as f64;
            assert!((d - expected).abs() < 1e-15, "c_i {c_i}: {d}");
        }
        assert!(degenerate_hetconv(&layer(ShapeMode::Free, 4, 4), 5).is_err());
        assert!(degenerate_hetconv(&layer(ShapeMode::Free, 4, 4), 0).is_err());
    }

    #[test]
    fn degenerates_are_fixed_points() {
        for mode in [ShapeMode::Rigid, ShapeMode::Free] {
            let base = layer(mode, 4, 8);
            for kind in [
                DegenerationKind::Gwc(2),
                DegenerationKind::Dwc(2),
                DegenerationKind::HetConv(3),
            ] {
                let l = degenerate(&base, kind).unwrap();
                let masks = l.build_masks().unwrap();
                let slices = masks.block_slices(l.constraints()).unwrap();
                let grid = l.effect().grid();
                let again = forced_effect(mode, 3, grid, |x, y| slices[x * grid.1 + y].clone())
                    .unwrap();
                assert_eq!(&again, l.effect(), "{kind:?}");
            }
        }
    }
}
