//! The 3x3 kernel-slice shape catalogs: 15 hand-designed rigid shapes and all
//! 512 free binary patterns.
//!
//! Free-shape indices map to patterns row-major with the top-left cell as the
//! least-significant bit, so cell `(r, c)` is bit `3 * r + c`. Index 0 is the
//! empty slice and 511 the full one.

use std::fmt;

use crate::error::{LhcError, Result};

pub const CATALOG_K: usize = 3;
pub const FREE_SHAPES: usize = 1 << (CATALOG_K * CATALOG_K);
pub const RIGID_SHAPES: usize = 15;

/// Position of the all-zero shape `<1>1` in the rigid catalog.
pub const RIGID_ZERO: usize = 0;
/// Position of the center dot `<2>1`.
pub const RIGID_DOT: usize = 1;
/// Position of the all-one shape `<6>1`.
pub const RIGID_FULL: usize = 14;

/// One k x k binary kernel-slice pattern, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShapeSlice {
    k: usize,
    bits: Vec<bool>,
}

impl ShapeSlice {
    pub fn new(k: usize, bits: Vec<bool>) -> Result<Self> {
        if k == 0 || bits.len() != k * k {
            return Err(LhcError::shape(&[k * k], &[bits.len()]));
        }
        Ok(Self { k, bits })
    }

    /// Builds a slice from numeric entries, which must each be exactly 0 or 1.
    pub fn from_values(k: usize, values: &[f64]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(LhcError::InvalidArgument(format!(
                    "non-binary mask entry {v}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(k, bits)
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            bits: vec![false; k * k],
        }
    }

    pub fn ones(k: usize) -> Self {
        Self {
            k,
            bits: vec![true; k * k],
        }
    }

    /// Only the center cell set (k odd).
    pub fn center_dot(k: usize) -> Self {
        let mut s = Self::zeros(k);
        s.bits[(k / 2) * k + k / 2] = true;
        s
    }

    fn from_cells(cells: &[(usize, usize)]) -> Self {
        let mut s = Self::zeros(CATALOG_K);
        for &(r, c) in cells {
            s.bits[r * CATALOG_K + c] = true;
        }
        s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.k + c]
    }

    /// L0 norm: number of set cells.
    pub fn l0(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major `0`/`1` string, e.g. `000010000` for the center dot.
    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for ShapeSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.k {
            if r > 0 {
                writeln!(f)?;
            }
            for c in 0..self.k {
                f.write_str(if self.get(r, c) { "#" } else { "." })?;
            }
        }
        Ok(())
    }
}

pub fn free_decode(index: usize) -> Result<ShapeSlice> {
    if index >= FREE_SHAPES {
        return Err(LhcError::InvalidArgument(format!(
            "free shape index {index} out of range 0..{FREE_SHAPES}"
        )));
    }
    let bits = (0..CATALOG_K * CATALOG_K)
        .map(|b| index >> b & 1 == 1)
        .collect();
    Ok(ShapeSlice {
        k: CATALOG_K,
        bits,
    })
}

pub fn free_encode(slice: &ShapeSlice) -> Result<usize> {
    if slice.k != CATALOG_K {
        return Err(LhcError::InvalidArgument(format!(
            "free catalog is defined for 3x3 slices, got {0}x{0}",
            slice.k
        )));
    }
    Ok(slice
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| 1 << i)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RigidShape {
    pub group: u8,
    pub member: u8,
    pub slice: ShapeSlice,
}

impl RigidShape {
    /// Label in `<group>member` form, e.g. `<3>2`.
    pub fn label(&self) -> String {
        format!("<{}>{}", self.group, self.member)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RigidCatalog {
    shapes: Vec<RigidShape>,
}

impl RigidCatalog {
    pub fn shapes(&self) -> &[RigidShape] {
        &self.shapes
    }

    pub fn get(&self, index: usize) -> Option<&RigidShape> {
        self.shapes.get(index)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Indices of the members of one group, in catalog order.
    pub fn group(&self, group: u8) -> Vec<usize> {
        self.shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position(&self, slice: &ShapeSlice) -> Option<usize> {
        self.shapes.iter().position(|s| &s.slice == slice)
    }
}

/// The 15 rigid shapes in catalog order:
///
/// * `<1>1` empty slice
/// * `<2>1` center dot
/// * `<3>1..4` center row, main diagonal, center column, anti-diagonal
/// * `<4>1..4` left, right, top and bottom half windows (3x2 / 2x3)
/// * `<5>1..4` top-left, top-right, bottom-left and bottom-right 2x2 corners
/// * `<6>1` full slice
pub fn rigid_catalog() -> RigidCatalog {
    let rows = |rs: &[usize], cs: &[usize]| -> ShapeSlice {
        let cells: Vec<_> = rs
            .iter()
            .flat_map(|&r| cs.iter().map(move |&c| (r, c)))
            .collect();
        ShapeSlice::from_cells(&cells)
    };
    let groups: Vec<(u8, Vec<ShapeSlice>)> = vec![
        (1, vec![ShapeSlice::zeros(CATALOG_K)]),
        (2, vec![ShapeSlice::center_dot(CATALOG_K)]),
        (
            3,
            vec![
                ShapeSlice::from_cells(&[(1, 0), (1, 1), (1, 2)]),
                ShapeSlice::from_cells(&[(0, 0), (1, 1), (2, 2)]),
                ShapeSlice::from_cells(&[(0, 1), (1, 1), (2, 1)]),
                ShapeSlice::from_cells(&[(0, 2), (1, 1), (2, 0)]),
            ],
        ),
        (
            4,
            vec![
                rows(&[0, 1, 2], &[0, 1]),
                rows(&[0, 1, 2], &[1, 2]),
                rows(&[0, 1], &[0, 1, 2]),
                rows(&[1, 2], &[0, 1, 2]),
            ],
        ),
        (
            5,
            vec![
                rows(&[0, 1], &[0, 1]),
                rows(&[0, 1], &[1, 2]),
                rows(&[1, 2], &[0, 1]),
                rows(&[1, 2], &[1, 2]),
            ],
        ),
        (6, vec![ShapeSlice::ones(CATALOG_K)]),
    ];
    let shapes = groups
        .into_iter()
        .flat_map(|(group, slices)| {
            slices
                .into_iter()
                .enumerate()
                .map(move |(i, slice)| RigidShape {
                    group,
                    member: i as u8 + 1,
                    slice,
                })
        })
        .collect();
    RigidCatalog { shapes }
}

/// One line per shape: `index group bits l0` for the rigid catalog, or
/// `index bits l0` for the free catalog.
pub fn catalog_dump(free: bool) -> String {
    let mut out = String::new();
    if free {
        for i in 0..FREE_SHAPES {
            let s = free_decode(i).expect("index in range");
            out.push_str(&format!("{i} {} {}\n", s.bit_string(), s.l0()));
        }
    } else {
        for (i, r) in rigid_catalog().shapes().iter().enumerate() {
            out.push_str(&format!(
                "{i} {} {} {}\n",
                r.label(),
                r.slice.bit_string(),
                r.slice.l0()
            ));
        }
    }
    out
}
