//! The 24 proper rotations of a cube, acting on `(C, S, S, S)` patches.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A signed permutation matrix with determinant +1. Applying it to a patch
/// maps output index `i` to input index `M * i` in centered coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    m: [[i8; 3]; 3],
}

impl Orientation {
    pub const IDENTITY: Self = Self { m: [[1, 0, 0], [0, 1, 0], [0, 0, 1]] };

    pub fn matrix(&self) -> [[i8; 3]; 3] {
        self.m
    }

    fn det(m: &[[i8; 3]; 3]) -> i32 {
        let m = m.map(|r| r.map(i32::from));
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `self.then(g)` applies `self` first, then `g`.
    pub fn then(&self, g: &Orientation) -> Orientation {
        // apply(g, apply(h, x))[i] = x[M_h M_g i]
        let (a, b) = (&self.m, &g.m);
        let mut m = [[0i8; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
            }
        }
        Orientation { m }
    }

    pub fn inverse(&self) -> Orientation {
        let mut m = [[0i8; 3]; 3];
        for (r, row) in self.m.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m[c][r] = v;
            }
        }
        Orientation { m }
    }

    /// Reorients every channel of a cubic `(C, S, S, S)` tensor.
    pub fn apply(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let sh = t.shape();
        if sh.len() != 4 || sh[1] != sh[2] || sh[2] != sh[3] {
            return Err(shape_err!("orientation needs a cubic (C, S, S, S) patch, got {sh:?}"));
        }
        let (c, s) = (sh[0], sh[1]);
        let stride = [s * s, s, 1];
        // Input offset contributed by each output axis, for both directions.
        let mut step = [(0usize, 0isize); 3];
        for (a, st) in step.iter_mut().enumerate() {
            let b = (0..3).find(|&b| self.m[b][a] != 0).expect("signed permutation");
            *st = if self.m[b][a] > 0 {
                (0, stride[b] as isize)
            } else {
                ((s - 1) * stride[b], -(stride[b] as isize))
            };
        }
        let base = step[0].0 + step[1].0 + step[2].0;
        let vol = s * s * s;
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for ch in 0..c {
            let plane = &src[ch * vol..(ch + 1) * vol];
            for i0 in 0..s as isize {
                for i1 in 0..s as isize {
                    let row = base as isize + i0 * step[0].1 + i1 * step[1].1;
                    out.extend((0..s as isize).map(|i2| plane[(row + i2 * step[2].1) as usize]));
                }
            }
        }
        Tensor::from_vec(sh, out)
    }
}

/// All 24 rotations, identity first.
pub fn orientation_group() -> [Orientation; 24] {
    let mut out = [Orientation::IDENTITY; 24];
    let mut n = 0;
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for p in perms {
        for signs in 0..8u8 {
            let mut m = [[0i8; 3]; 3];
            for (r, &col) in p.iter().enumerate() {
                m[r][col] = if signs >> r & 1 == 1 { -1 } else { 1 };
            }
            if Orientation::det(&m) == 1 {
                out[n] = Orientation { m };
                n += 1;
            }
        }
    }
    debug_assert_eq!(n, 24);
    out
}
