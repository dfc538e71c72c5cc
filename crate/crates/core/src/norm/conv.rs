//! Unrolling of convolutional feature maps: every spatial position of every
//! example becomes one column of a `d × (m·h·w)` matrix.

use serde::{Deserialize, Serialize};

use super::{NormError, Result};
use crate::linalg::Matrix;

/// Dense `m × d × h × w` tensor, row-major in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    pub m: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(m: usize, d: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * d * h * w {
            return Err(NormError::Shape {
                expected: format!("{} entries for {m}x{d}x{h}x{w}", m * d * h * w),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Tensor4 { m, d, h, w, data })
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.d + c) * self.h + y) * self.w + x
    }
}

/// Column `(n·h + y)·w + x` holds the `d` channel values at position `(y, x)`
/// of example `n`.
pub fn unroll_conv(t: &Tensor4) -> Matrix {
    let cols = t.m * t.h * t.w;
    let mut out = Matrix::zeros(t.d, cols);
    for n in 0..t.m {
        for c in 0..t.d {
            for y in 0..t.h {
                for x in 0..t.w {
                    out[(c, (n * t.h + y) * t.w + x)] = t.data[t.offset(n, c, y, x)];
                }
            }
        }
    }
    out
}

pub fn roll_conv(x: &Matrix, m: usize, h: usize, w: usize) -> Result<Tensor4> {
    if x.cols() != m * h * w {
        return Err(NormError::Shape { expected: format!("{} columns", m * h * w), found: format!("{} columns", x.cols()) });
    }
    let d = x.rows();
    let mut t = Tensor4 { m, d, h, w, data: vec![0.0; m * d * h * w] };
    for n in 0..m {
        for c in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let o = t.offset(n, c, y, xx);
                    t.data[o] = x[(c, (n * h + y) * w + xx)];
                }
            }
        }
    }
    Ok(t)
}
