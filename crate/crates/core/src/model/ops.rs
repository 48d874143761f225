use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{Array, CustomOp, Scalar, Tape, Var};
use crate::error::{shape_err, Result};

/// 3x3 neighbourhood average over a token grid laid out row-major, with the
/// window clipped at the borders.
struct GridMix {
    gh: usize,
    gw: usize,
}

fn neighbours(gh: usize, gw: usize, i: usize, mut f: impl FnMut(usize)) {
    let (y, x) = (i / gw, i % gw);
    for ny in y.saturating_sub(1)..=(y + 1).min(gh - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(gw - 1) {
            f(ny * gw + nx);
        }
    }
}

fn window_size(gh: usize, gw: usize, i: usize) -> usize {
    let mut n = 0;
    neighbours(gh, gw, i, |_| n += 1);
    n
}

impl<T: Scalar> CustomOp<T> for GridMix {
    fn name(&self) -> &'static str {
        "grid_mix"
    }

    fn backward(
        &self,
        _inputs: &[&Array<T>],
        output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>> {
        let d = output.cols();
        let mut gin = Array::zeros(output.shape());
        for i in 0..self.gh * self.gw {
            let w = T::one() / T::of(window_size(self.gh, self.gw, i) as f64);
            let g = grad.row(i);
            neighbours(self.gh, self.gw, i, |j| {
                for (o, &v) in gin.row_mut(j)[..d].iter_mut().zip(g) {
                    *o += w * v;
                }
            });
        }
        vec![Some(gin)]
    }
}

pub(crate) fn grid_mix<T: Scalar>(tape: &mut Tape<T>, h: Var, gh: usize, gw: usize) -> Result<Var> {
    let x = tape.value(h);
    if x.rows() != gh * gw || x.shape().len() != 2 {
        return Err(shape_err(
            "grid_mix",
            alloc::format!("{:?} for grid {}x{}", x.shape(), gh, gw),
        ));
    }
    let d = x.cols();
    let mut out = Array::zeros(x.shape());
    for i in 0..gh * gw {
        let w = T::one() / T::of(window_size(gh, gw, i) as f64);
        let row = out.row_mut(i);
        neighbours(gh, gw, i, |j| {
            for (o, &v) in row.iter_mut().zip(x.row(j)) {
                *o += w * v;
            }
        });
        debug_assert_eq!(row.len(), d);
    }
    tape.custom(&[h], out, Box::new(GridMix { gh, gw }))
}
