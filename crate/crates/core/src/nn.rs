//! Layer helpers over [`Params`]: each reads `<name>.weight` / `<name>.bias`.

use ndarray::IxDyn;

use crate::autograd::{Array, Var};
use crate::params::Params;

pub fn conv<'g>(p: &Params<'g>, name: &str, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    x.conv2d(w, Some(b), stride, pad)
}

/// Same-size 3x3 convolution.
pub fn conv3<'g>(p: &Params<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    conv(p, name, x, 1, 1)
}

/// Halving 3x3 convolution.
pub fn conv_down<'g>(p: &Params<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    conv(p, name, x, 2, 1)
}

pub fn conv1<'g>(p: &Params<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    conv(p, name, x, 1, 0)
}

/// Linear layer over the last axis of a 2D input.
pub fn linear<'g>(p: &Params<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    x.linear(w, Some(b))
}

/// Sinusoidal encoding of integer positions, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[usize], dim: usize) -> Array {
    let half = dim / 2;
    let mut out = Array::zeros(IxDyn(&[positions.len(), dim]));
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = pos as f64 * freq;
            out[[r, i]] = arg.sin();
            out[[r, half + i]] = arg.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_rows_are_distinct_and_bounded() {
        let e = sinusoidal(&[0, 1, 99], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e[[0, 0]], 0.0);
        assert_eq!(e[[0, 4]], 1.0);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.index_axis(ndarray::Axis(0), 1), e.index_axis(ndarray::Axis(0), 2));
    }
}
