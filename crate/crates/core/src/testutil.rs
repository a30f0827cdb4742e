//! Finite-difference helpers shared by the unit tests.

use rand::Rng;

use crate::autodiff::Tensor;

pub fn random<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central differences of `f` with respect to every entry of every input.
pub fn fd_grad(f: impl Fn(&[Tensor<f64>]) -> f64, xs: &[Tensor<f64>], eps: f64) -> Vec<Tensor<f64>> {
    let mut work = xs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        let mut g = Tensor::zeros(xs[k].shape());
        for i in 0..xs[k].len() {
            let x0 = xs[k].data()[i];
            work[k].data_mut()[i] = x0 + eps;
            let up = f(&work);
            work[k].data_mut()[i] = x0 - eps;
            let down = f(&work);
            work[k].data_mut()[i] = x0;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Worst `|a - b|` over all entries, relative to `max(max |b|, floor)`.
pub fn rel_err(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    let mut num = 0.0f64;
    let mut den = floor;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (p, q) in x.data().iter().zip(y.data()) {
            num = num.max((p - q).abs());
            den = den.max(q.abs());
        }
    }
    num / den
}
