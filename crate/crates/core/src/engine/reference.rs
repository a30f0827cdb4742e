//! Plain MAML written directly with hand-derived backpropagation, kept free
//! of the autodiff graph so it can check the engine.

use crate::autodiff::Tensor;
use crate::episode::Episode;
use crate::nn::BaseParams;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(xi, wi)| xi * wi[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

struct Layer {
    w: Mat,
    b: Vec<f64>,
}

fn layers(theta: &BaseParams<f64>) -> Vec<Layer> {
    theta
        .layers
        .iter()
        .map(|l| Layer {
            w: to_mat(&l.weight),
            b: l.bias.data().to_vec(),
        })
        .collect()
}

/// Activations of every layer; the last entry is the logits.
fn forward(ls: &[Layer], x: &Mat) -> Vec<Mat> {
    let mut acts = vec![x.clone()];
    for (i, l) in ls.iter().enumerate() {
        let mut z = affine(acts.last().expect("non-empty"), &l.w, &l.b);
        if i + 1 < ls.len() {
            z.iter_mut().flatten().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    acts
}

/// Mean cross-entropy gradients for every layer.
fn backward(ls: &[Layer], x: &Mat, y: &[usize]) -> Vec<(Mat, Vec<f64>)> {
    let acts = forward(ls, x);
    let batch = x.len() as f64;
    let mut delta: Mat = acts
        .last()
        .expect("logits")
        .iter()
        .zip(y)
        .map(|(row, &label)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter()
                .enumerate()
                .map(|(j, v)| (v / s - if j == label { 1.0 } else { 0.0 }) / batch)
                .collect()
        })
        .collect();
    let mut grads = Vec::with_capacity(ls.len());
    for i in (0..ls.len()).rev() {
        let input = &acts[i];
        let (din, dout) = (ls[i].w.len(), ls[i].b.len());
        let mut gw = vec![vec![0.0; dout]; din];
        let mut gb = vec![0.0; dout];
        for (a, d) in input.iter().zip(&delta) {
            for p in 0..din {
                for q in 0..dout {
                    gw[p][q] += a[p] * d[q];
                }
            }
            for q in 0..dout {
                gb[q] += d[q];
            }
        }
        if i > 0 {
            delta = delta
                .iter()
                .zip(input)
                .map(|(d, a)| {
                    (0..din)
                        .map(|p| {
                            let back: f64 = (0..dout).map(|q| d[q] * ls[i].w[p][q]).sum();
                            back * (1.0 - a[p] * a[p])
                        })
                        .collect()
                })
                .collect();
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    grads
}

/// Test-set logits after `steps` plain gradient steps of size `alpha` on
/// the episode's training split, starting from `theta`.
pub fn plain_maml_logits(theta: &BaseParams<f64>, episode: &Episode, alpha: f64, steps: usize) -> Tensor<f64> {
    let mut ls = layers(theta);
    let train_x = to_mat(&episode.train_x);
    for _ in 0..steps {
        let grads = backward(&ls, &train_x, &episode.train_y);
        for (l, (gw, gb)) in ls.iter_mut().zip(grads) {
            for (wr, gr) in l.w.iter_mut().zip(gw) {
                for (w, g) in wr.iter_mut().zip(gr) {
                    *w -= alpha * g;
                }
            }
            for (b, g) in l.b.iter_mut().zip(gb) {
                *b -= alpha * g;
            }
        }
    }
    let logits = forward(&ls, &to_mat(&episode.test_x)).pop().expect("logits");
    Tensor::from_rows(&logits)
}
