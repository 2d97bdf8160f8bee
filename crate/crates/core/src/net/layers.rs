//! Layer primitives and their backward passes.
//!
//! Shapes are row-major `time x dim`. Affine weights are `out x in`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Variance at or below this is treated as zero: the pooled standard
/// deviation is 0 and passes no gradient.
pub const STD_FLOOR: f64 = 1e-10;

/// Output length of a splice over `t_in` frames, or `None` when no output
/// time step has all offsets in range.
pub fn spliced_len(t_in: usize, context: &[i32]) -> Option<usize> {
    let span = context_span(context);
    (t_in > span).then(|| t_in - span)
}

/// `max(context) - min(context)`.
pub fn context_span(context: &[i32]) -> usize {
    let lo = context.iter().min().copied().unwrap_or(0);
    let hi = context.iter().max().copied().unwrap_or(0);
    (hi - lo) as usize
}

/// Concatenates input rows at each context offset. Output row `t` reads input
/// rows `t - min(context) + offset`.
pub fn splice(x: ArrayView2<f64>, context: &[i32]) -> Array2<f64> {
    let (t_in, d) = x.dim();
    let t_out = spliced_len(t_in, context).expect("caller checks the frame count");
    let lo = *context.iter().min().expect("nonempty context");
    let mut out = Array2::zeros((t_out, d * context.len()));
    for (k, &off) in context.iter().enumerate() {
        let start = (off - lo) as usize;
        out.slice_mut(s![.., k * d..(k + 1) * d])
            .assign(&x.slice(s![start..start + t_out, ..]));
    }
    out
}

/// Adjoint of [`splice`]: scatters `ds` back onto `t_in` input rows.
pub fn unsplice(ds: ArrayView2<f64>, context: &[i32], t_in: usize) -> Array2<f64> {
    let t_out = ds.nrows();
    let d = ds.ncols() / context.len();
    let lo = *context.iter().min().expect("nonempty context");
    let mut dx = Array2::zeros((t_in, d));
    for (k, &off) in context.iter().enumerate() {
        let start = (off - lo) as usize;
        let mut rows = dx.slice_mut(s![start..start + t_out, ..]);
        rows += &ds.slice(s![.., k * d..(k + 1) * d]);
    }
    dx
}

/// `x W^T + b` applied to every row.
pub fn affine_rows(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

pub fn affine_vec(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    w.dot(&x) + b
}

pub fn relu_inplace<D: ndarray::Dimension>(z: &mut ndarray::Array<f64, D>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes upstream gradient where the rectified output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(grad: &mut ndarray::Array<f64, D>, activation: &ndarray::Array<f64, D>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Gradients of a row-wise affine map.
pub struct AffineGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

/// Backward of [`affine_rows`] given `dz` (`T x out`).
pub fn affine_rows_backward(x: ArrayView2<f64>, w: ArrayView2<f64>, dz: ArrayView2<f64>, need_input: bool) -> AffineGrad {
    AffineGrad {
        weight: dz.t().dot(&x),
        bias: dz.sum_axis(Axis(0)),
        input: if need_input {
            dz.dot(&w)
        } else {
            Array2::zeros((0, 0))
        },
    }
}

/// Per-dimension mean and population standard deviation over time.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl PoolStats {
    /// `[mean, std]`, `2 * dim` values.
    pub fn concat(&self) -> Array1<f64> {
        ndarray::concatenate(Axis(0), &[self.mean.view(), self.std.view()]).expect("same rank")
    }
}

pub fn stats_pool(h: ArrayView2<f64>) -> PoolStats {
    let t = h.nrows() as f64;
    let mean = h.sum_axis(Axis(0)) / t;
    let mut var = Array1::zeros(h.ncols());
    for row in h.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d: f64 = x - m;
            *v += d * d;
        }
    }
    let std = var.mapv(|v: f64| {
        let v = v / t;
        if v > STD_FLOOR {
            v.sqrt()
        } else {
            0.0
        }
    });
    PoolStats { mean, std }
}

/// Backward of [`stats_pool`]: `dpooled` holds `[d_mean, d_std]`.
pub fn stats_pool_backward(h: ArrayView2<f64>, stats: &PoolStats, dpooled: ArrayView1<f64>) -> Array2<f64> {
    let (t, d) = h.dim();
    let tf = t as f64;
    let dmean = dpooled.slice(s![..d]);
    let dstd = dpooled.slice(s![d..]);
    let mut dh = Array2::zeros((t, d));
    for (mut out, row) in dh.rows_mut().into_iter().zip(h.rows()) {
        for j in 0..d {
            let mut g = dmean[j] / tf;
            let sd = stats.std[j];
            if sd > 0.0 {
                g += dstd[j] * (row[j] - stats.mean[j]) / (tf * sd);
            }
            out[j] = g;
        }
    }
    dh
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    logits.mapv(|v| v - lse)
}

/// Cross-entropy of `label` and its gradient with respect to the logits.
pub fn softmax_xent(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    grad[label] -= 1.0;
    (-logp[label], grad)
}
