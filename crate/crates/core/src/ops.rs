//! Differentiable primitive operations.
//!
//! Every op validates shapes up front, computes the forward value, and
//! records a VJP closure for [`crate::tensor::backward`]. Binary
//! elementwise ops broadcast the right operand when it is a scalar or a
//! rank-1 vector matching the left operand's last dimension (bias style).

use rand::RngCore;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::{BackwardArgs, DenseTensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-pass mode: training enables dropout, eval makes it the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn rows_of<S: Scalar>(t: &DenseTensor<S>) -> usize {
    t.numel() / t.last_dim()
}

pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

// ---------------------------------------------------------------------------
// elementwise binary ops with rhs broadcast

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    /// rhs is rank-1 matching lhs' last dim; repeated over leading dims.
    LastDim,
    /// rhs is a single element, broadcast everywhere.
    Scalar,
}

fn broadcast_kind<S: Scalar>(
    op: &'static str,
    a: &DenseTensor<S>,
    b: &DenseTensor<S>,
) -> Result<Broadcast> {
    if a.dims() == b.dims() {
        return Ok(Broadcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if b.rank() == 1 && b.numel() == a.last_dim() {
        return Ok(Broadcast::LastDim);
    }
    Err(Error::dimension(
        op,
        format!("incompatible dims {:?} vs {:?}", a.dims(), b.dims()),
    ))
}

fn binary_forward<S: Scalar>(
    a: &[S],
    b: &[S],
    kind: Broadcast,
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    match kind {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Broadcast::LastDim => {
            let d = b.len();
            a.iter().enumerate().map(|(i, &x)| f(x, b[i % d])).collect()
        }
    }
}

/// Reduces a full-shape gradient onto the rhs broadcast shape.
fn reduce_to_rhs<S: Scalar>(full: &[S], kind: Broadcast, rhs_len: usize) -> Vec<S> {
    match kind {
        Broadcast::Same => full.to_vec(),
        Broadcast::Scalar => vec![full.iter().copied().sum()],
        Broadcast::LastDim => {
            let mut out = vec![S::zero(); rhs_len];
            for (i, &g) in full.iter().enumerate() {
                out[i % rhs_len] += g;
            }
            out
        }
    }
}

pub fn add<S: Scalar>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let kind = broadcast_kind("add", a, b)?;
    let data = binary_forward(&a.data(), &b.data(), kind, |x, y| x + y);
    let rhs_len = b.numel();
    Ok(DenseTensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let ga = args.parents[0].tracked().then(|| args.gout.to_vec());
            let gb = args.parents[1]
                .tracked()
                .then(|| reduce_to_rhs(args.gout, kind, rhs_len));
            vec![ga, gb]
        }),
        "add",
    ))
}

pub fn sub<S: Scalar>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let kind = broadcast_kind("sub", a, b)?;
    let data = binary_forward(&a.data(), &b.data(), kind, |x, y| x - y);
    let rhs_len = b.numel();
    Ok(DenseTensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let ga = args.parents[0].tracked().then(|| args.gout.to_vec());
            let gb = args.parents[1].tracked().then(|| {
                let mut g = reduce_to_rhs(args.gout, kind, rhs_len);
                g.iter_mut().for_each(|v| *v = -*v);
                g
            });
            vec![ga, gb]
        }),
        "sub",
    ))
}

pub fn mul<S: Scalar>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let kind = broadcast_kind("mul", a, b)?;
    let data = binary_forward(&a.data(), &b.data(), kind, |x, y| x * y);
    let rhs_len = b.numel();
    Ok(DenseTensor::from_op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let av = args.parents[0].data();
            let bv = args.parents[1].data();
            let ga = args.parents[0].tracked().then(|| match kind {
                Broadcast::Same => args.gout.iter().zip(&*bv).map(|(&g, &y)| g * y).collect(),
                Broadcast::Scalar => args.gout.iter().map(|&g| g * bv[0]).collect(),
                Broadcast::LastDim => args
                    .gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * bv[i % rhs_len])
                    .collect(),
            });
            let gb = args.parents[1].tracked().then(|| {
                let scaled: Vec<S> = args.gout.iter().zip(&*av).map(|(&g, &x)| g * x).collect();
                reduce_to_rhs(&scaled, kind, rhs_len)
            });
            vec![ga, gb]
        }),
        "mul",
    ))
}

pub fn scale<S: Scalar>(x: &DenseTensor<S>, factor: f64) -> Result<DenseTensor<S>> {
    let c = S::from_f64(factor);
    let data = x.data().iter().map(|&v| v * c).collect();
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0]
                .tracked()
                .then(|| args.gout.iter().map(|&g| g * c).collect())]
        }),
        "scale",
    ))
}

// ---------------------------------------------------------------------------
// activations and normalizations

/// Exact GeLU: x * Phi(x) with Phi the standard normal CDF via erf.
pub fn gelu<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data()
        .iter()
        .map(|&v| v * half * (S::one() + (v * inv_sqrt2).erf()))
        .collect();
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let xv = args.parents[0].data();
            vec![args.parents[0].tracked().then(|| {
                args.gout
                    .iter()
                    .zip(&*xv)
                    .map(|(&g, &v)| {
                        let cdf = half * (S::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                        g * (cdf + v * pdf)
                    })
                    .collect()
            })]
        }),
        "gelu",
    ))
}

/// Softmax over the last axis; every slice along the last dimension is
/// normalized independently with max-subtraction.
pub fn softmax_lastdim<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let d = x.last_dim();
    let xv = x.data();
    let mut data = vec![S::zero(); xv.len()];
    for (slice, out) in xv.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
        let m = slice.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in out.iter_mut().zip(slice) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    drop(xv);
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); args.out.len()];
                for ((y, g), gxs) in args
                    .out
                    .chunks_exact(d)
                    .zip(args.gout.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let inner = dot(y, g);
                    for ((gx_i, &y_i), &g_i) in gxs.iter_mut().zip(y).zip(g) {
                        *gx_i = y_i * (g_i - inner);
                    }
                }
                gx
            })]
        }),
        "softmax",
    ))
}

/// Layer normalization over the last axis, epsilon 1e-5, no learnable
/// affine (the residual blocks apply it bare).
pub fn layer_norm_lastdim<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let d = x.last_dim();
    let eps = S::from_f64(LAYER_NORM_EPS);
    let n = S::from_f64(d as f64);
    let xv = x.data();
    let mut data = vec![S::zero(); xv.len()];
    let mut sigmas = Vec::with_capacity(xv.len() / d);
    for (slice, out) in xv.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
        let mean = slice.iter().copied().sum::<S>() / n;
        let var = slice
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            / n;
        let sigma = (var + eps).sqrt();
        sigmas.push(sigma);
        for (o, &v) in out.iter_mut().zip(slice) {
            *o = (v - mean) / sigma;
        }
    }
    drop(xv);
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); args.out.len()];
                for (slice_idx, ((y, g), gxs)) in args
                    .out
                    .chunks_exact(d)
                    .zip(args.gout.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let gm = g.iter().copied().sum::<S>() / n;
                    let gym = dot(g, y) / n;
                    let sigma = sigmas[slice_idx];
                    for ((gx_i, &y_i), &g_i) in gxs.iter_mut().zip(y).zip(g) {
                        *gx_i = (g_i - gm - y_i * gym) / sigma;
                    }
                }
                gx
            })]
        }),
        "layer_norm",
    ))
}

pub(crate) fn dropout_with_rng<S: Scalar>(
    x: &DenseTensor<S>,
    mode: Mode,
    keep_prob: f64,
    rng: &mut dyn RngCore,
) -> Result<DenseTensor<S>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Contract(format!(
            "dropout keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    if mode == Mode::Eval || keep_prob == 1.0 {
        return Ok(x.clone());
    }
    let inv_keep = S::from_f64(1.0 / keep_prob);
    let mask: Vec<S> = x
        .data()
        .iter()
        .map(|_| {
            if next_unit_f64(rng) < keep_prob {
                inv_keep
            } else {
                S::zero()
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0]
                .tracked()
                .then(|| args.gout.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
        }),
        "dropout",
    ))
}

/// Dropout driven by the store's seeded generator; identity in eval mode.
pub fn dropout<S: Scalar>(
    x: &DenseTensor<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    if mode == Mode::Eval || keep_prob == 1.0 {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Contract(format!(
                "dropout keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        return Ok(x.clone());
    }
    let mut rng = store.rng_mut();
    dropout_with_rng(x, mode, keep_prob, &mut *rng)
}

// ---------------------------------------------------------------------------
// shape ops

pub fn concat_lastdim<S: Scalar>(inputs: &[&DenseTensor<S>]) -> Result<DenseTensor<S>> {
    if inputs.is_empty() {
        return Err(Error::dimension("concat_lastdim", "no inputs"));
    }
    let lead: Vec<usize> = inputs[0].dims()[..inputs[0].rank() - 1].to_vec();
    for t in inputs {
        if t.dims()[..t.rank() - 1] != lead[..] {
            return Err(Error::dimension(
                "concat_lastdim",
                format!("leading dims differ: {:?} vs {:?}", inputs[0].dims(), t.dims()),
            ));
        }
    }
    let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product::<usize>().max(1);
    let mut data = Vec::with_capacity(rows * total);
    let views: Vec<_> = inputs.iter().map(|t| t.data()).collect();
    for r in 0..rows {
        for (view, &w) in views.iter().zip(&widths) {
            data.extend_from_slice(&view[r * w..(r + 1) * w]);
        }
    }
    drop(views);
    let mut dims = lead;
    dims.push(total);
    Ok(DenseTensor::from_op(
        dims,
        data,
        inputs.iter().map(|&t| t.clone()).collect(),
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let mut grads: Vec<Option<Vec<S>>> = args
                .parents
                .iter()
                .zip(&widths)
                .map(|(p, &w)| p.tracked().then(|| vec![S::zero(); rows * w]))
                .collect();
            for r in 0..rows {
                let mut off = r * total;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(g) = g {
                        g[r * w..(r + 1) * w].copy_from_slice(&args.gout[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        }),
        "concat_lastdim",
    ))
}

/// Contiguous slice `[start, start+len)` of the last axis.
pub fn slice_lastdim<S: Scalar>(
    x: &DenseTensor<S>,
    start: usize,
    len: usize,
) -> Result<DenseTensor<S>> {
    let d = x.last_dim();
    if len == 0 || start + len > d {
        return Err(Error::dimension(
            "slice_lastdim",
            format!("slice [{start}, {}) out of width {d}", start + len),
        ));
    }
    let rows = rows_of(x);
    let xv = x.data();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&xv[r * d + start..r * d + start + len]);
    }
    drop(xv);
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = len;
    Ok(DenseTensor::from_op(
        dims,
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    gx[r * d + start..r * d + start + len]
                        .copy_from_slice(&args.gout[r * len..(r + 1) * len]);
                }
                gx
            })]
        }),
        "slice_lastdim",
    ))
}

/// Stacks rank-2 tensors along the row axis.
pub fn concat_rows<S: Scalar>(inputs: &[&DenseTensor<S>]) -> Result<DenseTensor<S>> {
    if inputs.is_empty() {
        return Err(Error::dimension("concat_rows", "no inputs"));
    }
    let cols = inputs[0].last_dim();
    for t in inputs {
        if t.rank() != 2 || t.last_dim() != cols {
            return Err(Error::dimension(
                "concat_rows",
                format!("expected rank-2 with {cols} cols, got {:?}", t.dims()),
            ));
        }
    }
    let row_counts: Vec<usize> = inputs.iter().map(|t| t.dims()[0]).collect();
    let total_rows: usize = row_counts.iter().sum();
    let mut data = Vec::with_capacity(total_rows * cols);
    for t in inputs {
        data.extend_from_slice(&t.data());
    }
    Ok(DenseTensor::from_op(
        vec![total_rows, cols],
        data,
        inputs.iter().map(|&t| t.clone()).collect(),
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let mut grads = Vec::with_capacity(args.parents.len());
            let mut off = 0;
            for (p, &rc) in args.parents.iter().zip(&row_counts) {
                let n = rc * cols;
                grads.push(p.tracked().then(|| args.gout[off..off + n].to_vec()));
                off += n;
            }
            grads
        }),
        "concat_rows",
    ))
}

/// Contiguous row slice of a rank-2 tensor.
pub fn slice_rows<S: Scalar>(
    x: &DenseTensor<S>,
    start: usize,
    len: usize,
) -> Result<DenseTensor<S>> {
    if x.rank() != 2 {
        return Err(Error::dimension("slice_rows", format!("rank-2 required, got {:?}", x.dims())));
    }
    let (rows, cols) = (x.dims()[0], x.dims()[1]);
    if len == 0 || start + len > rows {
        return Err(Error::dimension(
            "slice_rows",
            format!("slice [{start}, {}) out of {rows} rows", start + len),
        ));
    }
    let data = x.data()[start * cols..(start + len) * cols].to_vec();
    Ok(DenseTensor::from_op(
        vec![len, cols],
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); rows * cols];
                gx[start * cols..(start + len) * cols].copy_from_slice(args.gout);
                gx
            })]
        }),
        "slice_rows",
    ))
}

/// Repeats a rank-1 vector as `n` identical rows.
pub fn broadcast_rows<S: Scalar>(v: &DenseTensor<S>, n: usize) -> Result<DenseTensor<S>> {
    if v.rank() != 1 {
        return Err(Error::dimension("broadcast_rows", format!("rank-1 required, got {:?}", v.dims())));
    }
    if n == 0 {
        return Err(Error::dimension("broadcast_rows", "zero rows"));
    }
    let d = v.numel();
    let vv = v.data();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(&vv);
    }
    drop(vv);
    Ok(DenseTensor::from_op(
        vec![n, d],
        data,
        vec![v.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut g = vec![S::zero(); d];
                for row in args.gout.chunks_exact(d) {
                    for (gi, &r) in g.iter_mut().zip(row) {
                        *gi += r;
                    }
                }
                g
            })]
        }),
        "broadcast_rows",
    ))
}

pub fn reshape<S: Scalar>(x: &DenseTensor<S>, dims: Vec<usize>) -> Result<DenseTensor<S>> {
    if dims.is_empty() || dims.len() > crate::tensor::MAX_RANK || dims.iter().any(|&d| d == 0) {
        return Err(Error::dimension("reshape", format!("bad target dims {dims:?}")));
    }
    if dims.iter().product::<usize>() != x.numel() {
        return Err(Error::dimension(
            "reshape",
            format!("cannot reshape {:?} into {dims:?}", x.dims()),
        ));
    }
    Ok(DenseTensor::from_op(
        dims,
        x.to_vec(),
        vec![x.clone()],
        Box::new(|args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| args.gout.to_vec())]
        }),
        "reshape",
    ))
}

// ---------------------------------------------------------------------------
// linear algebra

/// `y = x W^T (+ bias)`, with `W` laid out `out_dim x in_dim` and `x`
/// treated as rows over its leading dimensions.
pub fn matmul_linear<S: Scalar>(
    x: &DenseTensor<S>,
    weight: &DenseTensor<S>,
    bias: Option<&DenseTensor<S>>,
) -> Result<DenseTensor<S>> {
    if weight.rank() != 2 {
        return Err(Error::dimension("matmul_linear", format!("weight must be rank-2, got {:?}", weight.dims())));
    }
    let (o, k) = (weight.dims()[0], weight.dims()[1]);
    if x.last_dim() != k {
        return Err(Error::dimension(
            "matmul_linear",
            format!("inner dims disagree: x {:?} vs weight {:?}", x.dims(), weight.dims()),
        ));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.numel() != o {
            return Err(Error::dimension(
                "matmul_linear",
                format!("bias dims {:?} do not match output width {o}", b.dims()),
            ));
        }
    }
    let rows = rows_of(x);
    let mut data = vec![S::zero(); rows * o];
    {
        let xv = x.data();
        let wv = weight.data();
        if let Some(b) = bias {
            let bv = b.data();
            for r in 0..rows {
                data[r * o..(r + 1) * o].copy_from_slice(&bv);
            }
        }
        for r in 0..rows {
            let xr = &xv[r * k..(r + 1) * k];
            let out = &mut data[r * o..(r + 1) * o];
            for (j, oj) in out.iter_mut().enumerate() {
                *oj += dot(xr, &wv[j * k..(j + 1) * k]);
            }
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = o;
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(DenseTensor::from_op(
        dims,
        data,
        parents,
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let xv = args.parents[0].data();
            let wv = args.parents[1].data();
            let g = args.gout;
            let gx = args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); rows * k];
                for r in 0..rows {
                    let gr = &g[r * o..(r + 1) * o];
                    let gxr = &mut gx[r * k..(r + 1) * k];
                    for (j, &gj) in gr.iter().enumerate() {
                        axpy(gj, &wv[j * k..(j + 1) * k], gxr);
                    }
                }
                gx
            });
            let gw = args.parents[1].tracked().then(|| {
                let mut gw = vec![S::zero(); o * k];
                for r in 0..rows {
                    let gr = &g[r * o..(r + 1) * o];
                    let xr = &xv[r * k..(r + 1) * k];
                    for (j, &gj) in gr.iter().enumerate() {
                        axpy(gj, xr, &mut gw[j * k..(j + 1) * k]);
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if args.parents.len() == 3 {
                grads.push(args.parents[2].tracked().then(|| {
                    let mut gb = vec![S::zero(); o];
                    for r in 0..rows {
                        for (gb_j, &gj) in gb.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *gb_j += gj;
                        }
                    }
                    gb
                }));
            }
            grads
        }),
        "matmul_linear",
    ))
}

/// Plain rank-2 product `a (n x k) * b (k x m)`.
pub fn matmul<S: Scalar>(a: &DenseTensor<S>, b: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dimension("matmul", format!("rank-2 required, got {:?} x {:?}", a.dims(), b.dims())));
    }
    let (n, k) = (a.dims()[0], a.dims()[1]);
    let (kb, m) = (b.dims()[0], b.dims()[1]);
    if k != kb {
        return Err(Error::dimension(
            "matmul",
            format!("inner dims disagree: {:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut data = vec![S::zero(); n * m];
    {
        let av = a.data();
        let bv = b.data();
        for i in 0..n {
            let out = &mut data[i * m..(i + 1) * m];
            for t in 0..k {
                axpy(av[i * k + t], &bv[t * m..(t + 1) * m], out);
            }
        }
    }
    Ok(DenseTensor::from_op(
        vec![n, m],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let av = args.parents[0].data();
            let bv = args.parents[1].data();
            let g = args.gout;
            let ga = args.parents[0].tracked().then(|| {
                let mut ga = vec![S::zero(); n * k];
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    for t in 0..k {
                        ga[i * k + t] = dot(gr, &bv[t * m..(t + 1) * m]);
                    }
                }
                ga
            });
            let gb = args.parents[1].tracked().then(|| {
                let mut gb = vec![S::zero(); k * m];
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    for t in 0..k {
                        axpy(av[i * k + t], gr, &mut gb[t * m..(t + 1) * m]);
                    }
                }
                gb
            });
            vec![ga, gb]
        }),
        "matmul",
    ))
}

// ---------------------------------------------------------------------------
// reductions and selections

pub fn sum_all<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let total: S = x.data().iter().copied().sum();
    let n = x.numel();
    Ok(DenseTensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| vec![args.gout[0]; n])]
        }),
        "sum_all",
    ))
}

pub fn mean_all<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    scale(&sum_all(x)?, 1.0 / x.numel() as f64)
}

/// Mean over the row axis of a rank-2 tensor, producing a rank-1 vector.
pub fn mean_rows<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    if x.rank() != 2 {
        return Err(Error::dimension("mean_rows", format!("rank-2 required, got {:?}", x.dims())));
    }
    let (n, d) = (x.dims()[0], x.dims()[1]);
    let inv_n = S::from_f64(1.0 / n as f64);
    let xv = x.data();
    let mut data = vec![S::zero(); d];
    for row in xv.chunks_exact(d) {
        for (o, &v) in data.iter_mut().zip(row) {
            *o += v;
        }
    }
    data.iter_mut().for_each(|v| *v = *v * inv_n);
    drop(xv);
    Ok(DenseTensor::from_op(
        vec![d],
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); n * d];
                for row in gx.chunks_exact_mut(d) {
                    for (o, &g) in row.iter_mut().zip(args.gout) {
                        *o = g * inv_n;
                    }
                }
                gx
            })]
        }),
        "mean_rows",
    ))
}

/// Index selection on a rank-1 tensor; indices may repeat. The VJP
/// scatter-adds back into the source.
pub fn gather<S: Scalar>(x: &DenseTensor<S>, indices: &[usize]) -> Result<DenseTensor<S>> {
    if x.rank() != 1 {
        return Err(Error::dimension("gather", format!("rank-1 required, got {:?}", x.dims())));
    }
    if indices.is_empty() {
        return Err(Error::dimension("gather", "empty index set"));
    }
    let n = x.numel();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::dimension("gather", format!("index {bad} out of range {n}")));
    }
    let xv = x.data();
    let data: Vec<S> = indices.iter().map(|&i| xv[i]).collect();
    drop(xv);
    let idx = indices.to_vec();
    Ok(DenseTensor::from_op(
        vec![idx.len()],
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            vec![args.parents[0].tracked().then(|| {
                let mut gx = vec![S::zero(); n];
                for (&i, &g) in idx.iter().zip(args.gout) {
                    gx[i] += g;
                }
                gx
            })]
        }),
        "gather",
    ))
}

/// Stabilized `log(1 + sum_i exp(x_i))` of a rank-1 tensor.
pub fn log1p_sum_exp<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    if x.rank() != 1 {
        return Err(Error::dimension("log1p_sum_exp", format!("rank-1 required, got {:?}", x.dims())));
    }
    let xv = x.data();
    let m = xv
        .iter()
        .copied()
        .fold(S::zero(), S::max);
    let sum: S = xv.iter().map(|&v| (v - m).exp()).sum();
    let value = if m == S::zero() {
        sum.ln_1p()
    } else {
        m + ((-m).exp() + sum).ln()
    };
    drop(xv);
    Ok(DenseTensor::from_op(
        vec![1],
        vec![value],
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let xv = args.parents[0].data();
            vec![args.parents[0].tracked().then(|| {
                let denom = (-m).exp() + xv.iter().map(|&v| (v - m).exp()).sum::<S>();
                xv.iter()
                    .map(|&v| args.gout[0] * (v - m).exp() / denom)
                    .collect()
            })]
        }),
        "log1p_sum_exp",
    ))
}

/// Elementwise square root. The subgradient at zero is taken as zero so a
/// distance of exactly zero stays differentiable.
pub fn sqrt<S: Scalar>(x: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let data: Vec<S> = x.data().iter().map(|&v| v.sqrt()).collect();
    Ok(DenseTensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, S>| {
            let half = S::from_f64(0.5);
            vec![args.parents[0].tracked().then(|| {
                args.gout
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &y)| if y == S::zero() { S::zero() } else { g * half / y })
                    .collect()
            })]
        }),
        "sqrt",
    ))
}

// ---------------------------------------------------------------------------
// contract-level dispatcher

/// The primitive surface by name. `Scale` carries its constant factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    Gelu,
    SoftmaxRows,
    LayerNormLastDim,
    Dropout,
    ConcatLastDim,
    Add,
    Scale(f64),
}

fn expect_arity<S: Scalar>(
    kind: &'static str,
    inputs: &[&DenseTensor<S>],
    n: usize,
) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Contract(format!(
            "{kind} expects {n} input(s), got {}",
            inputs.len()
        )));
    }
    Ok(())
}

/// Validating dispatcher over the primitive ops. Inputs must be finite;
/// dropout draws its mask from the store's seeded generator.
pub fn primitive_forward<S: Scalar>(
    kind: PrimitiveKind,
    inputs: &[&DenseTensor<S>],
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    if inputs.is_empty() {
        return Err(Error::Contract("primitive_forward with no inputs".into()));
    }
    for t in inputs {
        if !t.is_all_finite() {
            return Err(Error::numeric(
                format!("{kind:?}"),
                "non-finite value in input",
            ));
        }
    }
    match kind {
        PrimitiveKind::Gelu => {
            expect_arity("gelu", inputs, 1)?;
            gelu(inputs[0])
        }
        PrimitiveKind::SoftmaxRows => {
            expect_arity("softmax_rows", inputs, 1)?;
            softmax_lastdim(inputs[0])
        }
        PrimitiveKind::LayerNormLastDim => {
            expect_arity("layer_norm_lastdim", inputs, 1)?;
            layer_norm_lastdim(inputs[0])
        }
        PrimitiveKind::Dropout => {
            expect_arity("dropout", inputs, 1)?;
            dropout(inputs[0], mode, keep_prob, store)
        }
        PrimitiveKind::ConcatLastDim => concat_lastdim(inputs),
        PrimitiveKind::Add => {
            expect_arity("add", inputs, 2)?;
            add(inputs[0], inputs[1])
        }
        PrimitiveKind::Scale(c) => {
            expect_arity("scale", inputs, 1)?;
            scale(inputs[0], c)
        }
    }
}

/// 53-bit uniform draw in [0, 1).
fn next_unit_f64(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
