//! Differentiable operations recorded on a [`Tape`].
//!
//! Every method computes its result eagerly and, when at least one input is
//! tracked, appends a node whose closure maps the output gradient to one
//! gradient buffer per input. Inputs without a node are constants and
//! receive no gradient.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::tape::Tape;
use crate::tensor::{strides_of, Tensor};

/// Floor used by [`Tape::cosine`] and [`Tape::cosine_cols`] to keep norms
/// away from zero.
pub const COS_EPS: f64 = 1e-8;

/// Additive smoothing inside [`Tape::kl_div`].
pub const KL_EPS: f64 = 1e-12;

/// Right-aligned broadcast of two shapes; axes of size 1 stretch.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Per-output-axis stride into an input that broadcasts to `out_shape`.
/// Stretched or missing axes get stride 0.
fn bcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let offset = out_shape.len() - in_shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= offset {
            let j = i - offset;
            if in_shape[j] == out_shape[i] {
                out[i] = in_strides[j];
            }
        }
    }
    out
}

/// Maps a linear index in the output to a linear index in a broadcast input.
#[inline]
fn map_lin(lin: usize, out_shape: &[usize], out_strides: &[usize], in_axis_strides: &[usize]) -> usize {
    let mut acc = 0usize;
    for i in 0..out_shape.len() {
        let coord = (lin / out_strides[i]) % out_shape[i];
        acc += coord * in_axis_strides[i];
    }
    acc
}

impl Tape {
    fn binary_broadcast(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let out_strides = strides_of(&out_shape);
        let a_map = bcast_strides(a.shape(), &out_shape);
        let b_map = bcast_strides(b.shape(), &out_shape);
        let n: usize = out_shape.iter().product();

        let ad = a.data_arc();
        let bd = b.data_arc();
        let mut data = vec![0.0; n];
        for lin in 0..n {
            let ia = map_lin(lin, &out_shape, &out_strides, &a_map);
            let ib = map_lin(lin, &out_shape, &out_strides, &b_map);
            data[lin] = f(ad[ia], bd[ib]);
        }

        let (a_len, b_len) = (a.len(), b.len());
        let shape_c = out_shape.clone();
        let back = move |g: &[f64]| {
            let mut ga = vec![0.0; a_len];
            let mut gb = vec![0.0; b_len];
            for lin in 0..n {
                let ia = map_lin(lin, &shape_c, &out_strides, &a_map);
                let ib = map_lin(lin, &shape_c, &out_strides, &b_map);
                let (av, bv) = (ad[ia], bd[ib]);
                ga[ia] += g[lin] * dfa(av, bv);
                gb[ib] += g[lin] * dfb(av, bv);
            }
            vec![ga, gb]
        };
        self.emit(&[a, b], out_shape, data, Box::new(back))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Elementwise quotient with broadcasting.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(
            a,
            b,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    fn unary_pointwise(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let ad = a.data_arc();
        let out = data.clone();
        let back = move |g: &[f64]| {
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * df(ad[i], out[i]))
                .collect();
            vec![gx]
        };
        self.emit(&[a], a.shape().to_vec(), data, Box::new(back))
    }

    /// Scales every element by a constant.
    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary_pointwise(a, |x| x * c, move |_, _| c)
    }

    /// max(0, x); the derivative at exactly 0 is taken as 0.
    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_pointwise(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Elementwise square root; the derivative at 0 is taken as 0 so a
    /// clamped-away zero norm never injects non-finite values.
    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_pointwise(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// max(x, lo). Gradient passes where x >= lo.
    pub fn clamp_min(&self, a: &Tensor, lo: f64) -> Result<Tensor> {
        self.unary_pointwise(
            a,
            move |x| x.max(lo),
            move |x, _| if x >= lo { 1.0 } else { 0.0 },
        )
    }

    /// Clamps into [lo, hi]. Gradient passes on the closed interval.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::domain(format!("clamp bounds inverted: {} > {}", lo, hi)));
        }
        self.unary_pointwise(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data().iter().sum();
        let n = a.len();
        let back = move |g: &[f64]| vec![vec![g[0]; n]];
        self.emit(&[a], vec![1], vec![total], Box::new(back))
    }

    /// Sum along one axis; that axis is removed from the shape.
    pub fn sum_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::shape(format!(
                "sum_axis axis {} out of range for shape {:?}",
                axis,
                a.shape()
            )));
        }
        let shape = a.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }

        let ad = a.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += ad[base + i];
                }
            }
        }
        let n_in = a.len();
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; n_in];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i];
                    }
                }
            }
            vec![gx]
        };
        self.emit(&[a], out_shape, data, Box::new(back))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let n = a.len();
        let m: f64 = a.data().iter().sum::<f64>() / n as f64;
        let back = move |g: &[f64]| vec![vec![g[0] / n as f64; n]];
        self.emit(&[a], vec![1], vec![m], Box::new(back))
    }

    /// Matrix product of a [M,K] by b [K,N].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 tensors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let ad = a.data_arc();
        let bd = b.data_arc();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let back = move |g: &[f64]| {
            // dA = g · Bᵀ, dB = Aᵀ · g
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * bd[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            for p in 0..k {
                for i in 0..m {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        };
        self.emit(&[a, b], vec![m, n], data, Box::new(back))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose2 needs rank 2, got {:?}",
                a.shape()
            )));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![gx]
        };
        self.emit(&[a], vec![c, r], data, Box::new(back))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                a.shape(),
                shape
            )));
        }
        let back = move |g: &[f64]| vec![g.to_vec()];
        self.emit(&[a], shape, a.data().to_vec(), Box::new(back))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack0(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("stack0 of zero tensors"));
        }
        let base = parts[0].shape().to_vec();
        for p in parts {
            if p.shape() != base.as_slice() {
                return Err(Error::shape(format!(
                    "stack0 shape mismatch: {:?} vs {:?}",
                    p.shape(),
                    base
                )));
            }
        }
        let each = parts[0].len();
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let mut data = Vec::with_capacity(each * parts.len());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let k = parts.len();
        let back = move |g: &[f64]| {
            (0..k).map(|i| g[i * each..(i + 1) * each].to_vec()).collect()
        };
        self.emit(parts, shape, data, Box::new(back))
    }

    /// Extracts row `r` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, a: &Tensor, r: usize) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!("row needs rank 2, got {:?}", a.shape())));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        if r >= rows {
            return Err(Error::shape(format!("row {} out of {} rows", r, rows)));
        }
        let data = a.data()[r * cols..(r + 1) * cols].to_vec();
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; rows * cols];
            gx[r * cols..(r + 1) * cols].copy_from_slice(g);
            vec![gx]
        };
        self.emit(&[a], vec![cols], data, Box::new(back))
    }

    /// Per-column gather: `out[:, s] = maps[winners[s]][:, s]`.
    ///
    /// All maps must share one [C,S] shape and `winners` must hold one map
    /// index per column. The backward pass scatters each column's gradient
    /// to the winning map only.
    pub fn gather_cols(&self, maps: &[&Tensor], winners: &[usize]) -> Result<Tensor> {
        if maps.is_empty() {
            return Err(Error::shape("gather_cols with zero maps"));
        }
        let shape = maps[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "gather_cols needs rank-2 maps, got {:?}",
                shape
            )));
        }
        for m in maps {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "gather_cols shape mismatch: {:?} vs {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        let (c, s) = (shape[0], shape[1]);
        if winners.len() != s {
            return Err(Error::shape(format!(
                "gather_cols got {} winners for {} columns",
                winners.len(),
                s
            )));
        }
        let k = maps.len();
        for &w in winners {
            if w >= k {
                return Err(Error::domain(format!(
                    "gather_cols winner {} out of {} maps",
                    w, k
                )));
            }
        }
        let mut data = vec![0.0; c * s];
        for col in 0..s {
            let src = maps[winners[col]].data();
            for ch in 0..c {
                data[ch * s + col] = src[ch * s + col];
            }
        }
        let winners_c = winners.to_vec();
        let back = move |g: &[f64]| {
            let mut out: Vec<Vec<f64>> = (0..k).map(|_| vec![0.0; c * s]).collect();
            for col in 0..s {
                let w = winners_c[col];
                for ch in 0..c {
                    out[w][ch * s + col] = g[ch * s + col];
                }
            }
            out
        };
        self.emit(maps, shape, data, Box::new(back))
    }

    /// Mean over a chosen set of columns of a [C,S] tensor, giving [C].
    pub fn masked_mean_cols(&self, a: &Tensor, cols: &[usize]) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!(
                "masked_mean_cols needs rank 2, got {:?}",
                a.shape()
            )));
        }
        if cols.is_empty() {
            return Err(Error::domain("masked_mean_cols with an empty column set"));
        }
        let (c, s) = (a.shape()[0], a.shape()[1]);
        for &col in cols {
            if col >= s {
                return Err(Error::shape(format!(
                    "column {} out of {} columns",
                    col, s
                )));
            }
        }
        let ad = a.data();
        let inv = 1.0 / cols.len() as f64;
        let mut data = vec![0.0; c];
        for ch in 0..c {
            for &col in cols {
                data[ch] += ad[ch * s + col];
            }
            data[ch] *= inv;
        }
        let cols_c = cols.to_vec();
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; c * s];
            for ch in 0..c {
                let contrib = g[ch] * inv;
                for &col in &cols_c {
                    gx[ch * s + col] = contrib;
                }
            }
            vec![gx]
        };
        self.emit(&[a], vec![c], data, Box::new(back))
    }

    /// Nearest-neighbour upsampling of [C,h,w] to [C,H,W].
    pub fn upsample_nearest(&self, a: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = expect_chw(a)?;
        if out_h < h || out_w < w {
            return Err(Error::shape(format!(
                "upsample target {}x{} smaller than source {}x{}",
                out_h, out_w, h, w
            )));
        }
        let src_y: Vec<usize> = (0..out_h).map(|y| (y * h / out_h).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..out_w).map(|x| (x * w / out_w).min(w - 1)).collect();
        let ad = a.data();
        let mut data = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for y in 0..out_h {
                for x in 0..out_w {
                    data[(ch * out_h + y) * out_w + x] = ad[(ch * h + src_y[y]) * w + src_x[x]];
                }
            }
        }
        let (sy, sx) = (src_y, src_x);
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..out_h {
                    for x in 0..out_w {
                        gx[(ch * h + sy[y]) * w + sx[x]] += g[(ch * out_h + y) * out_w + x];
                    }
                }
            }
            vec![gx]
        };
        self.emit(&[a], vec![c, out_h, out_w], data, Box::new(back))
    }

    /// Bilinear upsampling of [C,h,w] to [C,H,W] with half-pixel centres
    /// (align_corners = false).
    pub fn upsample_bilinear(&self, a: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = expect_chw(a)?;
        if out_h < h || out_w < w {
            return Err(Error::shape(format!(
                "upsample target {}x{} smaller than source {}x{}",
                out_h, out_w, h, w
            )));
        }
        // For each output coordinate: two source indices and a blend weight.
        let plan = |src_len: usize, dst_len: usize| -> Vec<(usize, usize, f64)> {
            let scale = src_len as f64 / dst_len as f64;
            (0..dst_len)
                .map(|d| {
                    let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src_len - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = plan(h, out_h);
        let xs = plan(w, out_w);
        let ad = a.data();
        let mut data = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let base = ch * h * w;
            for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v00 = ad[base + y0 * w + x0];
                    let v01 = ad[base + y0 * w + x1];
                    let v10 = ad[base + y1 * w + x0];
                    let v11 = ad[base + y1 * w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    data[(ch * out_h + y) * out_w + x] = top + (bot - top) * wy;
                }
            }
        }
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let base = ch * h * w;
                for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = g[(ch * out_h + y) * out_w + x];
                        gx[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        gx[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                        gx[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                        gx[base + y1 * w + x1] += gv * wy * wx;
                    }
                }
            }
            vec![gx]
        };
        self.emit(&[a], vec![c, out_h, out_w], data, Box::new(back))
    }

    /// Temperature softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, a: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::domain(format!("softmax temperature must be positive, got {}", tau)));
        }
        if axis >= a.rank() {
            return Err(Error::shape(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                a.shape()
            )));
        }
        let shape = a.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = a.data();
        let mut data = vec![0.0; a.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(ad[at(j)] / tau);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = ((ad[at(j)] / tau) - mx).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[at(j)] /= z;
                }
            }
        }
        let probs = data.clone();
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; probs.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += g[at(j)] * probs[at(j)];
                    }
                    for j in 0..len {
                        gx[at(j)] = probs[at(j)] * (g[at(j)] - dot) / tau;
                    }
                }
            }
            vec![gx]
        };
        self.emit(&[a], shape, data, Box::new(back))
    }

    /// KL divergence Σ p·ln((p+ε)/(q+ε)) of two distributions.
    ///
    /// Both inputs must share a shape and each must sum to 1 within 1e-6.
    /// A detached `p` makes the teacher side a pure target: gradient then
    /// flows only into `q`.
    pub fn kl_div(&self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        if p.shape() != q.shape() {
            return Err(Error::shape(format!(
                "kl_div shape mismatch: {:?} vs {:?}",
                p.shape(),
                q.shape()
            )));
        }
        for (name, t) in [("p", p), ("q", q)] {
            let s: f64 = t.data().iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::domain(format!(
                    "kl_div input {} sums to {}, expected 1",
                    name, s
                )));
            }
        }
        let pd = p.data_arc();
        let qd = q.data_arc();
        let mut total = 0.0;
        for i in 0..pd.len() {
            total += pd[i] * ((pd[i] + KL_EPS) / (qd[i] + KL_EPS)).ln();
        }
        let back = move |g: &[f64]| {
            let n = pd.len();
            let mut gp = vec![0.0; n];
            let mut gq = vec![0.0; n];
            for i in 0..n {
                let ratio = (pd[i] + KL_EPS) / (qd[i] + KL_EPS);
                gp[i] = g[0] * (ratio.ln() + pd[i] / (pd[i] + KL_EPS));
                gq[i] = -g[0] * pd[i] / (qd[i] + KL_EPS);
            }
            vec![gp, gq]
        };
        self.emit(&[p, q], vec![1], vec![total], Box::new(back))
    }

    /// Mean pixelwise cross-entropy of logits [K,h,w] against labels, with
    /// an ignore value. No supervised pixels at all gives loss 0.
    pub fn cross_entropy(&self, logits: &Tensor, labels: &LabelMap, ignore: u8) -> Result<Tensor> {
        let (k, h, w) = expect_chw(logits)?;
        if labels.height() != h || labels.width() != w {
            return Err(Error::shape(format!(
                "labels {}x{} do not match logits {:?}",
                labels.height(),
                labels.width(),
                logits.shape()
            )));
        }
        let s = h * w;
        let lab = labels.data().to_vec();
        for (i, &v) in lab.iter().enumerate() {
            if v != ignore && (v as usize) >= k {
                return Err(Error::domain(format!(
                    "label {} at pixel {} exceeds {} classes",
                    v, i, k
                )));
            }
        }
        let zd = logits.data_arc();
        let count = lab.iter().filter(|&&v| v != ignore).count();
        let mut total = 0.0;
        if count > 0 {
            for px in 0..s {
                if lab[px] == ignore {
                    continue;
                }
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(zd[c * s + px]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += (zd[c * s + px] - mx).exp();
                }
                total += mx + z.ln() - zd[lab[px] as usize * s + px];
            }
            total /= count as f64;
        }
        let n = logits.len();
        let back = move |g: &[f64]| {
            let mut gx = vec![0.0; n];
            if count > 0 {
                let scale = g[0] / count as f64;
                for px in 0..s {
                    if lab[px] == ignore {
                        continue;
                    }
                    let mut mx = f64::NEG_INFINITY;
                    for c in 0..k {
                        mx = mx.max(zd[c * s + px]);
                    }
                    let mut z = 0.0;
                    for c in 0..k {
                        z += (zd[c * s + px] - mx).exp();
                    }
                    for c in 0..k {
                        let p = (zd[c * s + px] - mx).exp() / z;
                        let y = if c == lab[px] as usize { 1.0 } else { 0.0 };
                        gx[c * s + px] = scale * (p - y);
                    }
                }
            }
            vec![gx]
        };
        self.emit(&[logits], vec![1], vec![total], Box::new(back))
    }

    /// Cosine similarity of two rank-1 tensors, clamped into [-1, 1].
    ///
    /// Norms are floored at `eps` (as sqrt(max(‖u‖², eps²))), so zero
    /// vectors give similarity 0 with a finite gradient.
    pub fn cosine(&self, u: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
        if u.rank() != 1 || v.rank() != 1 || u.len() != v.len() {
            return Err(Error::shape(format!(
                "cosine needs equal-length vectors, got {:?} and {:?}",
                u.shape(),
                v.shape()
            )));
        }
        let dot = self.sum(&self.mul(u, v)?)?;
        let nu = self.sqrt(&self.clamp_min(&self.sum(&self.mul(u, u)?)?, eps * eps)?)?;
        let nv = self.sqrt(&self.clamp_min(&self.sum(&self.mul(v, v)?)?, eps * eps)?)?;
        self.clamp(&self.div(&dot, &self.mul(&nu, &nv)?)?, -1.0, 1.0)
    }

    /// Column-wise cosine similarity of two [C,S] tensors, giving [S].
    pub fn cosine_cols(&self, a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
        if a.rank() != 2 || a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "cosine_cols needs matching rank-2 shapes, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let dot = self.sum_axis(&self.mul(a, b)?, 0)?;
        let na = self.sqrt(&self.clamp_min(&self.sum_axis(&self.mul(a, a)?, 0)?, eps * eps)?)?;
        let nb = self.sqrt(&self.clamp_min(&self.sum_axis(&self.mul(b, b)?, 0)?, eps * eps)?)?;
        self.clamp(&self.div(&dot, &self.mul(&na, &nb)?)?, -1.0, 1.0)
    }
}

fn expect_chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "expected a [C,H,W] tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}
