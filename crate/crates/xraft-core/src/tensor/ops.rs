//! Differentiable operations: forward definitions and gradient rules.

use super::kernels::{
    bilinear_taps, col2im_acc, im2col, matmul_abt_acc, matmul_acc, matmul_atb_acc,
};
use super::{GradTable, Op, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims4<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!("{what}: expected 4-d tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, v: T) -> Tensor<T> {
        let data = self.data().iter().map(|x| *x + v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, v: T) -> Tensor<T> {
        let data = self.data().iter().map(|x| *x * v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::MulScalar(self.clone(), v))
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|x| if *x > T::zero() { *x } else { T::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let one = T::one();
        let data = self
            .data()
            .iter()
            .map(|x| one / (one + (-*x).exp()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    pub fn tanh_act(&self) -> Tensor<T> {
        let data = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    /// Full reduction to a scalar tensor of shape [1].
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(T::one() / T::from_usize(n))
    }

    /// Reduces every axis but the first: [N, ...] -> [N].
    pub fn sum_per_sample(&self) -> Result<Tensor<T>> {
        if self.shape().is_empty() {
            return Err(Error::Shape("sum_per_sample: 0-d tensor".into()));
        }
        let n = self.shape()[0];
        let row = self.numel() / n.max(1);
        let data = self.data();
        let sums = (0..n)
            .map(|i| data[i * row..(i + 1) * row].iter().copied().sum())
            .collect();
        drop(data);
        Ok(Tensor::from_op(vec![n], sums, Op::SumPerSample(self.clone())))
    }

    /// Slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: axis {axis} range {start}..{} out of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = self.data();
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        drop(data);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(Tensor::from_op(
            new_shape,
            out,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
                len,
            },
        ))
    }

    /// View with a new shape of equal element count (no data copy on the
    /// forward value; the graph still records a node).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} values) -> {:?} ({} values)",
                self.shape(),
                self.numel(),
                shape,
                n
            )));
        }
        let data = self.to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            Op::Reshape(self.clone()),
        ))
    }

    /// Axis permutation, e.g. `permute(&[0, 3, 1, 2])`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "permute: axes {axes:?} is not a permutation of 0..{nd}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = row_major_strides(shape);
        let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![T::zero(); self.numel()];
        let data = self.data();
        let mut idx = vec![0usize; nd];
        for slot in out.iter_mut() {
            let mut src = 0;
            for d in 0..nd {
                src += idx[d] * out_strides_in[d];
            }
            *slot = data[src];
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Permute {
                input: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Cross-correlation convolution over [N,Cin,H,W] with weights
    /// [Cout,Cin,kh,kw] and bias [Cout].
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = dims4("conv2d input", self)?;
        let (cout, wcin, kh, kw) = dims4("conv2d weight", weight)?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ck = cin * kh * kw;
        let ohw = oh * ow;
        let mut out = vec![T::zero(); n * cout * ohw];
        let mut cols = vec![T::zero(); ck * ohw];
        {
            let input = self.data();
            let wdat = weight.data();
            let bdat = bias.data();
            for s in 0..n {
                im2col(
                    &mut cols,
                    &input[s * cin * h * w..(s + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                );
                let out_s = &mut out[s * cout * ohw..(s + 1) * cout * ohw];
                // Seed rows with the bias, then accumulate; this keeps the
                // f32 summation order identical to a naive nested loop.
                for co in 0..cout {
                    let b = bdat[co];
                    for v in &mut out_s[co * ohw..(co + 1) * ohw] {
                        *v = b;
                    }
                }
                matmul_acc(out_s, &wdat, &cols, cout, ck, ohw);
            }
        }
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                padding,
            },
        ))
    }

    /// Samples `self` ([B,C,H,W]) at absolute pixel coordinates
    /// ([B,2,Ho,Wo], channel 0 = x, channel 1 = y). Reads outside the
    /// image contribute zero. Differentiable in both the values and the
    /// coordinates.
    pub fn bilinear_sample(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4("bilinear_sample input", self)?;
        let (cb, two, oh, ow) = dims4("bilinear_sample coords", coords)?;
        if cb != b || two != 2 {
            return Err(Error::Shape(format!(
                "bilinear_sample: coords shape {:?} does not pair with input {:?}",
                coords.shape(),
                self.shape()
            )));
        }
        let mut out = vec![T::zero(); b * c * oh * ow];
        {
            let input = self.data();
            let cdat = coords.data();
            let o_hw = oh * ow;
            let hw = h * w;
            for s in 0..b {
                let cbase = s * 2 * o_hw;
                for p in 0..o_hw {
                    let x = cdat[cbase + p];
                    let y = cdat[cbase + o_hw + p];
                    let taps = bilinear_taps(x, y, w, h);
                    for ch in 0..c {
                        let plane = &input[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        let mut acc = T::zero();
                        for (pos, wt) in &taps {
                            if let Some((xx, yy)) = pos {
                                acc = acc + *wt * plane[yy * w + xx];
                            }
                        }
                        out[(s * c + ch) * o_hw + p] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            Op::BilinearSample {
                input: self.clone(),
                coords: coords.clone(),
            },
        ))
    }

    /// Mean over non-overlapping 2x2 blocks; spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("avg_pool2", self)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2: spatial dims must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        {
            let data = self.data();
            for nc in 0..n * c {
                let plane = &data[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = 2 * oy * w + 2 * ox;
                        dst[oy * ow + ox] =
                            (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            Op::AvgPool2(self.clone()),
        ))
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers
    /// and clamped borders, so constants are preserved exactly.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        if factor == 0 {
            return Err(Error::Invalid("upsample_bilinear: factor must be >= 1".into()));
        }
        let (n, c, h, w) = dims4("upsample_bilinear", self)?;
        let (oh, ow) = (h * factor, w * factor);
        let xt = upsample_taps::<T>(w, factor);
        let yt = upsample_taps::<T>(h, factor);
        let mut out = vec![T::zero(); n * c * oh * ow];
        {
            let data = self.data();
            let one = T::one();
            for nc in 0..n * c {
                let plane = &data[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, fy) = yt[oy];
                    let r0 = &plane[y0 * w..y0 * w + w];
                    let r1 = &plane[y1 * w..y1 * w + w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let (x0, x1, fx) = xt[ox];
                        let top = r0[x0] * (one - fx) + r0[x1] * fx;
                        let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                        drow[ox] = top * (one - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            Op::UpsampleBilinear {
                input: self.clone(),
                factor,
            },
        ))
    }

    /// Per-sample, per-channel normalization over the spatial extent,
    /// with learned per-channel scale and shift.
    pub fn instance_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("instance_norm", self)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "instance_norm: scale/shift must have shape [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = h * w;
        let inv_m = T::one() / T::from_usize(m);
        let mut out = vec![T::zero(); n * c * m];
        let mut means = vec![T::zero(); n * c];
        let mut istds = vec![T::zero(); n * c];
        {
            let data = self.data();
            let g = gamma.data();
            let b = beta.data();
            for s in 0..n {
                for ch in 0..c {
                    let plane = &data[(s * c + ch) * m..(s * c + ch + 1) * m];
                    let mu: T = plane.iter().copied().sum::<T>() * inv_m;
                    let mut var = T::zero();
                    for v in plane {
                        let d = *v - mu;
                        var = var + d * d;
                    }
                    var = var * inv_m;
                    let istd = T::one() / (var + eps).sqrt();
                    means[s * c + ch] = mu;
                    istds[s * c + ch] = istd;
                    let (gc, bc) = (g[ch], b[ch]);
                    let dst = &mut out[(s * c + ch) * m..(s * c + ch + 1) * m];
                    for (o, v) in dst.iter_mut().zip(plane) {
                        *o = gc * (*v - mu) * istd + bc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            Op::InstanceNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: means,
                istd: istds,
            },
        ))
    }

    /// Euclidean norm across axis 1: [N,C,H,W] -> [N,1,H,W]. The gradient
    /// at an exactly zero vector is taken as zero.
    pub fn vec_norm(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("vec_norm", self)?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw];
        {
            let data = self.data();
            for s in 0..n {
                for p in 0..hw {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        let v = data[(s * c + ch) * hw + p];
                        acc = acc + v * v;
                    }
                    out[s * hw + p] = acc.sqrt();
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, 1, h, w],
            out,
            Op::VecNorm(self.clone()),
        ))
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// (left index, right index, right weight) per output position, with
/// half-pixel centers and clamped borders.
fn upsample_taps<T: Scalar>(len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let half = T::from_f64(0.5);
    let inv_f = T::one() / T::from_usize(factor);
    (0..len * factor)
        .map(|o| {
            let x = (T::from_usize(o) + half) * inv_f - half;
            let x0f = x.floor();
            let fx = x - x0f;
            let x0 = x0f.as_f64() as isize;
            let x0c = x0.clamp(0, len as isize - 1) as usize;
            let x1c = (x0 + 1).clamp(0, len as isize - 1) as usize;
            (x0c, x1c, fx)
        })
        .collect()
}

/// Concatenates tensors along `axis`; all other dims must agree.
pub fn concat<T: Scalar>(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::Shape("concat: no inputs".into()));
    }
    let first = inputs[0].shape().to_vec();
    if axis >= first.len() {
        return Err(Error::Shape(format!(
            "concat: axis {axis} out of range for shape {first:?}"
        )));
    }
    let mut axis_total = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len()
            || s.iter()
                .enumerate()
                .any(|(d, &v)| d != axis && v != first[d])
        {
            return Err(Error::Shape(format!(
                "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
            )));
        }
        axis_total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0;
    for t in inputs {
        let alen = t.shape()[axis];
        let data = t.data();
        for o in 0..outer {
            let src = &data[o * alen * inner..(o + 1) * alen * inner];
            let dst_base = (o * axis_total + offset) * inner;
            out[dst_base..dst_base + alen * inner].copy_from_slice(src);
        }
        offset += alen;
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        },
    ))
}

/// All-pairs feature correlation: entry (p1, p2) is the feature dot
/// product between location p1 of `f1` and p2 of `f2`, scaled by
/// 1/sqrt(D). Shapes [N,D,H,W] -> [N,H,W,H,W].
pub fn corr_volume<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("corr_volume", f1, f2)?;
    let (n, d, h, w) = dims4("corr_volume", f1)?;
    let hw = h * w;
    let scale = T::one() / T::from_usize(d).sqrt();
    let mut out = vec![T::zero(); n * hw * hw];
    {
        let a = f1.data();
        let b = f2.data();
        for s in 0..n {
            let out_s = &mut out[s * hw * hw..(s + 1) * hw * hw];
            matmul_atb_acc(
                out_s,
                &a[s * d * hw..(s + 1) * d * hw],
                &b[s * d * hw..(s + 1) * d * hw],
                hw,
                d,
                hw,
            );
            for v in out_s.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, h, w, h, w],
        out,
        Op::CorrVolume {
            f1: f1.clone(),
            f2: f2.clone(),
        },
    ))
}

/// Applies the gradient rule of one node: reads the node's per-call
/// gradient `g` and accumulates contributions into its parents' scratch
/// buffers in the table.
pub(crate) fn backward_step<T: Scalar>(
    node: &Tensor<T>,
    g: &[T],
    table: &mut GradTable<T>,
) -> Result<()> {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                table.add(a, g);
            }
            if b.requires_grad() {
                table.add(b, g);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                table.add(a, g);
            }
            if b.requires_grad() {
                table.with_buf(b, |gb| {
                    for (s, gi) in gb.iter_mut().zip(g) {
                        *s = *s - *gi;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data();
                table.with_buf(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
            }
            if b.requires_grad() {
                let ad = a.data();
                table.with_buf(b, |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
        }
        Op::AddScalar(a) => {
            if a.requires_grad() {
                table.add(a, g);
            }
        }
        Op::MulScalar(a, s) => {
            if a.requires_grad() {
                let s = *s;
                table.with_buf(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * s;
                    }
                });
            }
        }
        Op::Relu(a) => {
            if a.requires_grad() {
                let out = node.data();
                table.with_buf(a, |ga| {
                    for i in 0..g.len() {
                        if out[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if a.requires_grad() {
                let out = node.data();
                let one = T::one();
                table.with_buf(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * out[i] * (one - out[i]);
                    }
                });
            }
        }
        Op::Tanh(a) => {
            if a.requires_grad() {
                let out = node.data();
                let one = T::one();
                table.with_buf(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * (one - out[i] * out[i]);
                    }
                });
            }
        }
        Op::Sum(a) => {
            if a.requires_grad() {
                let g0 = g[0];
                table.with_buf(a, |ga| {
                    for s in ga.iter_mut() {
                        *s = *s + g0;
                    }
                });
            }
        }
        Op::SumPerSample(a) => {
            if a.requires_grad() {
                let n = a.shape()[0];
                let row = a.numel() / n.max(1);
                table.with_buf(a, |ga| {
                    for i in 0..n {
                        let gi = g[i];
                        for s in &mut ga[i * row..(i + 1) * row] {
                            *s = *s + gi;
                        }
                    }
                });
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let mut offset = 0;
            for t in inputs {
                let alen = t.shape()[*axis];
                if t.requires_grad() {
                    table.with_buf(t, |gt| {
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst = &mut gt[o * alen * inner..(o + 1) * alen * inner];
                            for (d, s) in
                                dst.iter_mut().zip(&g[src_base..src_base + alen * inner])
                            {
                                *d = *d + *s;
                            }
                        }
                    });
                }
                offset += alen;
            }
        }
        Op::Narrow {
            input,
            axis,
            start,
            len,
        } => {
            if input.requires_grad() {
                let shape = input.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let axis_len = shape[*axis];
                table.with_buf(input, |gi| {
                    for o in 0..outer {
                        let dst_base = (o * axis_len + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gi[dst_base..dst_base + len * inner].iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if a.requires_grad() {
                table.add(a, g);
            }
        }
        Op::Permute { input, axes } => {
            if input.requires_grad() {
                let out_shape = node.shape().to_vec();
                let nd = out_shape.len();
                let in_strides = row_major_strides(input.shape());
                let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                table.with_buf(input, |gi| {
                    let mut idx = vec![0usize; nd];
                    for gv in g.iter() {
                        let mut src = 0;
                        for d in 0..nd {
                            src += idx[d] * out_strides_in[d];
                        }
                        gi[src] = gi[src] + *gv;
                        for d in (0..nd).rev() {
                            idx[d] += 1;
                            if idx[d] < out_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                });
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (n, cin, h, w) = dims4("conv2d input", input)?;
            let (cout, _, kh, kw) = dims4("conv2d weight", weight)?;
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (w + 2 * padding - kw) / stride + 1;
            let (ck, ohw) = (cin * kh * kw, oh * ow);
            if bias.requires_grad() {
                table.with_buf(bias, |gb| {
                    for s in 0..n {
                        for co in 0..cout {
                            let base = (s * cout + co) * ohw;
                            let sum: T = g[base..base + ohw].iter().copied().sum();
                            gb[co] = gb[co] + sum;
                        }
                    }
                });
            }
            let need_w = weight.requires_grad();
            let need_x = input.requires_grad();
            if need_w || need_x {
                let mut cols = vec![T::zero(); ck * ohw];
                let mut dcols = vec![T::zero(); ck * ohw];
                let in_dat = input.data();
                let w_dat = weight.data();
                let mut gw = if need_w {
                    Some(table.take_or_zeros(weight))
                } else {
                    None
                };
                let mut gx = if need_x {
                    Some(table.take_or_zeros(input))
                } else {
                    None
                };
                for s in 0..n {
                    let g_s = &g[s * cout * ohw..(s + 1) * cout * ohw];
                    if let Some(gw) = gw.as_mut() {
                        im2col(
                            &mut cols,
                            &in_dat[s * cin * h * w..(s + 1) * cin * h * w],
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                        );
                        matmul_abt_acc(gw, g_s, &cols, cout, ohw, ck);
                    }
                    if let Some(gx) = gx.as_mut() {
                        for v in dcols.iter_mut() {
                            *v = T::zero();
                        }
                        matmul_atb_acc(&mut dcols, &w_dat, g_s, ck, cout, ohw);
                        col2im_acc(
                            &mut gx[s * cin * h * w..(s + 1) * cin * h * w],
                            &dcols,
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                        );
                    }
                }
                if let Some(buf) = gw {
                    table.put(weight, buf);
                }
                if let Some(buf) = gx {
                    table.put(input, buf);
                }
            }
        }
        Op::BilinearSample { input, coords } => {
            let (b, c, h, w) = dims4("bilinear_sample input", input)?;
            let o_hw = coords.shape()[2] * coords.shape()[3];
            let hw = h * w;
            let in_dat = input.data();
            let c_dat = coords.data();
            let mut gx = if input.requires_grad() {
                Some(table.take_or_zeros(input))
            } else {
                None
            };
            let mut gc = if coords.requires_grad() {
                Some(table.take_or_zeros(coords))
            } else {
                None
            };
            let one = T::one();
            for s in 0..b {
                let cbase = s * 2 * o_hw;
                for p in 0..o_hw {
                    let x = c_dat[cbase + p];
                    let y = c_dat[cbase + o_hw + p];
                    let x0f = x.floor();
                    let y0f = y.floor();
                    let fx = x - x0f;
                    let fy = y - y0f;
                    let x0 = x0f.as_f64() as isize;
                    let y0 = y0f.as_f64() as isize;
                    let corner = |xx: isize, yy: isize| -> Option<usize> {
                        if xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h {
                            Some(yy as usize * w + xx as usize)
                        } else {
                            None
                        }
                    };
                    let c00 = corner(x0, y0);
                    let c10 = corner(x0 + 1, y0);
                    let c01 = corner(x0, y0 + 1);
                    let c11 = corner(x0 + 1, y0 + 1);
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let gv = g[(s * c + ch) * o_hw + p];
                        if gv == T::zero() {
                            continue;
                        }
                        let plane_base = (s * c + ch) * hw;
                        if let Some(gx) = gx.as_mut() {
                            if let Some(i) = c00 {
                                gx[plane_base + i] =
                                    gx[plane_base + i] + gv * (one - fx) * (one - fy);
                            }
                            if let Some(i) = c10 {
                                gx[plane_base + i] = gx[plane_base + i] + gv * fx * (one - fy);
                            }
                            if let Some(i) = c01 {
                                gx[plane_base + i] = gx[plane_base + i] + gv * (one - fx) * fy;
                            }
                            if let Some(i) = c11 {
                                gx[plane_base + i] = gx[plane_base + i] + gv * fx * fy;
                            }
                        }
                        if gc.is_some() {
                            let val = |idx: Option<usize>| -> T {
                                idx.map_or(T::zero(), |i| in_dat[plane_base + i])
                            };
                            let (v00, v10, v01, v11) = (val(c00), val(c10), val(c01), val(c11));
                            dx = dx + gv * ((v10 - v00) * (one - fy) + (v11 - v01) * fy);
                            dy = dy + gv * ((v01 - v00) * (one - fx) + (v11 - v10) * fx);
                        }
                    }
                    if let Some(gc) = gc.as_mut() {
                        gc[cbase + p] = gc[cbase + p] + dx;
                        gc[cbase + o_hw + p] = gc[cbase + o_hw + p] + dy;
                    }
                }
            }
            if let Some(buf) = gx {
                table.put(input, buf);
            }
            if let Some(buf) = gc {
                table.put(coords, buf);
            }
        }
        Op::CorrVolume { f1, f2 } => {
            let (n, d, h, w) = dims4("corr_volume", f1)?;
            let hw = h * w;
            let scale = T::one() / T::from_usize(d).sqrt();
            let mut gs = vec![T::zero(); hw * hw];
            let mut g1 = if f1.requires_grad() {
                Some(table.take_or_zeros(f1))
            } else {
                None
            };
            let mut g2 = if f2.requires_grad() {
                Some(table.take_or_zeros(f2))
            } else {
                None
            };
            for s in 0..n {
                for (dst, src) in gs.iter_mut().zip(&g[s * hw * hw..(s + 1) * hw * hw]) {
                    *dst = *src * scale;
                }
                if let Some(g1) = g1.as_mut() {
                    let f2d = f2.data();
                    matmul_abt_acc(
                        &mut g1[s * d * hw..(s + 1) * d * hw],
                        &f2d[s * d * hw..(s + 1) * d * hw],
                        &gs,
                        d,
                        hw,
                        hw,
                    );
                }
                if let Some(g2) = g2.as_mut() {
                    let f1d = f1.data();
                    matmul_acc(
                        &mut g2[s * d * hw..(s + 1) * d * hw],
                        &f1d[s * d * hw..(s + 1) * d * hw],
                        &gs,
                        d,
                        hw,
                        hw,
                    );
                }
            }
            if let Some(buf) = g1 {
                table.put(f1, buf);
            }
            if let Some(buf) = g2 {
                table.put(f2, buf);
            }
        }
        Op::AvgPool2(a) => {
            if a.requires_grad() {
                let (n, c, h, w) = dims4("avg_pool2", a)?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                table.with_buf(a, |ga| {
                    for nc in 0..n * c {
                        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut ga[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = src[oy * ow + ox] * quarter;
                                let i = 2 * oy * w + 2 * ox;
                                dst[i] = dst[i] + gv;
                                dst[i + 1] = dst[i + 1] + gv;
                                dst[i + w] = dst[i + w] + gv;
                                dst[i + w + 1] = dst[i + w + 1] + gv;
                            }
                        }
                    }
                });
            }
        }
        Op::UpsampleBilinear { input, factor } => {
            if input.requires_grad() {
                let (n, c, h, w) = dims4("upsample_bilinear", input)?;
                let (oh, ow) = (h * factor, w * factor);
                let xt = upsample_taps::<T>(w, *factor);
                let yt = upsample_taps::<T>(h, *factor);
                let one = T::one();
                table.with_buf(input, |gi| {
                    for nc in 0..n * c {
                        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut gi[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, fy) = yt[oy];
                            for ox in 0..ow {
                                let (x0, x1, fx) = xt[ox];
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * (one - fx) * (one - fy);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * fx * (one - fy);
                                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * (one - fx) * fy;
                                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * fx * fy;
                            }
                        }
                    }
                });
            }
        }
        Op::InstanceNorm {
            input,
            gamma,
            beta,
            mean,
            istd,
        } => {
            let (n, c, h, w) = dims4("instance_norm", input)?;
            let m = h * w;
            let inv_m = T::one() / T::from_usize(m);
            let in_dat = input.data();
            let g_dat = gamma.data();
            let mut gx = if input.requires_grad() {
                Some(table.take_or_zeros(input))
            } else {
                None
            };
            let mut gg = if gamma.requires_grad() {
                Some(table.take_or_zeros(gamma))
            } else {
                None
            };
            let mut gb = if beta.requires_grad() {
                Some(table.take_or_zeros(beta))
            } else {
                None
            };
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * m;
                    let mu = mean[s * c + ch];
                    let is = istd[s * c + ch];
                    let plane = &in_dat[base..base + m];
                    let gout = &g[base..base + m];
                    let mut sum_g = T::zero();
                    let mut sum_gy = T::zero();
                    for i in 0..m {
                        let y = (plane[i] - mu) * is;
                        sum_g = sum_g + gout[i];
                        sum_gy = sum_gy + gout[i] * y;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ch] = gb[ch] + sum_g;
                    }
                    if let Some(gg) = gg.as_mut() {
                        gg[ch] = gg[ch] + sum_gy;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gc = g_dat[ch];
                        let mean_g = sum_g * inv_m;
                        let mean_gy = sum_gy * inv_m;
                        for i in 0..m {
                            let y = (plane[i] - mu) * is;
                            gx[base + i] = gx[base + i] + gc * is * (gout[i] - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            if let Some(buf) = gx {
                table.put(input, buf);
            }
            if let Some(buf) = gg {
                table.put(gamma, buf);
            }
            if let Some(buf) = gb {
                table.put(beta, buf);
            }
        }
        Op::VecNorm(a) => {
            if a.requires_grad() {
                let (n, c, h, w) = dims4("vec_norm", a)?;
                let hw = h * w;
                let out = node.data();
                let ad = a.data();
                table.with_buf(a, |ga| {
                    for s in 0..n {
                        for p in 0..hw {
                            let norm = out[s * hw + p];
                            if norm > T::zero() {
                                let gv = g[s * hw + p] / norm;
                                for ch in 0..c {
                                    let idx = (s * c + ch) * hw + p;
                                    ga[idx] = ga[idx] + gv * ad[idx];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
    Ok(())
}
