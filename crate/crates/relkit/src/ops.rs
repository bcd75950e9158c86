//! Differentiable primitives: forward builders on [`Tape`] and their
//! backward rules.
//!
//! Conventions: dense tensors are `[rows, cols]`, image tensors are
//! `[batch, channels, height, width]`, object sets are
//! `[batch, n, m]`. Convolution is valid cross-correlation; padding is
//! its own op. Backward rules accumulate (`+=`) so shared inputs sum
//! contributions naturally.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{grad_slot, Mode, Op, Tape, ValueId};
use crate::tensor::Tensor;

/// Variance guard added inside every batchnorm square root.
pub const BN_EPS: f64 = 1e-5;
/// Exponential-moving-average momentum for batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running batchnorm statistics, updated in train mode and consumed in
/// eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    /// Fold one batch's statistics in with momentum `BN_MOMENTUM`.
    pub fn update(&mut self, batch_mean: &[S], batch_var: &[S]) {
        let m = S::from_f64(BN_MOMENTUM);
        let one_m = S::one() - m;
        for c in 0..self.mean.len() {
            self.mean[c] = m * self.mean[c] + one_m * batch_mean[c];
            self.var[c] = m * self.var[c] + one_m * batch_var[c];
        }
    }
}

/// LSTM step weights as tape nodes: input projection `wx` `[in, 4h]`,
/// recurrent projection `wh` `[hid, 4h]`, bias `b` `[4h]`. Gate blocks
/// are ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub wx: ValueId,
    pub wh: ValueId,
    pub b: ValueId,
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    fn shape2(&self, id: ValueId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.values[id.0].shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `x·W + bias` with `x [r,in]`, `W [in,out]`, `bias [out]`.
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, xin) = self.shape2(x, "affine")?;
        let (win, wout) = self.shape2(w, "affine")?;
        if xin != win {
            return Err(Error::Dimension {
                op: "affine",
                lhs: vec![r, xin],
                rhs: vec![win, wout],
            });
        }
        if self.values[b.0].shape() != [wout] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: self.values[b.0].shape().to_vec(),
                rhs: vec![wout],
            });
        }
        let mut out = vec![S::zero(); r * wout];
        matmul_into(
            &mut out,
            self.values[x.0].data(),
            self.values[w.0].data(),
            r,
            xin,
            wout,
        );
        let bias = self.values[b.0].data();
        for row in out.chunks_exact_mut(wout) {
            for (o, bo) in row.iter_mut().zip(bias) {
                *o += *bo;
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        Ok(self.push(
            Tensor::from_raw(vec![r, wout], out),
            req,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    /// `x·W` without bias.
    pub fn matmul(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let (r, xin) = self.shape2(x, "matmul")?;
        let (win, wout) = self.shape2(w, "matmul")?;
        if xin != win {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![r, xin],
                rhs: vec![win, wout],
            });
        }
        let mut out = vec![S::zero(); r * wout];
        matmul_into(
            &mut out,
            self.values[x.0].data(),
            self.values[w.0].data(),
            r,
            xin,
            wout,
        );
        let req = self.requires[x.0] || self.requires[w.0];
        Ok(self.push(
            Tensor::from_raw(vec![r, wout], out),
            req,
            Op::Matmul { x: x.0, w: w.0 },
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.values[x.0].map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, self.requires[x.0], Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = self.values[x.0].map(sigmoid_scalar);
        self.push(out, self.requires[x.0], Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let out = self.values[x.0].map(|v| v.tanh());
        self.push(out, self.requires[x.0], Op::Tanh { x: x.0 })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, req, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, req, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: ValueId, c: S) -> ValueId {
        let out = self.values[x.0].map(|v| v * c);
        self.push(out, self.requires[x.0], Op::Scale { x: x.0, c })
    }

    /// Inverted dropout: in train mode each element is kept with
    /// probability `1 − rate` and scaled by `1/(1 − rate)`; in eval mode
    /// (or at rate 0) the input id is returned unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: ValueId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let inv = S::from_f64(1.0 / keep);
        let mask: Vec<S> = (0..self.values[x.0].numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    inv
                } else {
                    S::zero()
                }
            })
            .collect();
        let data = self.values[x.0]
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_raw(self.values[x.0].shape().to_vec(), data);
        let req = self.requires[x.0];
        Ok(self.push(out, req, Op::Dropout { x: x.0, mask }))
    }

    /// Columns `from..to` of a `[r, w]` tensor.
    pub fn slice_cols(&mut self, x: ValueId, from: usize, to: usize) -> Result<ValueId> {
        let (r, w) = self.shape2(x, "slice_cols")?;
        if from >= to || to > w {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![from, to],
                rhs: vec![r, w],
            });
        }
        let wid = to - from;
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(r * wid);
        for row in 0..r {
            data.extend_from_slice(&src[row * w + from..row * w + to]);
        }
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::from_raw(vec![r, wid], data),
            req,
            Op::SliceCols { x: x.0, from },
        ))
    }

    /// Concatenate 2-D tensors along columns (same row count).
    pub fn concat_cols(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Config("concat_cols of zero tensors".into()));
        }
        let (r, _) = self.shape2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, wi) = self.shape2(x, "concat_cols")?;
            if ri != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.values[xs[0].0].shape().to_vec(),
                    rhs: self.values[x.0].shape().to_vec(),
                });
            }
            widths.push(wi);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&x, &wi) in xs.iter().zip(&widths) {
                let src = self.values[x.0].data();
                data.extend_from_slice(&src[row * wi..(row + 1) * wi]);
            }
        }
        let req = xs.iter().any(|&x| self.requires[x.0]);
        Ok(self.push(
            Tensor::from_raw(vec![r, total], data),
            req,
            Op::ConcatCols {
                xs: xs.iter().map(|x| x.0).collect(),
            },
        ))
    }

    /// Stack 2-D tensors along rows (same column count).
    pub fn concat_rows(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Config("concat_rows of zero tensors".into()));
        }
        let (_, w) = self.shape2(xs[0], "concat_rows")?;
        let mut rows = 0;
        for &x in xs {
            let (ri, wi) = self.shape2(x, "concat_rows")?;
            if wi != w {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.values[xs[0].0].shape().to_vec(),
                    rhs: self.values[x.0].shape().to_vec(),
                });
            }
            rows += ri;
        }
        let mut data = Vec::with_capacity(rows * w);
        for &x in xs {
            data.extend_from_slice(self.values[x.0].data());
        }
        let req = xs.iter().any(|&x| self.requires[x.0]);
        Ok(self.push(
            Tensor::from_raw(vec![rows, w], data),
            req,
            Op::ConcatRows {
                xs: xs.iter().map(|x| x.0).collect(),
            },
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x.0].numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.values[x.0].data().to_vec();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_raw(shape, data), req, Op::Reshape { x: x.0 }))
    }

    /// Sum of every element, as a `[1]` scalar tensor.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: S = self.values[x.0].data().iter().copied().sum();
        let req = self.requires[x.0];
        self.push(Tensor::from_raw(vec![1], vec![s]), req, Op::SumAll { x: x.0 })
    }

    /// Zero-pad the two spatial dims of a `[b,c,h,w]` tensor by `pad` on
    /// every side.
    pub fn pad2d(&mut self, x: ValueId, pad: usize) -> Result<ValueId> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "pad2d",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.values[x.0].data();
        let mut data = vec![S::zero(); b * c * hp * wp];
        for bc in 0..b * c {
            for i in 0..h {
                let dst = bc * hp * wp + (i + pad) * wp + pad;
                let s0 = bc * h * w + i * w;
                data[dst..dst + w].copy_from_slice(&src[s0..s0 + w]);
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::from_raw(vec![b, c, hp, wp], data),
            req,
            Op::Pad2d { x: x.0, pad },
        ))
    }

    /// Valid cross-correlation: `x [b,c,h,w]` with kernels `[k,c,kh,kw]`
    /// and per-kernel bias, output `[b,k,h',w']` where
    /// `h' = (h−kh)/stride + 1`.
    pub fn conv2d(&mut self, x: ValueId, k: ValueId, b: ValueId, stride: usize) -> Result<ValueId> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c || kh > h || kw > w {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if self.values[b.0].shape() != [oc] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: self.values[b.0].shape().to_vec(),
                rhs: vec![oc],
            });
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let ckk = c * kh * kw;
        let cols = im2col(self.values[x.0].data(), bn, c, h, w, kh, kw, stride, ho, wo);

        let mut out = vec![S::zero(); bn * oc * ho * wo];
        let kern = self.values[k.0].data();
        let plane = ho * wo;
        for bi in 0..bn {
            // out[bi] viewed as (cell p, channel o) with strides (1, plane):
            // cols[bi] (p, ck) × kernᵀ (ck, o).
            unsafe {
                S::gemm(
                    plane,
                    ckk,
                    oc,
                    S::one(),
                    cols[bi * plane * ckk..].as_ptr(),
                    ckk as isize,
                    1,
                    kern.as_ptr(),
                    1,
                    ckk as isize,
                    S::zero(),
                    out[bi * oc * plane..].as_mut_ptr(),
                    1,
                    plane as isize,
                );
            }
        }
        let bias = self.values[b.0].data();
        for bi in 0..bn {
            for o in 0..oc {
                let base = (bi * oc + o) * plane;
                for v in &mut out[base..base + plane] {
                    *v += bias[o];
                }
            }
        }
        let req = self.requires[x.0] || self.requires[k.0] || self.requires[b.0];
        let saved = if self.requires[k.0] { Some(cols) } else { None };
        Ok(self.push(
            Tensor::from_raw(vec![bn, oc, ho, wo], out),
            req,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                b: b.0,
                stride,
                cols: saved,
            },
        ))
    }

    /// Train-mode batch normalization over `[b,f]` (per feature) or
    /// `[b,c,h,w]` (per channel). Returns the output node plus the batch
    /// mean and biased variance per channel for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(ValueId, Vec<S>, Vec<S>)> {
        let (outer, ch, inner) = bn_layout(self.values[x.0].shape())?;
        if outer < 2 {
            return Err(Error::BatchSize {
                op: "batchnorm",
                got: outer,
                min: 2,
            });
        }
        self.check_bn_params(gamma, beta, ch)?;
        let n = S::from_usize(outer * inner);
        let eps = S::from_f64(BN_EPS);
        let src = self.values[x.0].data();

        let mut mean = vec![S::zero(); ch];
        let mut var = vec![S::zero(); ch];
        for c in 0..ch {
            let mut acc = S::zero();
            for o in 0..outer {
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    acc += src[base + i];
                }
            }
            mean[c] = acc / n;
        }
        for c in 0..ch {
            let mut acc = S::zero();
            for o in 0..outer {
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    let d = src[base + i] - mean[c];
                    acc += d * d;
                }
            }
            var[c] = acc / n;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

        let g = self.values[gamma.0].data().to_vec();
        let be = self.values[beta.0].data().to_vec();
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    let xh = (src[base + i] - mean[c]) * inv_std[c];
                    xhat[base + i] = xh;
                    out[base + i] = g[c] * xh + be[c];
                }
            }
        }
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        let (xh_saved, istd_saved) = if req {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let id = self.push(
            Tensor::from_raw(self.values[x.0].shape().to_vec(), out),
            req,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: xh_saved,
                inv_std: istd_saved,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch normalization using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[S],
        running_var: &[S],
    ) -> Result<ValueId> {
        let (outer, ch, inner) = bn_layout(self.values[x.0].shape())?;
        self.check_bn_params(gamma, beta, ch)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![ch, ch],
            });
        }
        let eps = S::from_f64(BN_EPS);
        let istd: Vec<S> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.values[gamma.0].data().to_vec();
        let be = self.values[beta.0].data().to_vec();
        let src = self.values[x.0].data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    out[base + i] = g[c] * (src[base + i] - running_mean[c]) * istd[c] + be[c];
                }
            }
        }
        let req = self.requires[x.0] || self.requires[gamma.0] || self.requires[beta.0];
        Ok(self.push(
            Tensor::from_raw(self.values[x.0].shape().to_vec(), out),
            req,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                istd,
                rmean: running_mean.to_vec(),
            },
        ))
    }

    /// Mode-dispatching batchnorm: train mode normalizes by batch
    /// statistics and folds them into `running`; eval mode reads
    /// `running` without touching it.
    pub fn batchnorm_forward(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mode: Mode,
        running: &mut RunningStats<S>,
    ) -> Result<ValueId> {
        match mode {
            Mode::Train => {
                let (id, mean, var) = self.batchnorm_train(x, gamma, beta)?;
                running.update(&mean, &var);
                Ok(id)
            }
            Mode::Eval => self.batchnorm_eval(x, gamma, beta, &running.mean, &running.var),
        }
    }

    fn check_bn_params(&self, gamma: ValueId, beta: ValueId, ch: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.values[p.0].shape() != [ch] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    lhs: self.values[p.0].shape().to_vec(),
                    rhs: vec![ch],
                });
            }
        }
        Ok(())
    }

    /// Gather rows of an embedding table `[V, e]`; backward scatters into
    /// touched rows only.
    pub fn embedding_lookup(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (v, e) = self.shape2(table, "embedding_lookup")?;
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
        }
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let req = self.requires[table.0];
        Ok(self.push(
            Tensor::from_raw(vec![ids.len(), e], data),
            req,
            Op::EmbeddingRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// All ordered object pairs. `objects [b,n,m]` (optionally with a
    /// per-sample question `[b,qd]`) becomes `[b·n², 2m+qd]`; within a
    /// sample, rows run i-major over (i, j) including i = j, each row
    /// `concat(o_i, o_j[, q])`.
    pub fn pair_concat(&mut self, objects: ValueId, q: Option<ValueId>) -> Result<ValueId> {
        let os = self.values[objects.0].shape().to_vec();
        if os.len() != 3 {
            return Err(Error::Dimension {
                op: "pair_concat",
                lhs: os,
                rhs: vec![0, 0, 0],
            });
        }
        let (b, n, m) = (os[0], os[1], os[2]);
        let qd = self.pair_question_width(q, b)?;
        let width = 2 * m + qd;
        let obj = self.values[objects.0].data();
        let mut data = Vec::with_capacity(b * n * n * width);
        for s in 0..b {
            let qrow: &[S] = match q {
                Some(qid) => {
                    let qd_all = self.values[qid.0].data();
                    &qd_all[s * qd..(s + 1) * qd]
                }
                None => &[],
            };
            for i in 0..n {
                let oi = &obj[(s * n + i) * m..(s * n + i + 1) * m];
                for j in 0..n {
                    let oj = &obj[(s * n + j) * m..(s * n + j + 1) * m];
                    data.extend_from_slice(oi);
                    data.extend_from_slice(oj);
                    data.extend_from_slice(qrow);
                }
            }
        }
        let req =
            self.requires[objects.0] || q.map(|qid| self.requires[qid.0]).unwrap_or(false);
        Ok(self.push(
            Tensor::from_raw(vec![b * n * n, width], data),
            req,
            Op::PairConcat {
                objects: objects.0,
                q: q.map(|v| v.0),
            },
        ))
    }

    /// Like [`Tape::pair_concat`] but only the listed (i, j) pairs, in
    /// list order, yielding `[b·len(pairs), 2m+qd]`.
    pub fn pair_concat_masked(
        &mut self,
        objects: ValueId,
        q: Option<ValueId>,
        pairs: &[(usize, usize)],
    ) -> Result<ValueId> {
        let os = self.values[objects.0].shape().to_vec();
        if os.len() != 3 {
            return Err(Error::Dimension {
                op: "pair_concat",
                lhs: os,
                rhs: vec![0, 0, 0],
            });
        }
        let (b, n, m) = (os[0], os[1], os[2]);
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::Mask { i, j, n });
            }
        }
        let qd = self.pair_question_width(q, b)?;
        let width = 2 * m + qd;
        let obj = self.values[objects.0].data();
        let mut data = Vec::with_capacity(b * pairs.len() * width);
        for s in 0..b {
            let qrow: &[S] = match q {
                Some(qid) => {
                    let qd_all = self.values[qid.0].data();
                    &qd_all[s * qd..(s + 1) * qd]
                }
                None => &[],
            };
            for &(i, j) in pairs {
                data.extend_from_slice(&obj[(s * n + i) * m..(s * n + i + 1) * m]);
                data.extend_from_slice(&obj[(s * n + j) * m..(s * n + j + 1) * m]);
                data.extend_from_slice(qrow);
            }
        }
        let req =
            self.requires[objects.0] || q.map(|qid| self.requires[qid.0]).unwrap_or(false);
        Ok(self.push(
            Tensor::from_raw(vec![b * pairs.len(), width], data),
            req,
            Op::PairConcatMasked {
                objects: objects.0,
                q: q.map(|v| v.0),
                pairs: pairs.to_vec(),
            },
        ))
    }

    fn pair_question_width(&self, q: Option<ValueId>, b: usize) -> Result<usize> {
        match q {
            None => Ok(0),
            Some(qid) => {
                let (qb, qd) = self.shape2(qid, "pair_concat")?;
                if qb != b {
                    return Err(Error::Dimension {
                        op: "pair_concat",
                        lhs: vec![qb, qd],
                        rhs: vec![b, qd],
                    });
                }
                Ok(qd)
            }
        }
    }

    /// Sum consecutive groups of `group` rows: `[R, w] → [R/group, w]`.
    /// With `group = n²` this collapses per-pair relation vectors into
    /// per-sample aggregates.
    pub fn block_sum_rows(&mut self, x: ValueId, group: usize) -> Result<ValueId> {
        let (r, w) = self.shape2(x, "block_sum_rows")?;
        if group == 0 || r % group != 0 {
            return Err(Error::Dimension {
                op: "block_sum_rows",
                lhs: vec![r, w],
                rhs: vec![group],
            });
        }
        let out_rows = r / group;
        let src = self.values[x.0].data();
        let mut data = vec![S::zero(); out_rows * w];
        for orow in 0..out_rows {
            let dst = &mut data[orow * w..(orow + 1) * w];
            for t in 0..group {
                let s0 = (orow * group + t) * w;
                for (d, &v) in dst.iter_mut().zip(&src[s0..s0 + w]) {
                    *d += v;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::from_raw(vec![out_rows, w], data),
            req,
            Op::BlockSumRows { x: x.0, group },
        ))
    }

    /// Convert feature maps `[b,k,d,d]` into per-sample object sets
    /// `[b, d², k+2]`: object r·d+c is the cell's channel vector plus the
    /// normalized coordinates (2r/(d−1)−1, 2c/(d−1)−1), or (0,0) when
    /// d = 1.
    pub fn cells_to_objects(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Dimension {
                op: "cells_to_objects",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, k, d) = (s[0], s[1], s[2]);
        let coord = |idx: usize| -> S {
            if d == 1 {
                S::zero()
            } else {
                S::from_f64(2.0 * idx as f64 / (d as f64 - 1.0) - 1.0)
            }
        };
        let src = self.values[x.0].data();
        let plane = d * d;
        let m = k + 2;
        let mut data = vec![S::zero(); b * plane * m];
        for bi in 0..b {
            for r in 0..d {
                for c in 0..d {
                    let dst = (bi * plane + r * d + c) * m;
                    for ch in 0..k {
                        data[dst + ch] = src[((bi * k + ch) * d + r) * d + c];
                    }
                    data[dst + k] = coord(r);
                    data[dst + k + 1] = coord(c);
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(
            Tensor::from_raw(vec![b, plane, m], data),
            req,
            Op::CellsToObjects { x: x.0 },
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    /// Stabilized by row-max subtraction; a non-finite loss is an error.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (b, c) = self.shape2(logits, "softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![b, c],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= c {
                return Err(Error::Class {
                    target: t,
                    classes: c,
                });
            }
        }
        let src = self.values[logits.0].data();
        let mut probs = vec![S::zero(); b * c];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(row[0], S::max);
            let mut z = S::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            loss -= (row[targets[r]] - mx - z.ln()) / S::from_usize(b);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy loss".into()));
        }
        let req = self.requires[logits.0];
        let probs_saved = if req { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::from_raw(vec![1], vec![loss]),
            req,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs: probs_saved,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of elementwise sigmoid(logits) against
    /// targets in [0,1], computed in the overflow-safe softplus form.
    pub fn bce_mean(&mut self, logits: ValueId, targets: &Tensor<S>) -> Result<ValueId> {
        if self.values[logits.0].shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "bce_mean",
                lhs: self.values[logits.0].shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let src = self.values[logits.0].data();
        let n = S::from_usize(src.len().max(1));
        let mut probs = vec![S::zero(); src.len()];
        let mut loss = S::zero();
        for ((&z, &t), p) in src.iter().zip(targets.data()).zip(&mut probs) {
            *p = sigmoid_scalar(z);
            let softplus = (-z.abs()).exp().ln_1p();
            loss += (z.max(S::zero()) - z * t + softplus) / n;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("bce_mean loss".into()));
        }
        let req = self.requires[logits.0];
        let probs_saved = if req { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::from_raw(vec![1], vec![loss]),
            req,
            Op::BceMean {
                logits: logits.0,
                probs: probs_saved,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// One LSTM cell step. Gate blocks in `wx`/`wh`/`b` are ordered
    /// input, forget, candidate, output; returns (h_t, c_t).
    pub fn lstm_step(
        &mut self,
        x: ValueId,
        h_prev: ValueId,
        c_prev: ValueId,
        w: &LstmWeights,
    ) -> Result<(ValueId, ValueId)> {
        let (b, _) = self.shape2(x, "lstm_step")?;
        let (hb, hid) = self.shape2(h_prev, "lstm_step")?;
        let (wh_in, wh_out) = self.shape2(w.wh, "lstm_step")?;
        if hb != b || wh_in != hid || wh_out != 4 * hid || self.values[c_prev.0].shape() != [b, hid]
        {
            return Err(Error::Dimension {
                op: "lstm_step",
                lhs: vec![hb, hid],
                rhs: vec![wh_in, wh_out],
            });
        }
        let zx = self.affine(x, w.wx, w.b)?;
        let zh = self.matmul(h_prev, w.wh)?;
        let z = self.add(zx, zh)?;
        let zi = self.slice_cols(z, 0, hid)?;
        let zf = self.slice_cols(z, hid, 2 * hid)?;
        let zg = self.slice_cols(z, 2 * hid, 3 * hid)?;
        let zo = self.slice_cols(z, 3 * hid, 4 * hid)?;
        let gi = self.sigmoid(zi);
        let gf = self.sigmoid(zf);
        let gg = self.tanh(zg);
        let go = self.sigmoid(zo);
        let keep = self.mul(gf, c_prev)?;
        let write = self.mul(gi, gg)?;
        let c_t = self.add(keep, write)?;
        let c_act = self.tanh(c_t);
        let h_t = self.mul(go, c_act)?;
        Ok((h_t, c_t))
    }
}

fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        (S::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// C = A·B for row-major dense matrices (`a [m,k]`, `b [k,n]`).
fn matmul_into<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    if m * n * k == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            S::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::Dimension {
            op: "batchnorm",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Patch matrix for valid cross-correlation: row (bi·h'w' + r·w' + c)
/// holds the c·kh·kw input window that produces output cell (r, c).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let ckk = c * kh * kw;
    let mut cols = vec![S::zero(); b * ho * wo * ckk];
    for bi in 0..b {
        for r in 0..ho {
            for cc in 0..wo {
                let row = ((bi * ho + r) * wo + cc) * ckk;
                for ci in 0..c {
                    for u in 0..kh {
                        let src = ((bi * c + ci) * h + r * stride + u) * w + cc * stride;
                        let dst = row + (ci * kh + u) * kw;
                        cols[dst..dst + kw].copy_from_slice(&x[src..src + kw]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix gradients back into
/// input-image layout.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    dx: &mut [S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let ckk = c * kh * kw;
    for bi in 0..b {
        for r in 0..ho {
            for cc in 0..wo {
                let row = ((bi * ho + r) * wo + cc) * ckk;
                for ci in 0..c {
                    for u in 0..kh {
                        let dst = ((bi * c + ci) * h + r * stride + u) * w + cc * stride;
                        let src = row + (ci * kh + u) * kw;
                        for v in 0..kw {
                            dx[dst + v] += cols[src + v];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// backward rules
// ---------------------------------------------------------------------------

/// Apply one node's backward rule, accumulating into input gradients.
/// `dy` is the incoming gradient for node `node`; `values[node]` is still
/// alive when this runs (released by the caller afterwards).
pub(crate) fn backward_op<S: Scalar>(
    op: Op<S>,
    dy: &[S],
    node: usize,
    values: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    requires: &[bool],
) -> Result<()> {
    match op {
        Op::Leaf | Op::Consumed => {}
        Op::Affine { x, w, b } => {
            backward_matmul(dy, x, w, values, grads, requires);
            if let Some(db) = grad_slot(grads, requires, values, b) {
                let o = values[b].numel();
                for row in dy.chunks_exact(o) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
        Op::Matmul { x, w } => backward_matmul(dy, x, w, values, grads, requires),
        Op::Relu { x } => {
            let y = values[node].data();
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for ((d, &g), &yv) in dx.iter_mut().zip(dy).zip(y) {
                    if yv > S::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let y = values[node].data();
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for ((d, &g), &yv) in dx.iter_mut().zip(dy).zip(y) {
                    *d += g * yv * (S::one() - yv);
                }
            }
        }
        Op::Tanh { x } => {
            let y = values[node].data();
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for ((d, &g), &yv) in dx.iter_mut().zip(dy).zip(y) {
                    *d += g * (S::one() - yv * yv);
                }
            }
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                if let Some(dx) = grad_slot(grads, requires, values, id) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let vb = values[b].data();
            if let Some(da) = grad_slot(grads, requires, values, a) {
                for ((d, &g), &v) in da.iter_mut().zip(dy).zip(vb) {
                    *d += g * v;
                }
            }
            let va = values[a].data();
            if let Some(db) = grad_slot(grads, requires, values, b) {
                for ((d, &g), &v) in db.iter_mut().zip(dy).zip(va) {
                    *d += g * v;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += g * c;
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(&mask) {
                    *d += g * m;
                }
            }
        }
        Op::SliceCols { x, from } => {
            let (r, w) = (values[x].shape()[0], values[x].shape()[1]);
            let wid = dy.len() / r.max(1);
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for row in 0..r {
                    for col in 0..wid {
                        dx[row * w + from + col] += dy[row * wid + col];
                    }
                }
            }
        }
        Op::ConcatCols { xs } => {
            let widths: Vec<usize> = xs.iter().map(|&x| values[x].shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let rows = if total == 0 { 0 } else { dy.len() / total };
            let mut off = 0;
            for (&x, &wi) in xs.iter().zip(&widths) {
                if let Some(dx) = grad_slot(grads, requires, values, x) {
                    for row in 0..rows {
                        for col in 0..wi {
                            dx[row * wi + col] += dy[row * total + off + col];
                        }
                    }
                }
                off += wi;
            }
        }
        Op::ConcatRows { xs } => {
            let mut off = 0;
            for &x in &xs {
                let numel = values[x].numel();
                if let Some(dx) = grad_slot(grads, requires, values, x) {
                    for (d, &g) in dx.iter_mut().zip(&dy[off..off + numel]) {
                        *d += g;
                    }
                }
                off += numel;
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += g;
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for d in dx.iter_mut() {
                    *d += dy[0];
                }
            }
        }
        Op::Pad2d { x, pad } => {
            let s = values[x].shape().to_vec();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let wp = w + 2 * pad;
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                let hp_wp = (h + 2 * pad) * wp;
                for bc in 0..b * c {
                    for i in 0..h {
                        let src = bc * hp_wp + (i + pad) * wp + pad;
                        let dst = (bc * h + i) * w;
                        for j in 0..w {
                            dx[dst + j] += dy[src + j];
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            k,
            b,
            stride,
            cols,
        } => {
            let xs = values[x].shape().to_vec();
            let ks = values[k].shape().to_vec();
            let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oc, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
            let os = values[node].shape().to_vec();
            let (ho, wo) = (os[2], os[3]);
            let plane = ho * wo;
            let ckk = c * kh * kw;

            if requires[x] {
                // dcols = dout · K, per batch; then scatter back to image.
                let kern = values[k].data();
                let mut dcols = vec![S::zero(); bn * plane * ckk];
                for bi in 0..bn {
                    unsafe {
                        S::gemm(
                            plane,
                            oc,
                            ckk,
                            S::one(),
                            dy[bi * oc * plane..].as_ptr(),
                            1,
                            plane as isize,
                            kern.as_ptr(),
                            ckk as isize,
                            1,
                            S::zero(),
                            dcols[bi * plane * ckk..].as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = grad_slot(grads, requires, values, x) {
                    col2im(&dcols, dx, bn, c, h, w, kh, kw, stride, ho, wo);
                }
            }
            if requires[k] {
                let cols = cols.expect("conv2d saved patch matrix for kernel gradient");
                if let Some(dk) = grad_slot(grads, requires, values, k) {
                    for bi in 0..bn {
                        // dK += doutᵀ · cols, per batch.
                        unsafe {
                            S::gemm(
                                oc,
                                plane,
                                ckk,
                                S::one(),
                                dy[bi * oc * plane..].as_ptr(),
                                plane as isize,
                                1,
                                cols[bi * plane * ckk..].as_ptr(),
                                ckk as isize,
                                1,
                                S::one(),
                                dk.as_mut_ptr(),
                                ckk as isize,
                                1,
                            );
                        }
                    }
                }
            }
            if let Some(db) = grad_slot(grads, requires, values, b) {
                for bi in 0..bn {
                    for o in 0..oc {
                        let base = (bi * oc + o) * plane;
                        let mut acc = S::zero();
                        for &g in &dy[base..base + plane] {
                            acc += g;
                        }
                        db[o] += acc;
                    }
                }
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (outer, ch, inner) = bn_layout(values[x].shape())?;
            let n = S::from_usize(outer * inner);
            let g = values[gamma].data();

            let mut sum_dy = vec![S::zero(); ch];
            let mut sum_dy_xhat = vec![S::zero(); ch];
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    for i in 0..inner {
                        sum_dy[c] += dy[base + i];
                        sum_dy_xhat[c] += dy[base + i] * xhat[base + i];
                    }
                }
            }
            if let Some(dbeta) = grad_slot(grads, requires, values, beta) {
                for (d, &s) in dbeta.iter_mut().zip(&sum_dy) {
                    *d += s;
                }
            }
            if let Some(dgamma) = grad_slot(grads, requires, values, gamma) {
                for (d, &s) in dgamma.iter_mut().zip(&sum_dy_xhat) {
                    *d += s;
                }
            }
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let scale = g[c] * inv_std[c];
                        for i in 0..inner {
                            let term = dy[base + i]
                                - sum_dy[c] / n
                                - xhat[base + i] * sum_dy_xhat[c] / n;
                            dx[base + i] += scale * term;
                        }
                    }
                }
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            istd,
            rmean,
        } => {
            let (outer, ch, inner) = bn_layout(values[x].shape())?;
            let g = values[gamma].data();
            let xv = values[x].data();
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            dx[base + i] += dy[base + i] * g[c] * istd[c];
                        }
                    }
                }
            }
            if let Some(dgamma) = grad_slot(grads, requires, values, gamma) {
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            dgamma[c] += dy[base + i] * (xv[base + i] - rmean[c]) * istd[c];
                        }
                    }
                }
            }
            if let Some(dbeta) = grad_slot(grads, requires, values, beta) {
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            dbeta[c] += dy[base + i];
                        }
                    }
                }
            }
        }
        Op::EmbeddingRows { table, ids } => {
            let e = values[table].shape()[1];
            if let Some(dt) = grad_slot(grads, requires, values, table) {
                for (row, &id) in ids.iter().enumerate() {
                    for col in 0..e {
                        dt[id * e + col] += dy[row * e + col];
                    }
                }
            }
        }
        Op::PairConcat { objects, q } => {
            let os = values[objects].shape().to_vec();
            let (b, n, m) = (os[0], os[1], os[2]);
            let qd = q.map(|qid| values[qid].shape()[1]).unwrap_or(0);
            let width = 2 * m + qd;
            if let Some(dobj) = grad_slot(grads, requires, values, objects) {
                for s in 0..b {
                    for i in 0..n {
                        for j in 0..n {
                            let row = ((s * n + i) * n + j) * width;
                            let di = (s * n + i) * m;
                            let dj = (s * n + j) * m;
                            for t in 0..m {
                                dobj[di + t] += dy[row + t];
                                dobj[dj + t] += dy[row + m + t];
                            }
                        }
                    }
                }
            }
            if let Some(qid) = q {
                if let Some(dq) = grad_slot(grads, requires, values, qid) {
                    for s in 0..b {
                        for pair in 0..n * n {
                            let row = (s * n * n + pair) * width + 2 * m;
                            for t in 0..qd {
                                dq[s * qd + t] += dy[row + t];
                            }
                        }
                    }
                }
            }
        }
        Op::PairConcatMasked { objects, q, pairs } => {
            let os = values[objects].shape().to_vec();
            let (b, n, m) = (os[0], os[1], os[2]);
            let qd = q.map(|qid| values[qid].shape()[1]).unwrap_or(0);
            let width = 2 * m + qd;
            let np = pairs.len();
            if let Some(dobj) = grad_slot(grads, requires, values, objects) {
                for s in 0..b {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let row = (s * np + p) * width;
                        let di = (s * n + i) * m;
                        let dj = (s * n + j) * m;
                        for t in 0..m {
                            dobj[di + t] += dy[row + t];
                            dobj[dj + t] += dy[row + m + t];
                        }
                    }
                }
            }
            if let Some(qid) = q {
                if let Some(dq) = grad_slot(grads, requires, values, qid) {
                    for s in 0..b {
                        for p in 0..np {
                            let row = (s * np + p) * width + 2 * m;
                            for t in 0..qd {
                                dq[s * qd + t] += dy[row + t];
                            }
                        }
                    }
                }
            }
        }
        Op::BlockSumRows { x, group } => {
            let w = values[x].shape()[1];
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                let out_rows = dy.len() / w.max(1);
                for orow in 0..out_rows {
                    let src = &dy[orow * w..(orow + 1) * w];
                    for t in 0..group {
                        let d0 = (orow * group + t) * w;
                        for (col, &g) in src.iter().enumerate() {
                            dx[d0 + col] += g;
                        }
                    }
                }
            }
        }
        Op::CellsToObjects { x } => {
            let s = values[x].shape().to_vec();
            let (b, k, d) = (s[0], s[1], s[2]);
            let plane = d * d;
            let m = k + 2;
            if let Some(dx) = grad_slot(grads, requires, values, x) {
                for bi in 0..b {
                    for r in 0..d {
                        for c in 0..d {
                            let row = (bi * plane + r * d + c) * m;
                            for ch in 0..k {
                                dx[((bi * k + ch) * d + r) * d + c] += dy[row + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            targets,
        } => {
            let c = values[logits].shape()[1];
            let b = targets.len();
            let scale = dy[0] / S::from_usize(b);
            if let Some(dl) = grad_slot(grads, requires, values, logits) {
                for r in 0..b {
                    for col in 0..c {
                        let y = if col == targets[r] { S::one() } else { S::zero() };
                        dl[r * c + col] += scale * (probs[r * c + col] - y);
                    }
                }
            }
        }
        Op::BceMean {
            logits,
            probs,
            targets,
        } => {
            let n = S::from_usize(probs.len().max(1));
            if let Some(dl) = grad_slot(grads, requires, values, logits) {
                for ((d, &p), &t) in dl.iter_mut().zip(&probs).zip(&targets) {
                    *d += dy[0] * (p - t) / n;
                }
            }
        }
    }
    Ok(())
}

/// Shared dX/dW rule for affine and matmul.
fn backward_matmul<S: Scalar>(
    dy: &[S],
    x: usize,
    w: usize,
    values: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    requires: &[bool],
) {
    let (r, i) = (values[x].shape()[0], values[x].shape()[1]);
    let o = values[w].shape()[1];
    if r * i * o == 0 {
        return;
    }
    if requires[x] {
        let wv = values[w].data();
        if let Some(dx) = grad_slot(grads, requires, values, x) {
            // dX += dY · Wᵀ
            unsafe {
                S::gemm(
                    r,
                    o,
                    i,
                    S::one(),
                    dy.as_ptr(),
                    o as isize,
                    1,
                    wv.as_ptr(),
                    1,
                    o as isize,
                    S::one(),
                    dx.as_mut_ptr(),
                    i as isize,
                    1,
                );
            }
        }
    }
    if requires[w] {
        let xv = values[x].data();
        if let Some(dw) = grad_slot(grads, requires, values, w) {
            // dW += Xᵀ · dY
            unsafe {
                S::gemm(
                    i,
                    r,
                    o,
                    S::one(),
                    xv.as_ptr(),
                    1,
                    i as isize,
                    dy.as_ptr(),
                    o as isize,
                    1,
                    S::one(),
                    dw.as_mut_ptr(),
                    o as isize,
                    1,
                );
            }
        }
    }
}
