//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass and
//! replays the record backward to accumulate gradients. The op set is
//! exactly what the backbones here need: affine layers, 1-D convolution,
//! rectifier/sigmoid, per-row code injection, row gather/scatter, the
//! binary-decomposition loss, and a couple of scalar reductions.
//!
//! All accumulation is fixed left-to-right so forward and backward results
//! are bitwise deterministic for identical inputs.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    /// out = x·W + b, x: B×D, W: D×C, b: C
    Affine { x: VarId, w: VarId, b: VarId, out: VarId },
    /// Cross-correlation, stride 1, no padding.
    /// x: B×Cin×L, k: Cout×Cin×kw, b: Cout → out: B×Cout×(L-kw+1)
    Conv1d { x: VarId, k: VarId, b: VarId, out: VarId },
    Sigmoid { x: VarId, out: VarId },
    Relu { x: VarId, out: VarId },
    /// Elementwise sum of two same-shape tensors.
    Add { a: VarId, b: VarId, out: VarId },
    /// out[i,c,l] = x[i,c,l] + v[i,c]
    AddChannel { x: VarId, v: VarId, out: VarId },
    /// out = codes·matᵀ, codes: B×M, mat: C×M → B×C
    CodeInject { codes: VarId, mat: VarId, out: VarId },
    /// out[i,:] = src[idx[i],:]
    GatherRows { src: VarId, idx: Vec<usize>, out: VarId },
    /// out[i,:] = x[i, idx[i]*width .. (idx[i]+1)*width]
    SelectHead { x: VarId, idx: Vec<usize>, width: usize, out: VarId },
    /// Σ over entries of the stable logit-space binary cross-entropy
    /// against constant targets.
    BceLogitsSum { logits: VarId, targets: Tensor, out: VarId },
    /// Σ xᵢ²
    SumSquares { x: VarId, out: VarId },
    Scale { x: VarId, c: f64, out: VarId },
    Reshape { x: VarId, out: VarId },
}

/// Records a forward computation and produces gradients on demand.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    grads: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Numerically stable logistic function; exact 0/1 in deep saturation.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable binary cross-entropy directly from the logit:
/// max(x,0) − t·x + ln(1 + e^{−|x|}).
pub fn bce_logit_scalar(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - target * logit + (-logit.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a leaf tensor (parameter or constant input).
    pub fn input(&mut self, t: Tensor) -> VarId {
        let id = VarId(self.vals.len());
        self.vals.push(t);
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` target w.r.t. `id`.
    pub fn grad(&self, id: VarId) -> &Tensor {
        &self.grads[id.0]
    }

    fn push(&mut self, value: Tensor, op: impl FnOnce(VarId) -> Op) -> VarId {
        let out = VarId(self.vals.len());
        self.vals.push(value);
        self.ops.push(op(out));
        out
    }

    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (xs, ws, bs) = (
            self.vals[x.0].shape(),
            self.vals[w.0].shape(),
            self.vals[b.0].shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "affine",
                format!("x {:?} · W {:?} + b {:?}", xs, ws, bs),
            ));
        }
        let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; rows * cols];
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        for i in 0..rows {
            let xrow = &xd[i * inner..(i + 1) * inner];
            let orow = &mut out[i * cols..(i + 1) * cols];
            orow.copy_from_slice(bd);
            for (d, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[d * cols..(d + 1) * cols];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, |out| Op::Affine {
            x,
            w,
            b,
            out,
        }))
    }

    pub fn conv1d(&mut self, x: VarId, k: VarId, b: VarId) -> Result<VarId> {
        let (xs, ks, bs) = (
            self.vals[x.0].shape(),
            self.vals[k.0].shape(),
            self.vals[b.0].shape(),
        );
        if xs.len() != 3 || ks.len() != 3 || bs.len() != 1 || xs[1] != ks[1] || ks[0] != bs[0] {
            return Err(Error::shape(
                "conv1d",
                format!("x {:?} * k {:?} + b {:?}", xs, ks, bs),
            ));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, kw) = (ks[0], ks[2]);
        if kw > len {
            return Err(Error::shape(
                "conv1d",
                format!("kernel width {} exceeds input length {}", kw, len),
            ));
        }
        let lout = len - kw + 1;
        let mut out = vec![0.0; batch * cout * lout];
        let xd = self.vals[x.0].data();
        let kd = self.vals[k.0].data();
        let bd = self.vals[b.0].data();
        for i in 0..batch {
            for o in 0..cout {
                for l in 0..lout {
                    let mut acc = bd[o];
                    for c in 0..cin {
                        let xoff = (i * cin + c) * len + l;
                        let koff = (o * cin + c) * kw;
                        for t in 0..kw {
                            acc += xd[xoff + t] * kd[koff + t];
                        }
                    }
                    out[(i * cout + o) * lout + l] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, cout, lout], out)?,
            |out| Op::Conv1d { x, k, b, out },
        ))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = Tensor::new(
            self.vals[x.0].shape().to_vec(),
            self.vals[x.0].data().iter().map(|&v| sigmoid_scalar(v)).collect(),
        )
        .expect("same shape");
        self.push(v, |out| Op::Sigmoid { x, out })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = Tensor::new(
            self.vals[x.0].shape().to_vec(),
            self.vals[x.0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        )
        .expect("same shape");
        self.push(v, |out| Op::Relu { x, out })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::shape(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.vals[a.0].shape(),
                    self.vals[b.0].shape()
                ),
            ));
        }
        let v = Tensor::new(
            self.vals[a.0].shape().to_vec(),
            self.vals[a.0]
                .data()
                .iter()
                .zip(self.vals[b.0].data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        Ok(self.push(v, |out| Op::Add { a, b, out }))
    }

    pub fn add_channel(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (xs, vs) = (self.vals[x.0].shape(), self.vals[v.0].shape());
        if xs.len() != 3 || vs.len() != 2 || xs[0] != vs[0] || xs[1] != vs[1] {
            return Err(Error::shape(
                "add_channel",
                format!("x {:?} + v {:?}", xs, vs),
            ));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        let mut out = self.vals[x.0].data().to_vec();
        let vd = self.vals[v.0].data();
        for i in 0..batch {
            for c in 0..ch {
                let add = vd[i * ch + c];
                let off = (i * ch + c) * len;
                for o in &mut out[off..off + len] {
                    *o += add;
                }
            }
        }
        Ok(self.push(
            Tensor::new(xs.to_vec(), out)?,
            |out| Op::AddChannel { x, v, out },
        ))
    }

    pub fn code_inject(&mut self, codes: VarId, mat: VarId) -> Result<VarId> {
        let (cs, ms) = (self.vals[codes.0].shape(), self.vals[mat.0].shape());
        if cs.len() != 2 || ms.len() != 2 || cs[1] != ms[1] {
            return Err(Error::shape(
                "code_inject",
                format!("codes {:?} · matᵀ {:?}", cs, ms),
            ));
        }
        let (rows, m, ch) = (cs[0], cs[1], ms[0]);
        let mut out = vec![0.0; rows * ch];
        let cd = self.vals[codes.0].data();
        let md = self.vals[mat.0].data();
        for i in 0..rows {
            for c in 0..ch {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += cd[i * m + j] * md[c * m + j];
                }
                out[i * ch + c] = acc;
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, ch], out)?,
            |out| Op::CodeInject { codes, mat, out },
        ))
    }

    pub fn gather_rows(&mut self, src: VarId, idx: &[usize]) -> Result<VarId> {
        let ss = self.vals[src.0].shape();
        if ss.len() != 2 {
            return Err(Error::shape("gather_rows", format!("src {:?}", ss)));
        }
        let (rows, cols) = (ss[0], ss[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: row index {} out of {}",
                bad, rows
            )));
        }
        let sd = self.vals[src.0].data();
        let mut out = vec![0.0; idx.len() * cols];
        for (i, &r) in idx.iter().enumerate() {
            out[i * cols..(i + 1) * cols].copy_from_slice(&sd[r * cols..(r + 1) * cols]);
        }
        let idx = idx.to_vec();
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            |out| Op::GatherRows { src, idx, out },
        ))
    }

    pub fn select_head(&mut self, x: VarId, idx: &[usize], width: usize) -> Result<VarId> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 2 || xs[0] != idx.len() || width == 0 || xs[1] % width != 0 {
            return Err(Error::shape(
                "select_head",
                format!("x {:?}, {} rows selected, width {}", xs, idx.len(), width),
            ));
        }
        let heads = xs[1] / width;
        if let Some(&bad) = idx.iter().find(|&&h| h >= heads) {
            return Err(Error::InvalidArgument(format!(
                "select_head: head {} out of {}",
                bad, heads
            )));
        }
        let xd = self.vals[x.0].data();
        let cols = xs[1];
        let mut out = vec![0.0; idx.len() * width];
        for (i, &h) in idx.iter().enumerate() {
            let off = i * cols + h * width;
            out[i * width..(i + 1) * width].copy_from_slice(&xd[off..off + width]);
        }
        let idx = idx.to_vec();
        Ok(self.push(
            Tensor::new(vec![idx.len(), width], out)?,
            |out| Op::SelectHead { x, idx, width, out },
        ))
    }

    pub fn bce_logits_sum(&mut self, logits: VarId, targets: Tensor) -> Result<VarId> {
        if self.vals[logits.0].shape() != targets.shape() {
            return Err(Error::shape(
                "bce_logits_sum",
                format!(
                    "logits {:?} vs targets {:?}",
                    self.vals[logits.0].shape(),
                    targets.shape()
                ),
            ));
        }
        let mut acc = 0.0;
        for (&l, &t) in self.vals[logits.0].data().iter().zip(targets.data()) {
            acc += bce_logit_scalar(l, t);
        }
        Ok(self.push(Tensor::scalar(acc), |out| Op::BceLogitsSum {
            logits,
            targets,
            out,
        }))
    }

    pub fn sum_squares(&mut self, x: VarId) -> VarId {
        let mut acc = 0.0;
        for &v in self.vals[x.0].data() {
            acc += v * v;
        }
        self.push(Tensor::scalar(acc), |out| Op::SumSquares { x, out })
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let v = Tensor::new(
            self.vals[x.0].shape().to_vec(),
            self.vals[x.0].data().iter().map(|&v| v * c).collect(),
        )
        .expect("same shape");
        self.push(v, |out| Op::Scale { x, c, out })
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let n: usize = shape.iter().product();
        if n != self.vals[x.0].len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.vals[x.0].shape(), shape),
            ));
        }
        let v = Tensor::new(shape, self.vals[x.0].data().to_vec())?;
        Ok(self.push(v, |out| Op::Reshape { x, out }))
    }

    /// Backpropagates from a one-element `target`, filling all gradients.
    pub fn backward(&mut self, target: VarId) -> Result<()> {
        if self.vals[target.0].len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.vals[target.0].shape()
            )));
        }
        self.grads = self
            .vals
            .iter()
            .map(|v| Tensor::zeros(v.shape().to_vec()))
            .collect();
        self.grads[target.0].data_mut()[0] = 1.0;

        for op in self.ops.iter().rev() {
            match op {
                Op::Affine { x, w, b, out } => {
                    let (rows, inner) = (self.vals[x.0].dim(0), self.vals[x.0].dim(1));
                    let cols = self.vals[w.0].dim(1);
                    let go = std::mem::take(&mut self.grads[out.0]);
                    let g = go.data();
                    {
                        let wd = self.vals[w.0].data();
                        let gx = self.grads[x.0].data_mut();
                        for i in 0..rows {
                            for d in 0..inner {
                                let mut acc = 0.0;
                                for c in 0..cols {
                                    acc += g[i * cols + c] * wd[d * cols + c];
                                }
                                gx[i * inner + d] += acc;
                            }
                        }
                    }
                    {
                        let xd = self.vals[x.0].data();
                        let gw = self.grads[w.0].data_mut();
                        for d in 0..inner {
                            for c in 0..cols {
                                let mut acc = 0.0;
                                for i in 0..rows {
                                    acc += xd[i * inner + d] * g[i * cols + c];
                                }
                                gw[d * cols + c] += acc;
                            }
                        }
                    }
                    {
                        let gb = self.grads[b.0].data_mut();
                        for i in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[i * cols + c];
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::Conv1d { x, k, b, out } => {
                    let xs = self.vals[x.0].shape().to_vec();
                    let ks = self.vals[k.0].shape().to_vec();
                    let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                    let (cout, kw) = (ks[0], ks[2]);
                    let lout = len - kw + 1;
                    let go = std::mem::take(&mut self.grads[out.0]);
                    let g = go.data();
                    {
                        let kd = self.vals[k.0].data();
                        let gx = self.grads[x.0].data_mut();
                        for i in 0..batch {
                            for o in 0..cout {
                                for l in 0..lout {
                                    let gv = g[(i * cout + o) * lout + l];
                                    for c in 0..cin {
                                        let xoff = (i * cin + c) * len + l;
                                        let koff = (o * cin + c) * kw;
                                        for t in 0..kw {
                                            gx[xoff + t] += gv * kd[koff + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let xd = self.vals[x.0].data();
                        let gk = self.grads[k.0].data_mut();
                        for i in 0..batch {
                            for o in 0..cout {
                                for l in 0..lout {
                                    let gv = g[(i * cout + o) * lout + l];
                                    for c in 0..cin {
                                        let xoff = (i * cin + c) * len + l;
                                        let koff = (o * cin + c) * kw;
                                        for t in 0..kw {
                                            gk[koff + t] += gv * xd[xoff + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = self.grads[b.0].data_mut();
                        for i in 0..batch {
                            for o in 0..cout {
                                for l in 0..lout {
                                    gb[o] += g[(i * cout + o) * lout + l];
                                }
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::Sigmoid { x, out } => {
                    let go = std::mem::take(&mut self.grads[out.0]);
                    {
                        let ov = self.vals[out.0].data();
                        let gx = self.grads[x.0].data_mut();
                        for i in 0..ov.len() {
                            gx[i] += go.data()[i] * ov[i] * (1.0 - ov[i]);
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::Relu { x, out } => {
                    let go = std::mem::take(&mut self.grads[out.0]);
                    {
                        let xv = self.vals[x.0].data();
                        let gx = self.grads[x.0].data_mut();
                        for i in 0..xv.len() {
                            if xv[i] > 0.0 {
                                gx[i] += go.data()[i];
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::Add { a, b, out } => {
                    let go = std::mem::take(&mut self.grads[out.0]);
                    for (g, &v) in self.grads[a.0].data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                    for (g, &v) in self.grads[b.0].data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                    self.grads[out.0] = go;
                }
                Op::AddChannel { x, v, out } => {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (batch, ch, len) = (xs[0], xs[1], xs[2]);
                    let go = std::mem::take(&mut self.grads[out.0]);
                    for (g, &gv) in self.grads[x.0].data_mut().iter_mut().zip(go.data()) {
                        *g += gv;
                    }
                    {
                        let gv = self.grads[v.0].data_mut();
                        for i in 0..batch {
                            for c in 0..ch {
                                let off = (i * ch + c) * len;
                                let mut acc = 0.0;
                                for l in 0..len {
                                    acc += go.data()[off + l];
                                }
                                gv[i * ch + c] += acc;
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::CodeInject { codes, mat, out } => {
                    let (rows, m) = (self.vals[codes.0].dim(0), self.vals[codes.0].dim(1));
                    let ch = self.vals[mat.0].dim(0);
                    let go = std::mem::take(&mut self.grads[out.0]);
                    let g = go.data();
                    {
                        let md = self.vals[mat.0].data();
                        let gc = self.grads[codes.0].data_mut();
                        for i in 0..rows {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for c in 0..ch {
                                    acc += g[i * ch + c] * md[c * m + j];
                                }
                                gc[i * m + j] += acc;
                            }
                        }
                    }
                    {
                        let cd = self.vals[codes.0].data();
                        let gm = self.grads[mat.0].data_mut();
                        for c in 0..ch {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for i in 0..rows {
                                    acc += g[i * ch + c] * cd[i * m + j];
                                }
                                gm[c * m + j] += acc;
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::GatherRows { src, idx, out } => {
                    let cols = self.vals[src.0].dim(1);
                    let go = std::mem::take(&mut self.grads[out.0]);
                    {
                        let gs = self.grads[src.0].data_mut();
                        for (i, &r) in idx.iter().enumerate() {
                            for c in 0..cols {
                                gs[r * cols + c] += go.data()[i * cols + c];
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::SelectHead { x, idx, width, out } => {
                    let cols = self.vals[x.0].dim(1);
                    let go = std::mem::take(&mut self.grads[out.0]);
                    {
                        let gx = self.grads[x.0].data_mut();
                        for (i, &h) in idx.iter().enumerate() {
                            let off = i * cols + h * width;
                            for j in 0..*width {
                                gx[off + j] += go.data()[i * width + j];
                            }
                        }
                    }
                    self.grads[out.0] = go;
                }
                Op::BceLogitsSum { logits, targets, out } => {
                    let g = self.grads[out.0].data()[0];
                    let lv = self.vals[logits.0].data().to_vec();
                    let gl = self.grads[logits.0].data_mut();
                    for (i, (&l, &t)) in lv.iter().zip(targets.data()).enumerate() {
                        gl[i] += g * (sigmoid_scalar(l) - t);
                    }
                }
                Op::SumSquares { x, out } => {
                    let g = self.grads[out.0].data()[0];
                    let xv = self.vals[x.0].data().to_vec();
                    let gx = self.grads[x.0].data_mut();
                    for (i, &v) in xv.iter().enumerate() {
                        gx[i] += g * 2.0 * v;
                    }
                }
                Op::Scale { x, c, out } => {
                    let go = std::mem::take(&mut self.grads[out.0]);
                    for (g, &v) in self.grads[x.0].data_mut().iter_mut().zip(go.data()) {
                        *g += c * v;
                    }
                    self.grads[out.0] = go;
                }
                Op::Reshape { x, out } => {
                    let go = std::mem::take(&mut self.grads[out.0]);
                    for (g, &v) in self.grads[x.0].data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                    self.grads[out.0] = go;
                }
            }
        }
        Ok(())
    }
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
}

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences over every entry of every parameter.
///
/// The relative error per entry is
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-12)`; the maximum over all
/// entries is returned. Non-finite values anywhere are reported with the
/// offending parameter coordinate.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: eps must be > 0".into()));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        if tape.value(out).len() != 1 {
            return Err(Error::InvalidArgument(
                "grad_check: function must be scalar-valued".into(),
            ));
        }
        Ok(tape.value(out).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: non-finite value probing parameter {} entry {}",
                    p, e
                )));
            }
            let cd = (plus - minus) / (2.0 * eps);
            let an = analytic[p].data()[e];
            if !an.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: non-finite analytic gradient at parameter {} entry {}",
                    p, e
                )));
            }
            let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (p, e);
            }
        }
    }
    Ok(GradCheck { max_rel_err, worst })
}
