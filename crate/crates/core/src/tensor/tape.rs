//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Forward ops evaluate eagerly and push a node recording their inputs. The
//! arena order is a topological order, so `backward` is a single reverse
//! sweep. A tape is built per step and dropped afterwards; parameters are
//! copied in from their [`ParamStore`] and gradients are routed back by id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{dim_err, HdtError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[..., tail] + y[tail]`, `y` broadcast over leading blocks.
    AddTrailing(Var, Var),
    /// `x[o, a, i] + b[a]` for a bias along one axis.
    AddAxis { x: Var, b: Var, axis_len: usize, inner: usize },
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxLast(Var),
    CausalMask(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, axis_lens: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    Conv1dTranspose { x: Var, w: Var, geom: ConvGeom },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(u64, ParamId, Var)>,
    frozen: Vec<u64>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::eval()
    }
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            frozen: Vec::new(),
            rng: None,
        }
    }

    /// Tape in training mode; dropout masks are drawn from a ChaCha8 stream
    /// seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::eval()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of `store` bound after this call are treated as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.push(store.id());
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !self.frozen.contains(&store.id());
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.bindings.push((store.id(), id, v));
        }
        v
    }

    /// Copy of `x` outside the gradient path (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds `y` to every trailing block of `x` whose shape equals `y`'s
    /// (bias vectors, positional tables).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return dim_err(format!("cannot broadcast {ys:?} onto {xs:?}"));
        }
        let block = self.value(y).numel();
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, b) in chunk.iter_mut().zip(&yv) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, Op::AddTrailing(x, y), rg))
    }

    /// Adds `b[shape[axis]]` along `axis` (e.g. a per-channel conv bias on
    /// `[B, C, L]` with `axis = 1`).
    pub fn add_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(b) != [xs[axis]] {
            return dim_err(format!(
                "bias {:?} along axis {axis} of {xs:?}",
                self.shape(b)
            ));
        }
        let axis_len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / inner) % axis_len];
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddAxis { x, b, axis_len, inner }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("bmm of {sa:?} and {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::matmul_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::Bmm { a, b, batch, m, k, n }, rg))
    }

    /// Applies a `[in×out]` weight to the last axis of `x`, then adds `bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != d_in {
            return dim_err(format!("linear: input {xs:?} with weight {ws:?}"));
        }
        let rows = xs.iter().product::<usize>() / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add_trailing(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for {shape:?}"));
        }
        let (out_shape, map) = kernels::permute_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.unary(x, v, Op::Permute { x, map }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    /// `log σ(x)`, evaluated stably for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(log_sigmoid);
        self.unary(x, v, Op::LogSigmoid(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.unary(x, v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(x, v, Op::Mean(x))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let n = *v.shape().last().unwrap();
        for row in v.data_mut().chunks_mut(n) {
            kernels::softmax_row(row);
        }
        self.unary(x, v, Op::SoftmaxLast(x))
    }

    /// Sets attention scores `[..., Lq, Lk]` of keys after each query to −∞.
    /// Queries are aligned with the last `Lq` keys.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err("causal mask needs at least 2 dims");
        }
        let (lq, lk) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if lq > lk {
            return dim_err(format!("causal mask with {lq} queries over {lk} keys"));
        }
        let offset = lk - lq;
        let mut v = self.value(x).clone();
        for block in v.data_mut().chunks_mut(lq * lk) {
            for i in 0..lq {
                for s in &mut block[i * lk + i + offset + 1..(i + 1) * lk] {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        Ok(self.unary(x, v, Op::CausalMask(x)))
    }

    /// Normalizes over the last axis then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err(format!(
                "layer_norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        if eps <= 0.0 {
            return Err(HdtError::Parameter("layer_norm eps must be > 0".into()));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (r, out) in xv.data().chunks(d).zip(xhat.chunks_mut(d)) {
            rstd.push(kernels::standardize_row(r, out, eps));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("shape");
        self.unary(x, v, Op::Dropout { x, mask })
    }

    /// Gathers rows of `table [V×d]`; result is `[n×d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {ts:?}"));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(HdtError::Index(format!("index {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.unary(
            table,
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} for {first:?}"));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat of {first:?} and {s:?} along {axis}"));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = axis_lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&axis_lens) {
                let chunk = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                axis_lens,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        Ok(self.unary(
            x,
            v,
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        ))
    }

    fn conv_input_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, l] => Ok((1, c, l)),
            [b, c, l] => Ok((b, c, l)),
            ref s => dim_err(format!("{what} input must be [C, L] or [B, C, L], got {s:?}")),
        }
    }

    /// 1-D cross-correlation with zero padding.
    /// `x: [C_in, L]` or `[B, C_in, L]`, `w: [C_out, C_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, c_in, len_in) = self.conv_input_dims(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return dim_err(format!(
                "conv1d weight {ws:?} does not match input {:?}",
                self.shape(x)
            ));
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        let len_out = kernels::conv1d_out_len(len_in, kernel, stride, padding).ok_or_else(|| {
            HdtError::Dimension(format!(
                "kernel {kernel} larger than padded input {len_in}+2·{padding}"
            ))
        })?;
        let geom = ConvGeom { batch, c_in, c_out, len_in, len_out, kernel, stride, padding };
        let mut out = vec![0.0; batch * c_out * len_out];
        kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &mut out, &geom);
        let shape = if self.shape(x).len() == 2 {
            vec![c_out, len_out]
        } else {
            vec![batch, c_out, len_out]
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, geom }, rg))
    }

    /// Adjoint of [`Tape::conv1d`]: `x: [C_in, L]` or `[B, C_in, L]`,
    /// `w: [C_in, C_out, k]`, output length `(L − 1)·stride − 2·padding + k`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, c_in, len_in) = self.conv_input_dims(x, "conv1d_transpose")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != c_in {
            return dim_err(format!(
                "conv1d_transpose weight {ws:?} does not match input {:?}",
                self.shape(x)
            ));
        }
        let (c_out, kernel) = (ws[1], ws[2]);
        if stride == 0 {
            return Err(HdtError::Parameter("stride must be positive".into()));
        }
        let len_out = kernels::conv1d_transpose_out_len(len_in, kernel, stride, padding)
            .ok_or_else(|| HdtError::Dimension("transposed conv output would be empty".into()))?;
        let geom = ConvGeom { batch, c_in, c_out, len_in, len_out, kernel, stride, padding };
        let mut out = vec![0.0; batch * c_out * len_out];
        kernels::conv1d_transpose_forward(self.value(x).data(), self.value(w).data(), &mut out, &geom);
        let shape = if self.shape(x).len() == 2 {
            vec![c_out, len_out]
        } else {
            vec![batch, c_out, len_out]
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1dTranspose { x, w, geom }, rg))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return dim_err(format!(
                "cross entropy over logits {s:?} with {} targets",
                targets.len()
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(HdtError::Index(format!("target {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            kernels::softmax_row(row);
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.unary(
            logits,
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Divides each last-axis row by `‖row‖ + eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(r);
            for v in row.iter_mut() {
                *v /= r + eps;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out).expect("shape");
        self.unary(x, v, Op::L2NormalizeRows { x, norms, eps })
    }

    /// Forward value `value`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return dim_err(format!(
                "straight-through value {:?} for input {:?}",
                value.shape(),
                self.shape(x)
            ));
        }
        Ok(self.unary(x, value, Op::StraightThrough(x)))
    }

    /// Gradients of scalar `root` with respect to every node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddTrailing(x, y) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let block = self.nodes[y.0].value.numel();
                acc(*y, &mut |gy| {
                    for chunk in g.chunks(block) {
                        add_into(gy, chunk);
                    }
                });
            }
            Op::AddAxis { x, b, axis_len, inner } => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[(i / inner) % axis_len] += gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)
            }),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                acc(*x, &mut |gx| add_into(gx, g))
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::matmul_acc_bt(g, bv, ga, *m, *k, *n));
                acc(*b, &mut |gb| kernels::matmul_acc_at(av, g, gb, *m, *k, *n));
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                let (mk, kn, mn) = (m * k, k * n, m * n);
                acc(*a, &mut |ga| {
                    for t in 0..*batch {
                        kernels::matmul_acc_bt(
                            &g[t * mn..][..mn],
                            &bv[t * kn..][..kn],
                            &mut ga[t * mk..][..mk],
                            *m,
                            *k,
                            *n,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..*batch {
                        kernels::matmul_acc_at(
                            &av[t * mk..][..mk],
                            &g[t * mn..][..mn],
                            &mut gb[t * kn..][..kn],
                            *m,
                            *k,
                            *n,
                        );
                    }
                });
            }
            Op::Permute { x, map } => acc(*x, &mut |gx| {
                for (&src, gv) in map.iter().zip(g) {
                    gx[src] += gv;
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), a) in gx.iter_mut().zip(g).zip(xv) {
                        if *a > 0.0 {
                            *o += gv;
                        }
                    }
                })
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += if *a > 0.0 { *gv } else { slope * gv };
                    }
                })
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::LogSigmoid(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(-a);
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), a) in gx.iter_mut().zip(g).zip(xv) {
                        if a >= lo && a <= hi {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gv), a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * a * gv;
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n))
            }
            Op::SoftmaxLast(x) => {
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                })
            }
            Op::CausalMask(x) => acc(*x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    if *y != f64::NEG_INFINITY {
                        *o += gv;
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.nodes[gain.0].value.numel();
                let gv = val(*gain);
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (((gxr, gr), xr), &rs) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd)
                    {
                        for ((dh, go), gn) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *dh = go * gn;
                        }
                        let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dhx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dh), xh) in gxr.iter_mut().zip(&dxhat).zip(xr) {
                            *o += rs * (dh - mean_dh - xh * mean_dhx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, go), xh) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += go * xh;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
            Op::Embedding { table, indices } => {
                let d = self.nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (&idx, gr) in indices.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[idx * d..(idx + 1) * d], gr);
                    }
                })
            }
            Op::Concat { parts, outer, inner, axis_lens } => {
                let total: usize = axis_lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(axis_lens) {
                    let chunk = len * inner;
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, inner, axis_len, start, len } => acc(*x, &mut |gx| {
                let chunk = len * inner;
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    add_into(&mut gx[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                }
            }),
            Op::Conv1d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| kernels::conv1d_backward(xv, wv, g, Some(gx), None, geom));
                acc(*w, &mut |gw| kernels::conv1d_backward(xv, wv, g, None, Some(gw), geom));
            }
            Op::Conv1dTranspose { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    kernels::conv1d_transpose_backward(xv, wv, g, Some(gx), None, geom)
                });
                acc(*w, &mut |gw| {
                    kernels::conv1d_transpose_backward(xv, wv, g, None, Some(gw), geom)
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * k..(r + 1) * k];
                        for (j, (o, p)) in gl[r * k..(r + 1) * k].iter_mut().zip(row).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *o += scale * (p - onehot);
                        }
                    }
                })
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let xv = val(*x);
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for (((gxr, gr), xr), &r) in
                        gx.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)).zip(norms)
                    {
                        let denom = r + eps;
                        let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let radial = if r > 0.0 { dot / (denom * denom * r) } else { 0.0 };
                        for ((o, gv), xv) in gxr.iter_mut().zip(gr).zip(xr) {
                            *o += gv / denom - xv * radial;
                        }
                    }
                })
            }
        }
    }

    /// Per-parameter gradients of `store`, summed over every binding.
    /// `None` marks parameters not reached by the root.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(sid, pid, var) in &self.bindings {
            if sid != store.id() {
                continue;
            }
            let Some(g) = grads.raw(var) else { continue };
            match &mut out[pid.0] {
                Some(t) => add_into(t.data_mut(), g),
                slot @ None => {
                    *slot = Some(
                        Tensor::new(store.get(pid).shape().to_vec(), g.to_vec()).expect("shape"),
                    )
                }
            }
        }
        ParamGrads(out)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the root with respect to `v`, shaped like `v`.
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.raw(v)
            .map(|g| Tensor::new(tape.shape(v).to_vec(), g.to_vec()).expect("shape"))
    }
}

/// Gradients for the parameters of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, c: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            let Some(b) = b else { continue };
            match a {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(b.data())
                    .for_each(|(x, y)| *x += c * y),
                None => *a = Some(b.map(|y| c * y)),
            }
        }
    }

    pub fn norm_of(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, Tensor::l2_norm)
    }

    pub fn all_zero_or_absent(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}
