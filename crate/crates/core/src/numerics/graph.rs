//! Reverse-mode differentiation over a flat tape of tensor ops.
//!
//! A [`Graph`] records every operation as a node holding its forward value,
//! its parent node ids, and a closure producing per-parent gradient
//! contributions. `backward` walks the tape in reverse creation order, which
//! is already topological because ops can only reference earlier nodes.

use std::collections::BTreeMap;

use super::tensor::{gemm_into, softmax_last_raw, Tensor};
use super::{Mode, NumericsError, RandomSource};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Parameter node ids for one attention layer.
pub struct AttentionParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    grads: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite tensor produced by a graph op"
        );
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf without a gradient consumer (inputs, targets, constants).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None)
    }

    /// Leaf registered under a parameter path so its gradient can be read back.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, vec![], None);
        self.params.push((name.to_string(), id.0));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // elementwise and structural primitives
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let value = {
            let mut v = self.value(a).clone();
            v.add_assign(self.value(b));
            v
        };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), g.map(|v| -v)])),
        ))
    }

    /// `x + b` where the shape of `b` is a trailing suffix of the shape of `x`
    /// (bias over rows, position tables over batches).
    pub fn add_bcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bcast",
                detail: format!("{:?} vs suffix {:?}", xs, bs),
            });
        }
        let blen: usize = bs.iter().product();
        let bdata = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(blen.max(1)) {
            for (v, add) in chunk.iter_mut().zip(&bdata) {
                *v += add;
            }
        }
        let bshape = bs.clone();
        Ok(self.push(
            value,
            vec![x.0, b.0],
            Some(Box::new(move |_, g, _| {
                let mut db = Tensor::zeros(&bshape);
                for chunk in g.data().chunks(blen.max(1)) {
                    for (acc, v) in db.data_mut().iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![g.clone(), db]
            })),
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| vec![g.map(|v| v * c)])),
        )
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, g, pv| {
                let x = pv[0];
                let mut dx = g.clone();
                for (d, xi) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= 2.0 * xi;
                }
                vec![dx]
            })),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, g, pv| {
                let mut dx = g.clone();
                for (d, xi) in dx.data_mut().iter_mut().zip(pv[0].data()) {
                    if *xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let value = self.value(x).reshaped(shape)?;
        let back_shape = self.shape(x).to_vec();
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| {
                vec![g.reshaped(back_shape.clone()).expect("reshape grad")]
            })),
        ))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, NumericsError> {
        let value = self.value(x).permuted(perm)?;
        let mut inverse = vec![0usize; perm.len()];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| {
                vec![g.permuted(&inverse).expect("permute grad")]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // matrix products
    // ------------------------------------------------------------------

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ash, bsh),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        gemm_into(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            false,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, pv| {
                let (a, b) = (pv[0], pv[1]);
                let mut da = vec![0.0; m * k];
                gemm_into(&mut da, g.data(), b.data(), m, n, k, false, true);
                let mut db = vec![0.0; k * n];
                gemm_into(&mut db, a.data(), g.data(), k, m, n, true, false);
                vec![
                    Tensor::new(vec![m, k], da).expect("matmul da"),
                    Tensor::new(vec![k, n], db).expect("matmul db"),
                ]
            })),
        ))
    }

    /// Batched [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "bmm",
                detail: format!("{:?} x {:?}", ash, bsh),
            });
        }
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm_into(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let value = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, pv| {
                let (a, b) = (pv[0], pv[1]);
                let mut da = vec![0.0; bt * m * k];
                let mut db = vec![0.0; bt * k * n];
                for i in 0..bt {
                    gemm_into(
                        &mut da[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        false,
                        true,
                    );
                    gemm_into(
                        &mut db[i * k * n..(i + 1) * k * n],
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        true,
                        false,
                    );
                }
                vec![
                    Tensor::new(vec![bt, m, k], da).expect("bmm da"),
                    Tensor::new(vec![bt, k, n], db).expect("bmm db"),
                ]
            })),
        ))
    }

    /// `x · W + b` for 2-D `x`; the plain dense layer.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let xw = self.matmul(x, w)?;
        self.add_bcast(xw, b)
    }

    // ------------------------------------------------------------------
    // normalization, softmax, dropout, pooling
    // ------------------------------------------------------------------

    /// Stable softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let value = softmax_last_raw(self.value(x));
        let cols = *self.shape(x).last().unwrap_or(&1);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |y, g, _| {
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for (d, y) in dr.iter_mut().zip(yr) {
                        *d = y * (*d - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Normalize over the last axis to zero mean / unit variance, then apply
    /// `gamma`/`beta` (both shaped like the last axis).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| NumericsError::BadShape("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma/beta must be [{d}]"),
            });
        }
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            let (mean, var) = row_moments(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gdata[i] + bdata[i];
            }
        }
        Ok(self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |_, g, pv| {
                let x = pv[0];
                let gamma = pv[1].data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for (r, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let (mean, var) = row_moments(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gamma).map(|(g, ga)| g * ga).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dgamma.data_mut()[i] += grow[i] * xhat[i];
                        dbeta.data_mut()[i] += grow[i];
                        dx.data_mut()[r * d + i] =
                            inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    /// Batch norm over the leading axis of a 2-D [batch, feat] tensor using
    /// the batch statistics. Returns the node plus the batch mean/variance so
    /// the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Tensor, Tensor), NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(NumericsError::BadShape(format!(
                "batch_norm wants 2-D, got {:?}",
                xs
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        if n < 2 {
            return Err(NumericsError::BatchTooSmall(n));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("gamma/beta must be [{d}]"),
            });
        }
        let (mean, var) = column_moments(self.value(x), n, d);
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                let inv = 1.0 / (var[j] + BATCH_NORM_EPS).sqrt();
                *v = (*v - mean[j]) * inv * gdata[j] + bdata[j];
            }
        }
        let mean_t = Tensor::new(vec![d], mean)?;
        let var_t = Tensor::new(vec![d], var)?;
        let id = self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |_, g, pv| {
                let x = pv[0];
                let gamma = pv[1].data();
                let (mean, var) = column_moments(x, n, d);
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for j in 0..d {
                    let inv = 1.0 / (var[j] + BATCH_NORM_EPS).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for i in 0..n {
                        let xhat = (x.data()[i * d + j] - mean[j]) * inv;
                        let gi = g.data()[i * d + j];
                        sum_g += gi;
                        sum_g_xhat += gi * xhat;
                    }
                    dgamma.data_mut()[j] = sum_g_xhat;
                    dbeta.data_mut()[j] = sum_g;
                    for i in 0..n {
                        let xhat = (x.data()[i * d + j] - mean[j]) * inv;
                        let gi = g.data()[i * d + j];
                        dx.data_mut()[i * d + j] =
                            gamma[j] * inv / n as f64 * (n as f64 * gi - sum_g - xhat * sum_g_xhat);
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        );
        Ok((id, mean_t, var_t))
    }

    /// Batch norm using frozen running statistics (inference path).
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(NumericsError::BadShape(format!(
                "batch_norm wants 2-D, got {:?}",
                xs
            )));
        }
        let d = xs[1];
        if running_mean.shape() != [d] || running_var.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm_infer",
                detail: format!("running stats must be [{d}]"),
            });
        }
        let mean = running_mean.data().to_vec();
        let var = running_var.data().to_vec();
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / (var[j] + BATCH_NORM_EPS).sqrt() * gdata[j] + bdata[j];
            }
        }
        let (bm, bv) = (mean, var);
        Ok(self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |_, g, pv| {
                let x = pv[0];
                let gamma = pv[1].data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for (i, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    for j in 0..d {
                        let inv = 1.0 / (bv[j] + BATCH_NORM_EPS).sqrt();
                        dx.data_mut()[i * d + j] = grow[j] * gamma[j] * inv;
                        dgamma.data_mut()[j] += grow[j] * (row[j] - bm[j]) * inv;
                        dbeta.data_mut()[j] += grow[j];
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)` in train mode; identity in inference mode.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut RandomSource,
        mode: Mode,
    ) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::BadRate(rate));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.uniform() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        )?;
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
                    *d *= m;
                }
                vec![dx]
            })),
        ))
    }

    /// Mean over the sequence axis: [batch, seq, d] -> [batch, d].
    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "global_average_pool",
                detail: format!("wants [batch, seq>=1, d], got {:?}", xs),
            });
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for t in 0..s {
                for j in 0..d {
                    out[i * d + j] += self.value(x).data()[i * s * d + t * d + j];
                }
            }
        }
        for v in &mut out {
            *v /= s as f64;
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| {
                let mut dx = Tensor::zeros(&[b, s, d]);
                for i in 0..b {
                    for t in 0..s {
                        for j in 0..d {
                            dx.data_mut()[i * s * d + t * d + j] = g.data()[i * d + j] / s as f64;
                        }
                    }
                }
                vec![dx]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // scalar reductions / losses
    // ------------------------------------------------------------------

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n as f64);
        let shape = self.shape(x).to_vec();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _| {
                vec![Tensor::full(&shape, g.data()[0] / n as f64)]
            })),
        )
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, g, pv| {
                let s = g.data()[0];
                vec![pv[0].map(|v| 2.0 * v * s)]
            })),
        )
    }

    /// Mean squared error between same-shaped tensors, as a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, NumericsError> {
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff);
        Ok(self.mean_all(sq))
    }

    /// Mean cross-entropy of logits [batch, classes] against class indices,
    /// fused with a stable softmax.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs {} targets", ls, targets.len()),
            });
        }
        let (n, c) = (ls[0], ls[1]);
        if targets.iter().any(|&t| t >= c) {
            return Err(NumericsError::BadShape("target class out of range".into()));
        }
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks(c).zip(targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let value = Tensor::scalar(loss / n as f64);
        let targets = targets.to_vec();
        Ok(self.push(
            value,
            vec![logits.0],
            Some(Box::new(move |_, g, pv| {
                let probs = softmax_last_raw(pv[0]);
                let mut dz = probs;
                for (i, row) in dz.data_mut().chunks_mut(c).enumerate() {
                    row[targets[i]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g.data()[0] / n as f64;
                    }
                }
                vec![dz]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // attention
    // ------------------------------------------------------------------

    /// Scaled dot-product multi-head self-attention over [batch, seq, d_model],
    /// heads concatenated through the output projection.
    pub fn multi_head_attention(
        &mut self,
        x: NodeId,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("wants [batch, seq, d_model], got {:?}", xs),
            });
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericsError::BadShape(format!(
                "d_model {d} not divisible by heads {heads}"
            )));
        }
        let dh = d / heads;
        let flat = self.reshape(x, vec![b * s, d])?;
        let q = self.dense(flat, p.wq, p.bq)?;
        let k = self.dense(flat, p.wk, p.bk)?;
        let v = self.dense(flat, p.wv, p.bv)?;
        let split = |g: &mut Graph, t: NodeId| -> Result<NodeId, NumericsError> {
            let t = g.reshape(t, vec![b, s, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?; // [b, heads, s, dh]
            g.reshape(t, vec![b * heads, s, dh])
        };
        let qh = split(self, q)?;
        let kh = split(self, k)?;
        let vh = split(self, v)?;
        let kt = self.permute(kh, &[0, 2, 1])?; // [b*heads, dh, s]
        let scores = self.bmm(qh, kt)?;
        let scaled = self.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = self.softmax_last(scaled);
        let ctx = self.bmm(weights, vh)?; // [b*heads, s, dh]
        let ctx = self.reshape(ctx, vec![b, heads, s, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?; // [b, s, heads, dh]
        let ctx = self.reshape(ctx, vec![b * s, d])?;
        let out = self.dense(ctx, p.wo, p.bo)?;
        self.reshape(out, vec![b, s, d])
    }

    // ------------------------------------------------------------------
    // backward pass
    // ------------------------------------------------------------------

    /// Backpropagate from a scalar output node; gradients become readable via
    /// `grad` / `param_grads`.
    pub fn backward(&mut self, out: NodeId) -> Result<(), NumericsError> {
        if self.value(out).numel() != 1 {
            return Err(NumericsError::BadShape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[out.0].data_mut()[0] = 1.0;
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let g = grads[i].clone();
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let contribs = backward(&node.value, &g, &parent_vals);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(&contribs) {
                grads[p].add_assign(c);
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0)
    }

    /// Gradients of every bound parameter, keyed by path. Parameters bound
    /// more than once accumulate.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.grads.get(*id) {
                out.entry(name.clone())
                    .and_modify(|acc| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn column_moments(x: &Tensor, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (j, v) in row.iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mean, var)
}
