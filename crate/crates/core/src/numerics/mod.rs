//! Minimal dense tensor core with reverse-mode differentiation and the layer
//! set the forecasting models are assembled from.

mod graph;
mod tensor;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{AttentionParams, Graph, NodeId, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use tensor::{positional_encoding, softmax_rows, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadRate(f64),
    #[error("batch norm in train mode needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("function is not deterministic: repeated forward passes gave {0} and {1}")]
    NonDeterministic(f64, f64),
    #[error("unknown parameter path {0:?}")]
    UnknownParam(String),
}

/// Train/inference switch for the stochastic and statistics-bearing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Seeded, platform-stable random source. All stochastic behaviour in the
/// crate flows through this type so a fixed seed replays bit-identically.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (no platform-dependent libm paths in
    /// the draw sequence).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independent child source; advances this one.
    pub fn fork(&mut self) -> RandomSource {
        RandomSource::new(self.next_u64())
    }
}

/// Named trainable tensors with matching gradient buffers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: BTreeMap<String, ParamEntry>,
}

/// Equality compares values only; gradient buffers are scratch state.
impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ea), (kb, eb))| ka == kb && ea.value == eb.value)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    value: Tensor,
    #[serde(skip, default = "empty_tensor")]
    grad: Tensor,
}

fn empty_tensor() -> Tensor {
    Tensor::zeros(&[0])
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            if e.grad.shape() != e.value.shape() {
                e.grad = Tensor::zeros(e.value.shape());
            } else {
                e.grad.data_mut().fill(0.0);
            }
        }
    }

    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            if let Some(e) = self.entries.get_mut(name) {
                if e.grad.shape() != e.value.shape() {
                    e.grad = Tensor::zeros(e.value.shape());
                }
                e.grad.add_assign(g);
            }
        }
    }

    /// Apply `f(name, value, grad)` to every entry; the optimizer hook.
    pub fn update(&mut self, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        for (name, e) in self.entries.iter_mut() {
            f(name, &mut e.value, &e.grad);
        }
    }
}

/// Result of a finite-difference comparison, reporting the worst offender.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences. The builder must bind the parameters it uses via
/// `Graph::param` and return the scalar output node; it is invoked once per
/// perturbed evaluation, so it must be deterministic (no live dropout).
pub fn grad_check<F>(
    build: F,
    params: &ParameterSet,
    eps: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<NodeId, NumericsError>,
{
    let eval = |set: &ParameterSet| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let out = build(&mut g, set)?;
        if g.value(out).numel() != 1 {
            return Err(NumericsError::BadShape(
                "grad_check needs a scalar output".into(),
            ));
        }
        Ok(g.value(out).data()[0])
    };

    let v1 = eval(params)?;
    let v2 = eval(params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(NumericsError::NonDeterministic(v1, v2));
    }

    let mut graph = Graph::new();
    let out = build(&mut graph, params)?;
    graph.backward(out)?;
    let analytic = graph.param_grads();

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for (name, grad) in &analytic {
        for idx in 0..grad.numel() {
            let orig = work.get(name)?.data()[idx];
            work.get_mut(name)?.data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}

/// Xavier-uniform initialization for a [fan_in, fan_out] weight matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut RandomSource) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn rand_tensor(shape: &[usize], rng: &mut RandomSource) -> Tensor {
        let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn random_source_replays_bitwise() {
        let mut a = RandomSource::new(7);
        let mut b = RandomSource::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RandomSource::new(7);
        let mut d = RandomSource::new(7);
        for _ in 0..100 {
            assert_eq!(c.normal().to_bits(), d.normal().to_bits());
        }
    }

    #[test]
    fn dense_identity_and_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn dense_rejects_bad_inner_dim() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.dense(x, w, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(11);
        let mut params = ParameterSet::new();
        params.insert("w", rand_tensor(&[3, 4], &mut rng));
        params.insert("b", rand_tensor(&[4], &mut rng));
        let x = rand_tensor(&[2, 3], &mut rng);
        let report = grad_check(
            |g, p| {
                let xn = g.constant(x.clone());
                let w = g.param("w", p.get("w")?.clone());
                let b = g.param("b", p.get("b")?.clone());
                let y = g.dense(xn, w, b)?;
                let sq = g.square(y);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn dense_relu_stack_is_tight() {
        let mut rng = RandomSource::new(3);
        let mut params = ParameterSet::new();
        params.insert("w1", rand_tensor(&[4, 6], &mut rng));
        params.insert("b1", rand_tensor(&[6], &mut rng));
        params.insert("w2", rand_tensor(&[6, 1], &mut rng));
        params.insert("b2", rand_tensor(&[1], &mut rng));
        let x = rand_tensor(&[3, 4], &mut rng);
        let report = grad_check(
            |g, p| {
                let xn = g.constant(x.clone());
                let w1 = g.param("w1", p.get("w1")?.clone());
                let b1 = g.param("b1", p.get("b1")?.clone());
                let w2 = g.param("w2", p.get("w2")?.clone());
                let b2 = g.param("b2", p.get("b2")?.clone());
                let h = g.dense(xn, w1, b1)?;
                let h = g.relu(h);
                let y = g.dense(h, w2, b2)?;
                let sq = g.square(y);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_known_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap());
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-4);

        let mut rng = RandomSource::new(5);
        let mut params = ParameterSet::new();
        params.insert("x", rand_tensor(&[2, 5], &mut rng));
        params.insert("gamma", rand_tensor(&[5], &mut rng));
        params.insert("beta", rand_tensor(&[5], &mut rng));
        let report = grad_check(
            |g, p| {
                let x = g.param("x", p.get("x")?.clone());
                let gamma = g.param("gamma", p.get("gamma")?.clone());
                let beta = g.param("beta", p.get("beta")?.clone());
                let y = g.layer_norm(x, gamma, beta)?;
                let sq = g.square(y);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
    }

    #[test]
    fn batch_norm_contracts_and_gradient() {
        // identical rows -> zeros in train mode
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
        assert_eq!(mean.data(), &[2.0, -1.0]);
        assert_eq!(var.data(), &[0.0, 0.0]);

        // train mode needs batch >= 2
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta),
            Err(NumericsError::BatchTooSmall(1))
        ));

        // infer mode with identity stats is the identity
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.5, -2.0]]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::full(&[2], 1.0);
        let y = g.batch_norm_infer(x, gamma, beta, &rm, &rv).unwrap();
        for (a, b) in g.value(y).data().iter().zip([0.5, -2.0]) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }

        let mut rng = RandomSource::new(9);
        let mut params = ParameterSet::new();
        params.insert("x", rand_tensor(&[4, 3], &mut rng));
        params.insert("gamma", rand_tensor(&[3], &mut rng));
        params.insert("beta", rand_tensor(&[3], &mut rng));
        let report = grad_check(
            |g, p| {
                let x = g.param("x", p.get("x")?.clone());
                let gamma = g.param("gamma", p.get("gamma")?.clone());
                let beta = g.param("beta", p.get("beta")?.clone());
                let (y, _, _) = g.batch_norm_train(x, gamma, beta)?;
                let sq = g.square(y);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = RandomSource::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 3.0));
        let y = g.dropout(x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
        let y = g.dropout(x, 0.9, &mut rng, Mode::Infer).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng, Mode::Train),
            Err(NumericsError::BadRate(_))
        ));
        assert!(matches!(
            g.dropout(x, -0.1, &mut rng, Mode::Train),
            Err(NumericsError::BadRate(_))
        ));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = RandomSource::new(42);
        let trials = 100_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let mut g = Graph::new();
            let x = g.constant(Tensor::scalar(2.5));
            let y = g.dropout(x, 0.4, &mut rng, Mode::Train).unwrap();
            sum += g.value(y).data()[0];
        }
        let mean = sum / trials as f64;
        assert!((mean - 2.5).abs() / 2.5 < 0.02, "empirical mean {mean}");
    }

    #[test]
    fn global_average_pool_cases() {
        let mut g = Graph::new();
        // two positions, both equal to v -> v
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let y = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn attention_uniform_tokens_stay_uniform() {
        // identical token vectors with identity value/output projections pass through
        let d = 4;
        let mut g = Graph::new();
        let token = vec![0.3, -0.7, 1.1, 0.0];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&token);
        }
        let x = g.constant(Tensor::new(vec![1, 3, d], data).unwrap());
        let eye = {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        let p = AttentionParams {
            wq: g.constant(eye.clone()),
            bq: g.constant(Tensor::zeros(&[d])),
            wk: g.constant(eye.clone()),
            bk: g.constant(Tensor::zeros(&[d])),
            wv: g.constant(eye.clone()),
            bv: g.constant(Tensor::zeros(&[d])),
            wo: g.constant(eye.clone()),
            bo: g.constant(Tensor::zeros(&[d])),
        };
        let y = g.multi_head_attention(x, &p, 2).unwrap();
        for pos in 0..3 {
            for (i, want) in token.iter().enumerate() {
                let got = g.value(y).data()[pos * d + i];
                assert!(
                    (got - want).abs() < 1e-9,
                    "pos {pos} dim {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn attention_single_token_weight_is_one() {
        // softmax over a single score is exactly 1, so the context equals the
        // value projection of the lone token
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![1, 1], vec![-3.2]).unwrap());
        let w = g.softmax_last(s);
        assert_eq!(g.value(w).data(), &[1.0]);

        let d = 4;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, d], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let eye = {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        let mut rng = RandomSource::new(2);
        let p = AttentionParams {
            wq: g.constant(rand_tensor(&[d, d], &mut rng)),
            bq: g.constant(rand_tensor(&[d], &mut rng)),
            wk: g.constant(rand_tensor(&[d, d], &mut rng)),
            bk: g.constant(rand_tensor(&[d], &mut rng)),
            wv: g.constant(eye.clone()),
            bv: g.constant(Tensor::zeros(&[d])),
            wo: g.constant(eye),
            bo: g.constant(Tensor::zeros(&[d])),
        };
        let y = g.multi_head_attention(x, &p, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let d = 8;
        let heads = 2;
        let mut rng = RandomSource::new(17);
        let mut params = ParameterSet::new();
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(name, rand_tensor(&[d, d], &mut rng));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            params.insert(name, rand_tensor(&[d], &mut rng));
        }
        let x = rand_tensor(&[2, 3, d], &mut rng);
        let report = grad_check(
            |g, p| {
                let xn = g.constant(x.clone());
                let ap = AttentionParams {
                    wq: g.param("wq", p.get("wq")?.clone()),
                    bq: g.param("bq", p.get("bq")?.clone()),
                    wk: g.param("wk", p.get("wk")?.clone()),
                    bk: g.param("bk", p.get("bk")?.clone()),
                    wv: g.param("wv", p.get("wv")?.clone()),
                    bv: g.param("bv", p.get("bv")?.clone()),
                    wo: g.param("wo", p.get("wo")?.clone()),
                    bo: g.param("bo", p.get("bo")?.clone()),
                };
                let y = g.multi_head_attention(xn, &ap, heads)?;
                let sq = g.square(y);
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(23);
        let mut params = ParameterSet::new();
        params.insert("logits", rand_tensor(&[4, 3], &mut rng));
        let targets = vec![0, 2, 1, 2];
        let report = grad_check(
            |g, p| {
                let z = g.param("logits", p.get("logits")?.clone());
                g.softmax_cross_entropy(z, &targets)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_live_dropout() {
        let rng = RefCell::new(RandomSource::new(1));
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::full(&[1, 16], 0.5));
        let err = grad_check(
            |g, p| {
                let x = g.constant(Tensor::full(&[1, 1], 2.0));
                let w = g.param("w", p.get("w")?.clone());
                let y = g.matmul(x, w)?;
                let y = g.dropout(y, 0.5, &mut rng.borrow_mut(), Mode::Train)?;
                Ok(g.mean_all(y))
            },
            &params,
            1e-5,
        );
        assert!(matches!(err, Err(NumericsError::NonDeterministic(_, _))));
    }

    #[test]
    fn softmax_rows_sum_to_one_for_random_inputs() {
        let mut rng = RandomSource::new(77);
        for _ in 0..50 {
            let t = rand_tensor(&[4, 7], &mut rng);
            let s = softmax_rows(&t).unwrap();
            for row in s.data().chunks(7) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
