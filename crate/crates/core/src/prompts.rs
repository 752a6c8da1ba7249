//! Prompt pools, query-key selection, object-injected queries and prompt
//! fusion.

use crate::error::{Error, Result};
use crate::rng::{self, StdRng};
use crate::tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Denominator guard for cosine similarities.
pub const COS_EPS: f64 = 1e-8;
pub const ETA_MIN: f64 = 1.0;
pub const ETA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    State,
    Object,
    Composition,
}

impl Namespace {
    pub const ALL: [Namespace; 3] = [Namespace::State, Namespace::Object, Namespace::Composition];

    pub fn letter(self) -> char {
        match self {
            Namespace::State => 'S',
            Namespace::Object => 'O',
            Namespace::Composition => 'C',
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Namespace::State => "state",
            Namespace::Object => "object",
            Namespace::Composition => "composition",
        };
        f.write_str(s)
    }
}

/// `M` prompts of shape `L x D` and their `M` keys of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool<T: Real> {
    pub namespace: Namespace,
    /// `[M, L, D]`
    pub prompts: Tensor<T>,
    /// `[M, D]`
    pub keys: Tensor<T>,
}

impl<T: Real> PromptPool<T> {
    /// Prompts and keys drawn uniformly from `[-1, 1]`.
    pub fn random(
        namespace: Namespace,
        size: usize,
        token_len: usize,
        dim: usize,
        rng: &mut StdRng,
    ) -> Result<Self> {
        if size == 0 || token_len == 0 || dim == 0 {
            return Err(Error::Config("prompt pool dimensions must be positive".into()));
        }
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng::uniform(rng, -1.0, 1.0)).collect()
        };
        let prompts = Tensor::from_f64([size, token_len, dim], &draw(size * token_len * dim))?;
        let keys = Tensor::from_f64([size, dim], &draw(size * dim))?;
        Self::new(namespace, prompts, keys)
    }

    pub fn new(namespace: Namespace, prompts: Tensor<T>, keys: Tensor<T>) -> Result<Self> {
        if prompts.rank() != 3 || keys.rank() != 2 {
            return Err(Error::dim(
                "prompt pool ranks",
                "[M, L, D] and [M, D]",
                format!("{:?} and {:?}", prompts.shape(), keys.shape()),
            ));
        }
        if prompts.shape()[0] != keys.shape()[0] || prompts.shape()[2] != keys.shape()[1] {
            return Err(Error::dim(
                "prompt/key counts",
                format!("{:?}", &prompts.shape()[..1]),
                format!("{:?}", keys.shape()),
            ));
        }
        Ok(Self {
            namespace,
            prompts,
            keys,
        })
    }

    pub fn size(&self) -> usize {
        self.prompts.shape()[0]
    }

    pub fn token_len(&self) -> usize {
        self.prompts.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.prompts.shape()[2]
    }

    /// Top-`k` keys by cosine similarity to `query`.
    pub fn select_topk(&self, query: &[T], k: usize) -> Result<SelectionResult> {
        select_topk(&self.keys, query, k)
    }
}

/// Indices chosen by [`select_topk`], best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Returns the `k` rows of `keys` most cosine-similar to `query`, sorted by
/// decreasing similarity with ties broken by lower index. Selection is a
/// discrete choice and carries no gradient.
pub fn select_topk<T: Real>(keys: &Tensor<T>, query: &[T], k: usize) -> Result<SelectionResult> {
    if keys.rank() != 2 || keys.shape()[1] != query.len() {
        return Err(Error::dim(
            "keys for query",
            format!("[M, {}]", query.len()),
            format!("{:?}", keys.shape()),
        ));
    }
    let m = keys.shape()[0];
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("top-k with k = {k} from {m} keys")));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("query is not finite".into()));
    }
    let qn = query.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::Invalid("zero-norm query".into()));
    }
    let mut scored: Vec<(usize, f64)> = (0..m)
        .map(|i| {
            let key = keys.row(i);
            let dot: f64 = key.iter().zip(query).map(|(a, b)| a.f64() * b.f64()).sum();
            let kn = key.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            (i, dot / (qn.max(COS_EPS) * kn.max(COS_EPS)))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(SelectionResult {
        indices: scored.iter().map(|s| s.0).collect(),
        similarities: scored.iter().map(|s| s.1).collect(),
    })
}

/// Query, key and value projections of the object-to-state cross attention.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionWeights<T: Real> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Real> InjectionWeights<T> {
    /// Truncated-normal projections with std `1/sqrt(D)`.
    pub fn random(dim: usize, rng: &mut StdRng) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let mut draw = || -> Result<Tensor<T>> {
            let d: Vec<f64> = (0..dim * dim).map(|_| rng::trunc_normal(rng, std)).collect();
            Ok(Tensor::from_f64([dim, dim], &d)?)
        };
        Ok(Self {
            w_q: draw()?,
            w_k: draw()?,
            w_v: draw()?,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: Tensor::eye(dim),
            w_k: Tensor::eye(dim),
            w_v: Tensor::eye(dim),
        }
    }
}

/// `Softmax(q W_Q (P W_K)ᵀ / sqrt(D)) · P W_V` for a query `[D]` attending
/// over the rows of a fused prompt `[L, D]`. Returns `[D]`.
pub fn inject_object<'t, T: Real>(
    query: Var<'t, T>,
    fused_prompt: Var<'t, T>,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    w_v: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let qs = query.shape();
    let ps = fused_prompt.shape();
    if qs.len() != 1 || ps.len() != 2 || ps[1] != qs[0] {
        return Err(Error::dim(
            "injection operands",
            "query [D], prompt [L, D]",
            format!("{qs:?}, {ps:?}"),
        ));
    }
    let (d, l) = (qs[0], ps[0]);
    for w in [&w_q, &w_k, &w_v] {
        if w.shape() != [d, d] {
            return Err(Error::dim("projection", format!("[{d}, {d}]"), format!("{:?}", w.shape())));
        }
    }
    let q = query.matmul(&w_q)?.reshape(&[d, 1])?;
    let keys = fused_prompt.matmul(&w_k)?;
    let values = fused_prompt.matmul(&w_v)?;
    let attn = keys
        .matmul(&q)?
        .reshape(&[l])?
        .scale(1.0 / (d as f64).sqrt())
        .softmax()?;
    Ok(attn.reshape(&[1, l])?.matmul(&values)?.reshape(&[d])?)
}

/// Learnable GeM exponent: `η = clamp(1 + softplus(raw), 1, 10)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemParam {
    pub raw: f64,
}

impl GemParam {
    pub fn from_eta(eta: f64) -> Result<Self> {
        if !(eta > ETA_MIN && eta <= ETA_MAX) {
            return Err(Error::Config(format!(
                "initial GeM exponent {eta} outside ({ETA_MIN}, {ETA_MAX}]"
            )));
        }
        // inverse softplus of eta - 1
        Ok(Self {
            raw: (eta - 1.0).exp_m1().ln(),
        })
    }

    pub fn eta(&self) -> f64 {
        let sp = if self.raw > 0.0 {
            self.raw + (-self.raw).exp().ln_1p()
        } else {
            self.raw.exp().ln_1p()
        };
        (1.0 + sp).clamp(ETA_MIN, ETA_MAX)
    }

    /// Effective exponent as a differentiable function of the raw leaf.
    pub fn eta_var<'t, T: Real>(raw: Var<'t, T>) -> Var<'t, T> {
        raw.softplus().add_scalar(1.0).clamp(ETA_MIN, ETA_MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Max,
    Mean,
    Gem,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Max => "max",
            Fusion::Mean => "mean",
            Fusion::Gem => "gem",
        })
    }
}

/// Generalized mean of `k` prompts `[k, L, D]`, elementwise:
/// `sign(m)|m|^(1/η)` with `m = (1/k) Σ sign(P)|P|^η`. Returns `[L, D]`.
pub fn gem_fuse<'t, T: Real>(selected: Var<'t, T>, eta: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = selected.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Invalid("GeM fusion of an empty selection".into()));
    }
    let e = eta.item().f64();
    if !(e >= ETA_MIN) {
        return Err(Error::Invalid(format!("GeM exponent {e} below {ETA_MIN}")));
    }
    let tape: &'t Tape<T> = eta.tape();
    let inv = tape.scalar(1.0).div(&eta)?;
    let pooled = selected.signed_pow(&eta)?.mean_axis0()?;
    Ok(pooled.signed_pow(&inv)?)
}

/// Fuses `[k, L, D]` selected prompts into one `[L, D]` prompt.
pub fn fuse<'t, T: Real>(
    selected: Var<'t, T>,
    fusion: Fusion,
    eta: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    match fusion {
        Fusion::Mean => Ok(selected.mean_axis0()?),
        Fusion::Max => Ok(selected.max_axis0()?),
        Fusion::Gem => {
            let eta = eta.ok_or_else(|| Error::Invalid("GeM fusion needs an exponent".into()))?;
            gem_fuse(selected, eta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::forward_eval;

    fn gem_values(values: &[f64], eta: f64) -> f64 {
        let sel = Tensor::<f64>::from_f64([values.len(), 1, 1], values).unwrap();
        let out = forward_eval::<_, Error, _>(&[sel, Tensor::scalar(eta)], |_, v| gem_fuse(v[0], v[1]))
            .unwrap();
        out.item()
    }

    #[test]
    fn gem_eta_one_is_mean() {
        assert!((gem_values(&[1.0, 3.0], 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gem_eta_two_on_one_and_three() {
        assert!((gem_values(&[1.0, 3.0], 2.0) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gem_large_eta_matches_direct_evaluation() {
        let v = gem_values(&[1.0, 3.0], 64.0);
        let direct = (0.5 * (1.0 + 3f64.powi(64))).powf(1.0 / 64.0);
        assert!((v - direct).abs() < 1e-9, "{v} vs {direct}");
        assert!(v < 3.0 && v > 2.9);
    }

    #[test]
    fn gem_rejects_empty_selection() {
        let tape = Tape::<f64>::new();
        let sel = tape.constant(Tensor::zeros([0, 2, 2]));
        let eta = tape.scalar(2.0);
        assert!(gem_fuse(sel, eta).is_err());
    }

    #[test]
    fn topk_exact_match() {
        let mut keys = Tensor::<f64>::zeros([4, 4]);
        for i in 0..4 {
            keys.data_mut()[i * 4 + i] = 1.0;
        }
        let q = [0.0, 0.0, 2.0, 0.0];
        let sel = select_topk(&keys, &q, 1).unwrap();
        assert_eq!(sel.indices, vec![2]);
        assert!((sel.similarities[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let keys = Tensor::<f64>::full([6, 3], 0.5);
        let sel = select_topk(&keys, &[1.0, -0.2, 0.3], 3).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn topk_rejects_zero_query_and_bad_k() {
        let keys = Tensor::<f64>::full([3, 2], 1.0);
        assert!(select_topk(&keys, &[0.0, 0.0], 1).is_err());
        assert!(select_topk(&keys, &[1.0, 0.0], 4).is_err());
        assert!(select_topk(&keys, &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn injection_with_single_token_and_identity_returns_the_prompt() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64([3], &[0.2, -1.0, 0.5]).unwrap());
        let p = tape.constant(Tensor::from_f64([1, 3], &[4.0, 5.0, -6.0]).unwrap());
        let w = InjectionWeights::<f64>::identity(3);
        let (wq, wk, wv) = (
            tape.constant(w.w_q),
            tape.constant(w.w_k),
            tape.constant(w.w_v),
        );
        let out = inject_object(q, p, wq, wk, wv).unwrap();
        assert_eq!(out.value().data(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn injection_two_tokens_matches_hand_evaluation() {
        let q = [0.5, -0.25];
        let rows = [[1.0, 2.0], [-1.0, 0.5]];
        let tape = Tape::<f64>::new();
        let qv = tape.constant(Tensor::from_f64([2], &q).unwrap());
        let pv = tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, -1.0, 0.5]).unwrap());
        let w = InjectionWeights::<f64>::identity(2);
        let out = inject_object(
            qv,
            pv,
            tape.constant(w.w_q),
            tape.constant(w.w_k),
            tape.constant(w.w_v),
        )
        .unwrap();
        let s: Vec<f64> = rows
            .iter()
            .map(|r| (r[0] * q[0] + r[1] * q[1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z, s[1].exp() / z];
        let expected = [
            a[0] * rows[0][0] + a[1] * rows[1][0],
            a[0] * rows[0][1] + a[1] * rows[1][1],
        ];
        let got = out.value();
        for i in 0..2 {
            assert!((got.data()[i] - expected[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gem_param_round_trip() {
        let p = GemParam::from_eta(3.0).unwrap();
        assert!((p.eta() - 3.0).abs() < 1e-12);
        assert!(GemParam::from_eta(0.5).is_err());
        assert!(GemParam { raw: 100.0 }.eta() <= ETA_MAX);
        assert!(GemParam { raw: -100.0 }.eta() >= ETA_MIN);
    }

    #[test]
    fn pool_shapes() {
        let mut rng = rng::stream(0, 0);
        let pool = PromptPool::<f64>::random(Namespace::State, 20, 5, 8, &mut rng).unwrap();
        assert_eq!((pool.size(), pool.token_len(), pool.dim()), (20, 5, 8));
        assert!(pool.prompts.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(PromptPool::new(Namespace::State, Tensor::<f64>::zeros([3, 2, 4]), Tensor::zeros([2, 4])).is_err());
    }
}
