use super::config::{Injection, ModelConfig};
use crate::backbone::FrozenEncoder;
use crate::data::LabelRegistry;
use crate::error::{Error, Result};
use crate::prompts::{self, Fusion, GemParam, InjectionWeights, Namespace, PromptPool, SelectionResult};
use crate::rng::{self, streams};
use crate::tensor::{Real, Tape, Tensor, Var};
use std::sync::Arc;

/// Index of every trainable array in [`ModelState::params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    names: Vec<String>,
    prompts: [Option<usize>; 3],
    keys: [Option<usize>; 3],
    injection: Option<[usize; 3]>,
    eta: Option<usize>,
    head_w: [Option<usize>; 3],
    head_b: [Option<usize>; 3],
}

fn slot(ns: Namespace) -> usize {
    match ns {
        Namespace::Composition => 0,
        Namespace::State => 1,
        Namespace::Object => 2,
    }
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut push = |name: String| {
            names.push(name);
            names.len() - 1
        };
        let mut prompts = [None; 3];
        let mut keys = [None; 3];
        for ns in cfg.pools.namespaces() {
            prompts[slot(ns)] = Some(push(format!("prompts.{ns}")));
            keys[slot(ns)] = Some(push(format!("keys.{ns}")));
        }
        let injection = (cfg.injection != Injection::None).then(|| {
            [
                push("injection.w_q".into()),
                push("injection.w_k".into()),
                push("injection.w_v".into()),
            ]
        });
        let eta = (cfg.fusion == Fusion::Gem).then(|| push("gem.raw".into()));
        let mut head_w = [None; 3];
        let mut head_b = [None; 3];
        for ns in cfg.pools.namespaces() {
            head_w[slot(ns)] = Some(push(format!("head.{ns}.weight")));
            head_b[slot(ns)] = Some(push(format!("head.{ns}.bias")));
        }
        Self {
            names,
            prompts,
            keys,
            injection,
            eta,
            head_w,
            head_b,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn prompts(&self, ns: Namespace) -> Option<usize> {
        self.prompts[slot(ns)]
    }

    pub fn keys(&self, ns: Namespace) -> Option<usize> {
        self.keys[slot(ns)]
    }

    pub fn eta(&self) -> Option<usize> {
        self.eta
    }
}

/// Trainable parameters plus optimizer state and the task cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    pub params: Vec<Tensor<T>>,
    pub adam_m: Vec<Vec<T>>,
    pub adam_v: Vec<Vec<T>>,
    pub adam_step: u64,
    /// Compositions trained so far.
    pub seen: Vec<bool>,
    /// Tasks completed.
    pub tasks_done: usize,
}

impl<T: Real> ModelState<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// Per-sample inputs that do not depend on trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<T: Real> {
    /// `q(x)`, `[D]`.
    pub query: Tensor<T>,
    /// `x_e`, `[T + 1, D]`.
    pub embedding: Tensor<T>,
}

/// Tape outputs of one sample.
pub struct SampleOutput<'t, T: Real> {
    pub logits_c: Var<'t, T>,
    pub logits_s: Option<Var<'t, T>>,
    pub logits_o: Option<Var<'t, T>>,
    /// Mean over the composition prompt block of the encoder output, `[D]`.
    pub feature_c: Var<'t, T>,
    /// Query that selected each active pool.
    pub queries: Vec<(Namespace, Var<'t, T>)>,
    pub selections: Vec<(Namespace, SelectionResult)>,
    /// Fused prompt per active pool, as fed to the encoder.
    pub fused: Vec<(Namespace, Var<'t, T>)>,
}

/// Architecture, registry sizes and the frozen encoder. Holds no trainable
/// state.
pub struct Learner<T: Real> {
    pub config: ModelConfig,
    pub encoder: Arc<FrozenEncoder<T>>,
    pub registry: LabelRegistry,
    layout: ParamLayout,
}

impl<T: Real> Learner<T> {
    pub fn new(config: ModelConfig, encoder: Arc<FrozenEncoder<T>>, registry: LabelRegistry) -> Result<Self> {
        config.validate(encoder.config().prompt_capacity)?;
        if registry.n_compositions() < 2 {
            return Err(Error::Config("at least two compositions are needed".into()));
        }
        let layout = ParamLayout::new(&config);
        Ok(Self {
            config,
            encoder,
            registry,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn classes(&self, ns: Namespace) -> usize {
        match ns {
            Namespace::Composition => self.registry.n_compositions(),
            Namespace::State => self.registry.n_states(),
            Namespace::Object => self.registry.n_objects(),
        }
    }

    /// Fresh parameters drawn from the model seed.
    pub fn init_state(&self, seed: u64) -> Result<ModelState<T>> {
        let cfg = &self.config;
        let d = self.encoder.embed_dim();
        let mut params: Vec<Option<Tensor<T>>> = vec![None; self.layout.len()];
        let mut prng = rng::stream(seed, streams::PROMPTS);
        for ns in cfg.pools.namespaces() {
            let pool = PromptPool::<T>::random(ns, cfg.pool_size, cfg.prompt_len, d, &mut prng)?;
            params[self.layout.prompts[slot(ns)].expect("active pool")] = Some(pool.prompts);
            params[self.layout.keys[slot(ns)].expect("active pool")] = Some(pool.keys);
        }
        if let Some(idx) = self.layout.injection {
            let w = InjectionWeights::<T>::random(d, &mut rng::stream(seed, streams::INJECTION))?;
            for (i, t) in idx.into_iter().zip([w.w_q, w.w_k, w.w_v]) {
                params[i] = Some(t);
            }
        }
        if let Some(i) = self.layout.eta {
            params[i] = Some(Tensor::scalar(T::lit(GemParam::from_eta(cfg.eta_init)?.raw)));
        }
        let mut hrng = rng::stream(seed, streams::HEADS);
        for ns in cfg.pools.namespaces() {
            let n = self.classes(ns);
            let w: Vec<f64> = (0..d * n)
                .map(|_| rng::trunc_normal(&mut hrng, cfg.head_std))
                .collect();
            params[self.layout.head_w[slot(ns)].expect("active head")] = Some(Tensor::from_f64([d, n], &w)?);
            params[self.layout.head_b[slot(ns)].expect("active head")] = Some(Tensor::zeros([n]));
        }
        let params: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| p.expect("every slot initialized"))
            .collect();
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Ok(ModelState {
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            adam_step: 0,
            seen: vec![false; self.registry.n_compositions()],
            tasks_done: 0,
        })
    }

    /// Checks that `state` was built for this learner.
    pub fn check_state(&self, state: &ModelState<T>) -> Result<()> {
        if state.params.len() != self.layout.len() {
            return Err(Error::dim("parameter arrays", self.layout.len(), state.params.len()));
        }
        if state.seen.len() != self.registry.n_compositions() {
            return Err(Error::dim("seen mask", self.registry.n_compositions(), state.seen.len()));
        }
        Ok(())
    }

    /// Computes `q(x)` and `x_e` for an image.
    pub fn features(&self, image: &Tensor<T>) -> Result<Features<T>> {
        let tape = Tape::new();
        let x_e = self.encoder.embed(&tape, image)?;
        let query = self.encoder.extract_query(&tape, image)?;
        Ok(Features {
            query: (*query.value()).clone(),
            embedding: (*x_e.value()).clone(),
        })
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, state: &ModelState<T>) -> Vec<Var<'t, T>> {
        state
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().trainable()))
            .collect()
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>, state: &ModelState<T>) -> Vec<Var<'t, T>> {
        state.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Prompt arrays `[M, L, D]` of the active pools.
    pub fn pool_vars<'t>(&self, vars: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
        self.config
            .pools
            .namespaces()
            .into_iter()
            .map(|ns| vars[self.layout.prompts[slot(ns)].expect("active pool")])
            .collect()
    }

    fn select_and_fuse<'t>(
        &self,
        vars: &[Var<'t, T>],
        ns: Namespace,
        query: Var<'t, T>,
        eta: Option<Var<'t, T>>,
    ) -> Result<(SelectionResult, Var<'t, T>)> {
        let keys = vars[self.layout.keys[slot(ns)].expect("active pool")];
        let prompts = vars[self.layout.prompts[slot(ns)].expect("active pool")];
        let sel = prompts::select_topk(&keys.value(), query.value().data(), self.config.top_k)?;
        let chosen = prompts.select_rows(&sel.indices)?;
        let fused = prompts::fuse(chosen, self.config.fusion, eta)?;
        Ok((sel, fused))
    }

    /// Full forward pass for one sample.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        features: &Features<T>,
    ) -> Result<SampleOutput<'t, T>> {
        let cfg = &self.config;
        let q = tape.constant(features.query.clone());
        let eta = self.layout.eta.map(|i| GemParam::eta_var(vars[i]));
        let inj = self.layout.injection.map(|[a, b, c]| (vars[a], vars[b], vars[c]));

        let mut queries = vec![(Namespace::Composition, q)];
        let mut selections = Vec::new();
        let mut fused = Vec::new();
        let (sel_c, p_c) = self.select_and_fuse(vars, Namespace::Composition, q, eta)?;
        selections.push((Namespace::Composition, sel_c));
        fused.push((Namespace::Composition, p_c));

        let mut store = |ns, query, sel, p| {
            queries.push((ns, query));
            selections.push((ns, sel));
            fused.push((ns, p));
        };
        match cfg.injection {
            Injection::None => {
                for ns in [Namespace::State, Namespace::Object] {
                    if cfg.pools.has(ns) {
                        let (sel, p) = self.select_and_fuse(vars, ns, q, eta)?;
                        store(ns, q, sel, p);
                    }
                }
            }
            Injection::ObjectToState => {
                let (wq, wk, wv) = inj.expect("injection weights bound");
                let (sel_o, p_o) = self.select_and_fuse(vars, Namespace::Object, q, eta)?;
                let q_s = nonzero_or(prompts::inject_object(q, p_o, wq, wk, wv)?, q);
                let (sel_s, p_s) = self.select_and_fuse(vars, Namespace::State, q_s, eta)?;
                store(Namespace::State, q_s, sel_s, p_s);
                store(Namespace::Object, q, sel_o, p_o);
            }
            Injection::StateToObject => {
                let (wq, wk, wv) = inj.expect("injection weights bound");
                let (sel_s, p_s) = self.select_and_fuse(vars, Namespace::State, q, eta)?;
                let q_o = nonzero_or(prompts::inject_object(q, p_s, wq, wk, wv)?, q);
                let (sel_o, p_o) = self.select_and_fuse(vars, Namespace::Object, q_o, eta)?;
                store(Namespace::State, q, sel_s, p_s);
                store(Namespace::Object, q_o, sel_o, p_o);
            }
        }

        let mut parts: Vec<Var<'t, T>> = fused.iter().map(|(_, p)| *p).collect();
        parts.push(tape.constant(features.embedding.clone()));
        let x_p = tape.concat_rows(&parts)?;
        let out = self.encoder.encode_extended(tape, x_p, cfg.prompt_tokens())?;

        let l = cfg.prompt_len;
        let mut logits = [None, None, None];
        let mut feature_c = None;
        for (block, (ns, _)) in fused.iter().enumerate() {
            let pooled = out.slice_rows(block * l, (block + 1) * l)?.mean_axis0()?;
            let w = vars[self.layout.head_w[slot(*ns)].expect("active head")];
            let b = vars[self.layout.head_b[slot(*ns)].expect("active head")];
            logits[slot(*ns)] = Some(pooled.matmul(&w)?.add(&b)?);
            if *ns == Namespace::Composition {
                feature_c = Some(pooled);
            }
        }
        Ok(SampleOutput {
            logits_c: logits[0].expect("composition head"),
            logits_s: logits[1],
            logits_o: logits[2],
            feature_c: feature_c.expect("composition block"),
            queries,
            selections,
            fused,
        })
    }

    /// Class scores, predicted labels and the composition feature for one
    /// sample, restricted to compositions marked in `seen`.
    pub fn predict(&self, state: &ModelState<T>, features: &Features<T>, mu: f64) -> Result<Prediction> {
        if mu < 0.0 || !mu.is_finite() {
            return Err(Error::Invalid(format!("fusion weight mu = {mu}")));
        }
        if !state.seen.iter().any(|&s| s) {
            return Err(Error::Invalid("prediction before any task was trained".into()));
        }
        let tape = Tape::new();
        let vars = self.bind_frozen(&tape, state);
        let out = self.forward(&tape, &vars, features)?;
        let logits_c = out.logits_c.value().to_f64_vec();
        let p_c = softmax_masked(&logits_c, &state.seen);
        let p_s = out.logits_s.map(|v| softmax_masked(&v.value().to_f64_vec(), &[]));
        let p_o = out.logits_o.map(|v| softmax_masked(&v.value().to_f64_vec(), &[]));
        let scores = fuse_probabilities(&p_c, p_s.as_deref(), p_o.as_deref(), &self.registry, &state.seen, mu)?;
        let composition = argmax(&scores);
        let head_c = argmax(&masked(&logits_c, &state.seen));
        Ok(Prediction {
            scores,
            composition,
            head_composition: head_c,
            state: self.registry.state_of(composition),
            object: self.registry.object_of(composition),
            feature_c: out.feature_c.value().to_f64_vec(),
        })
    }
}

/// An injected query is all zeros only when the fused prompt it attends
/// over is; selection then falls back to the plain query.
fn nonzero_or<'t, T: Real>(injected: Var<'t, T>, fallback: Var<'t, T>) -> Var<'t, T> {
    if injected.value().data().iter().all(|x| *x == T::zero()) {
        fallback
    } else {
        injected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Fused composition scores; unseen compositions hold `-inf`.
    pub scores: Vec<f64>,
    pub composition: usize,
    /// Argmax of the composition head alone.
    pub head_composition: usize,
    /// Primitives of `composition`; every method reads them out this way.
    pub state: usize,
    pub object: usize,
    pub feature_c: Vec<f64>,
}

fn masked(values: &[f64], keep: &[bool]) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep.is_empty() || keep[i] { v } else { f64::NEG_INFINITY })
        .collect()
}

/// Softmax over the entries with `keep[i]` (all entries when `keep` is
/// empty); the rest get probability 0.
pub fn softmax_masked(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let z = masked(logits, keep);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `p(c) + μ (p(s_c) + p(o_c))` for seen compositions, `-inf` elsewhere.
/// Absent primitive heads contribute nothing.
pub fn fuse_probabilities(
    p_c: &[f64],
    p_s: Option<&[f64]>,
    p_o: Option<&[f64]>,
    registry: &LabelRegistry,
    seen: &[bool],
    mu: f64,
) -> Result<Vec<f64>> {
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::Invalid(format!("fusion weight mu = {mu}")));
    }
    let n = registry.n_compositions();
    if p_c.len() != n || seen.len() != n {
        return Err(Error::dim("composition probabilities", n, p_c.len()));
    }
    if p_s.is_some_and(|p| p.len() != registry.n_states()) {
        return Err(Error::dim("state probabilities", registry.n_states(), p_s.map_or(0, <[f64]>::len)));
    }
    if p_o.is_some_and(|p| p.len() != registry.n_objects()) {
        return Err(Error::dim("object probabilities", registry.n_objects(), p_o.map_or(0, <[f64]>::len)));
    }
    Ok((0..n)
        .map(|c| {
            if !seen[c] {
                return f64::NEG_INFINITY;
            }
            let prim = p_s.map_or(0.0, |p| p[registry.state_of(c)]) + p_o.map_or(0.0, |p| p[registry.object_of(c)]);
            p_c[c] + mu * prim
        })
        .collect())
}
