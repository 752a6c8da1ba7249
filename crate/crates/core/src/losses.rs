//! Training objectives: directional decoupling between prompts, the
//! query-key surrogate and symmetric cross-entropy.

use crate::error::{Error, Result};
use crate::prompts::{SelectionResult, COS_EPS};
use crate::tensor::{Real, Tensor, Var, ACOS_GRAD_CLAMP};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DDConfig {
    /// Minimum angle between prompts, in radians.
    pub theta_thre: f64,
    pub epsilon: f64,
}

impl Default for DDConfig {
    fn default() -> Self {
        Self {
            theta_thre: FRAC_PI_2,
            epsilon: 1e-6,
        }
    }
}

impl DDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_thre > 0.0 && self.theta_thre <= std::f64::consts::PI) {
            return Err(Error::Config(format!("theta_thre = {} outside (0, pi]", self.theta_thre)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon = {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Stand-in for `log 0` in the reverse cross-entropy.
    pub rce_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.006,
            beta: 0.3,
            lambda1: 0.1,
            lambda2: 1e-7,
            lambda3: 0.1,
            rce_floor: -4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} = {w} must be a non-negative number")));
            }
        }
        if !(self.rce_floor < 0.0 && self.rce_floor.is_finite()) {
            return Err(Error::Config(format!("rce_floor = {} must be negative", self.rce_floor)));
        }
        Ok(())
    }
}

fn flatten<'t, T: Real>(pool: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = pool.shape();
    if s.len() < 2 {
        return Err(Error::dim("prompt set", "[M, ...]", format!("{s:?}")));
    }
    Ok(pool.reshape(&[s[0], s[1..].iter().product()])?)
}

/// `2/(M(M-1)) Σ_n Σ_m max(0, θ_thre − θ_nm)` over the angles between the
/// flattened prompts of `a` and `b`. With `same_pool` the diagonal is
/// skipped.
pub fn dd_loss<'t, T: Real>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    cfg: &DDConfig,
    same_pool: bool,
) -> Result<Var<'t, T>> {
    let tape = a.tape();
    let (fa, fb) = (flatten(a)?, flatten(b)?);
    let (sa, sb) = (fa.shape(), fb.shape());
    if sa != sb {
        return Err(Error::dim("paired prompt sets", format!("{sa:?}"), format!("{sb:?}")));
    }
    let m = sa[0];
    if m < 2 {
        log::warn!("decoupling loss over a pool of {m} prompt(s) has no pairs; returning 0");
        return Ok(tape.scalar(0.0));
    }
    let theta = pairwise_angles(fa, fb, cfg.epsilon)?;
    let mut hinge = theta.neg().add_scalar(cfg.theta_thre).relu();
    if same_pool {
        let mut mask = Tensor::<T>::full([m, m], T::one());
        for i in 0..m {
            mask.data_mut()[i * m + i] = T::zero();
        }
        hinge = hinge.mul(&tape.constant(mask))?;
    }
    Ok(hinge.sum().scale(2.0 / (m * (m - 1)) as f64))
}

/// Angles `acos(a_i·b_j / (max(|a_i|, ε) max(|b_j|, ε)))` between the rows of
/// `a [M, F]` and `b [N, F]`, as `[M, N]`. When both norms clear `ε` the
/// angle is evaluated as `2 atan2(|â − b̂|, |â + b̂|)`, which stays accurate
/// for nearly parallel rows.
pub fn pairwise_angles<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
        return Err(Error::dim(
            "angle operands",
            "[M, F] and [N, F]",
            format!("{:?} and {:?}", av.shape(), bv.shape()),
        ));
    }
    let (m, n, f) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
    if f == 0 {
        return Err(Error::Invalid("angles between empty vectors".into()));
    }
    let ad = av.to_f64_vec();
    let bd = bv.to_f64_vec();
    let (na, nb) = (row_norms(&ad, f), row_norms(&bd, f));
    let mut theta = vec![0.0; m * n];
    for i in 0..m {
        let ai = &ad[i * f..(i + 1) * f];
        for j in 0..n {
            let bj = &bd[j * f..(j + 1) * f];
            theta[i * n + j] = if na[i] >= eps && nb[j] >= eps {
                let (mut diff, mut sum) = (0.0, 0.0);
                for (x, y) in ai.iter().zip(bj) {
                    let (u, v) = (x / na[i], y / nb[j]);
                    diff += (u - v) * (u - v);
                    sum += (u + v) * (u + v);
                }
                2.0 * diff.sqrt().atan2(sum.sqrt())
            } else {
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                (dot / (na[i].max(eps) * nb[j].max(eps))).clamp(-1.0, 1.0).acos()
            };
        }
    }
    let value = Tensor::from_f64([m, n], &theta)?;
    let backward: crate::tensor::BackwardFn<T> = Box::new(move |inputs, _, g| {
        let ad = inputs[0].to_f64_vec();
        let bd = inputs[1].to_f64_vec();
        let (na, nb) = (row_norms(&ad, f), row_norms(&bd, f));
        let mut ga = vec![0.0; m * f];
        let mut gb = vec![0.0; n * f];
        let lim = ACOS_GRAD_CLAMP;
        for i in 0..m {
            let ai = &ad[i * f..(i + 1) * f];
            let sa = na[i].max(eps);
            for j in 0..n {
                let gij = g[i * n + j].f64();
                if gij == 0.0 {
                    continue;
                }
                let bj = &bd[j * f..(j + 1) * f];
                let sb = nb[j].max(eps);
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                let c = dot / (sa * sb);
                let cc = c.clamp(-lim, lim);
                let w = -gij / (1.0 - cc * cc).sqrt();
                let ra = if na[i] >= eps { c / (na[i] * na[i]) } else { 0.0 };
                let rb = if nb[j] >= eps { c / (nb[j] * nb[j]) } else { 0.0 };
                for k in 0..f {
                    ga[i * f + k] += w * (bj[k] / (sa * sb) - ra * ai[k]);
                    gb[j * f + k] += w * (ai[k] / (sa * sb) - rb * bj[k]);
                }
            }
        }
        vec![
            ga.into_iter().map(T::lit).collect(),
            gb.into_iter().map(T::lit).collect(),
        ]
    });
    Ok(a.tape().custom(&[a, b], value, backward))
}

fn row_norms(d: &[f64], cols: usize) -> Vec<f64> {
    d.chunks_exact(cols)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Inter-pool loss over every unordered pair of `pools` and intra-pool loss
/// summed over each pool.
pub fn inter_intra<'t, T: Real>(
    pools: &[Var<'t, T>],
    cfg: &DDConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let first = pools
        .first()
        .ok_or_else(|| Error::Invalid("no prompt pools".into()))?;
    let tape = first.tape();
    let mut inter = tape.scalar(0.0);
    let mut intra = tape.scalar(0.0);
    for (i, &p) in pools.iter().enumerate() {
        intra = intra.add(&dd_loss(p, p, cfg, true)?)?;
        for &q in &pools[i + 1..] {
            inter = inter.add(&dd_loss(p, q, cfg, false)?)?;
        }
    }
    Ok((inter, intra))
}

/// One namespace's contribution to the surrogate: its query `[D]`, its key
/// matrix `[M, D]` and the keys selected for the query.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateTerm<'a, 't, T: Real> {
    pub query: Var<'t, T>,
    pub keys: Var<'t, T>,
    pub selection: &'a SelectionResult,
}

/// `Σ_ω Σ_i (1 − cos(q_ω, K_ω[s_i]))`.
pub fn surrogate_loss<'t, T: Real>(terms: &[SurrogateTerm<'_, 't, T>]) -> Result<Var<'t, T>> {
    let first = terms
        .first()
        .ok_or_else(|| Error::Invalid("surrogate loss over no namespaces".into()))?;
    let mut total = first.query.tape().scalar(0.0);
    for t in terms {
        let idx = &t.selection.indices;
        if idx.is_empty() {
            return Err(Error::Invalid("surrogate loss over an empty selection".into()));
        }
        let sel = t.keys.select_rows(idx)?;
        let dots = t.query.matmul(&sel.transpose()?)?;
        let kn = sel.norm()?.clamp(COS_EPS, f64::INFINITY);
        let qn = t.query.norm()?.clamp(COS_EPS, f64::INFINITY);
        let cos = dots.div(&kn)?.div(&qn)?;
        total = total.add(&cos.sum().neg().add_scalar(idx.len() as f64))?;
    }
    Ok(total)
}

/// `CE + α·RCE` for a single sample, where `RCE = −A(1 − p_label)`.
/// Entries with `keep[i] == false` are excluded from the softmax.
pub fn sce_loss<'t, T: Real>(
    logits: Var<'t, T>,
    label: usize,
    keep: Option<&[bool]>,
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    sce_terms(logits, label, keep, 1.0, weights.alpha, weights.rce_floor)
}

/// Symmetric cross-entropy with a separate weight on the CE part, so either
/// part can be switched off.
pub fn sce_terms<'t, T: Real>(
    logits: Var<'t, T>,
    label: usize,
    keep: Option<&[bool]>,
    ce_weight: f64,
    alpha: f64,
    rce_floor: f64,
) -> Result<Var<'t, T>> {
    let v = logits.value();
    if v.rank() != 1 || v.len() < 2 {
        return Err(Error::dim("logits", "[classes >= 2]", format!("{:?}", v.shape())));
    }
    if label >= v.len() {
        return Err(Error::Invalid(format!("label {label} of {} classes", v.len())));
    }
    if !v.is_finite() {
        return Err(Error::Invalid("non-finite logits".into()));
    }
    let logits = match keep {
        Some(keep) => {
            if !keep[label] {
                return Err(Error::Invalid(format!("label {label} is masked out")));
            }
            logits.mask_fill(keep)?
        }
        None => logits,
    };
    let logp = logits.log_softmax()?.index(label)?;
    let ce = logp.neg().scale(ce_weight);
    let rce = logp.exp().neg().add_scalar(1.0).scale(-rce_floor * alpha);
    Ok(ce.add(&rce)?)
}

/// Components of the training objective for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t, T: Real> {
    pub inter: Var<'t, T>,
    pub intra: Var<'t, T>,
    pub surrogate: Var<'t, T>,
    pub sce_c: Var<'t, T>,
    pub sce_s: Option<Var<'t, T>>,
    pub sce_o: Option<Var<'t, T>>,
}

/// `λ1·inter + λ2·intra + λ3·sur + SCE_c + β(SCE_s + SCE_o)`.
pub fn total_loss<'t, T: Real>(parts: &LossParts<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let mut total = parts
        .inter
        .scale(w.lambda1)
        .add(&parts.intra.scale(w.lambda2))?
        .add(&parts.surrogate.scale(w.lambda3))?
        .add(&parts.sce_c)?;
    for p in [parts.sce_s, parts.sce_o].into_iter().flatten() {
        total = total.add(&p.scale(w.beta))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use std::f64::consts::PI;

    fn scalar_of(f: impl for<'t> Fn(&'t Tape<f64>) -> Result<Var<'t, f64>>) -> f64 {
        let tape = Tape::new();
        f(&tape).unwrap().item()
    }

    fn pool<'t>(tape: &'t Tape<f64>, shape: &[usize], data: &[f64]) -> Var<'t, f64> {
        tape.constant(Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn orthogonal_pools_cost_nothing() {
        let v = scalar_of(|t| {
            let a = pool(t, &[2, 1, 4], &[1., 0., 0., 0., 0., 1., 0., 0.]);
            let b = pool(t, &[2, 1, 4], &[0., 0., 1., 0., 0., 0., 0., 1.]);
            dd_loss(a, b, &DDConfig::default(), false)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn identical_prompts_within_a_pool() {
        let v = scalar_of(|t| {
            let a = pool(t, &[2, 1, 2], &[1., 2., 1., 2.]);
            dd_loss(a, a, &DDConfig::default(), true)
        });
        assert!((v - PI).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identical_pools_across_pools() {
        let v = scalar_of(|t| {
            let a = pool(t, &[2, 1, 2], &[1., 2., 1., 2.]);
            let b = pool(t, &[2, 1, 2], &[1., 2., 1., 2.]);
            dd_loss(a, b, &DDConfig::default(), false)
        });
        assert!((v - 2.0 * PI).abs() < 1e-12, "{v}");
    }

    #[test]
    fn single_prompt_pool_is_zero() {
        let v = scalar_of(|t| {
            let a = pool(t, &[1, 1, 2], &[1., 2.]);
            dd_loss(a, a, &DDConfig::default(), true)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mismatched_pools_rejected() {
        let tape = Tape::<f64>::new();
        let a = pool(&tape, &[2, 1, 2], &[1., 2., 1., 2.]);
        let b = pool(&tape, &[3, 1, 2], &[1., 2., 1., 2., 0., 1.]);
        assert!(dd_loss(a, b, &DDConfig::default(), false).is_err());
    }

    #[test]
    fn zero_prompt_uses_the_guard() {
        let v = scalar_of(|t| {
            let a = pool(t, &[2, 1, 2], &[0., 0., 1., 0.]);
            dd_loss(a, a, &DDConfig::default(), true)
        });
        assert!(v.is_finite() && v == 0.0, "{v}");
    }

    #[test]
    fn surrogate_aligned_and_orthogonal() {
        let sel = SelectionResult {
            indices: vec![0, 1],
            similarities: vec![1.0, 0.0],
        };
        let v = scalar_of(|t| {
            let q = pool(t, &[2], &[2., 0.]);
            let k = pool(t, &[2, 2], &[5., 0., 0., 3.]);
            surrogate_loss(&[SurrogateTerm {
                query: q,
                keys: k,
                selection: &sel,
            }])
        });
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn surrogate_rejects_empty_selection() {
        let sel = SelectionResult {
            indices: vec![],
            similarities: vec![],
        };
        let tape = Tape::<f64>::new();
        let q = pool(&tape, &[2], &[2., 0.]);
        let k = pool(&tape, &[2, 2], &[5., 0., 0., 3.]);
        let term = SurrogateTerm {
            query: q,
            keys: k,
            selection: &sel,
        };
        assert!(surrogate_loss(&[term]).is_err());
    }

    fn logits_for_p(p: f64, classes: usize) -> Vec<f64> {
        // label 0 gets probability p, the rest share 1 - p
        let rest = (1.0 - p) / (classes - 1) as f64;
        let mut v = vec![rest.ln(); classes];
        v[0] = p.ln();
        v
    }

    #[test]
    fn sce_worked_example() {
        let w = LossWeights {
            alpha: 1.0,
            rce_floor: -4.0,
            ..LossWeights::default()
        };
        let v = scalar_of(|t| sce_loss(pool(t, &[4], &logits_for_p(0.75, 4)), 0, None, &w));
        assert!((v - (-(0.75f64).ln() + 1.0)).abs() < 1e-12, "{v}");
        assert!((v - 1.2877).abs() < 1e-4);
    }

    #[test]
    fn sce_uniform_is_ln_classes() {
        let w = LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        };
        let v = scalar_of(|t| sce_loss(pool(t, &[4], &[0.3; 4]), 2, None, &w));
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sce_confident_is_zero_without_rce() {
        let w = LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        };
        let v = scalar_of(|t| sce_loss(pool(t, &[3], &[60.0, -60.0, -60.0]), 0, None, &w));
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn sce_mask_removes_classes() {
        let w = LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        };
        let keep = [true, false, true, false];
        let v = scalar_of(|t| sce_loss(pool(t, &[4], &[0.0, 9.0, 0.0, 9.0]), 0, Some(&keep), &w));
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sce_rejects_bad_input() {
        let w = LossWeights::default();
        let tape = Tape::<f64>::new();
        let l = pool(&tape, &[2], &[f64::NAN, 0.0]);
        assert!(sce_loss(l, 0, None, &w).is_err());
        let l = pool(&tape, &[2], &[0.0, 0.0]);
        assert!(sce_loss(l, 2, None, &w).is_err());
        let l = pool(&tape, &[1], &[0.0]);
        assert!(sce_loss(l, 0, None, &w).is_err());
    }

    #[test]
    fn total_reduces_to_composition_ce() {
        let w = LossWeights {
            beta: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        };
        let v = scalar_of(|t| {
            let parts = LossParts {
                inter: t.scalar(3.0),
                intra: t.scalar(5.0),
                surrogate: t.scalar(7.0),
                sce_c: t.scalar(1.25),
                sce_s: Some(t.scalar(11.0)),
                sce_o: Some(t.scalar(13.0)),
            };
            total_loss(&parts, &w)
        });
        assert_eq!(v, 1.25);
    }

    #[test]
    fn total_of_zero_parts_is_zero() {
        let v = scalar_of(|t| {
            let z = t.scalar(0.0);
            let parts = LossParts {
                inter: z,
                intra: z,
                surrogate: z,
                sce_c: z,
                sce_s: Some(z),
                sce_o: None,
            };
            total_loss(&parts, &LossWeights::default())
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dd_gradient_reaches_both_pools() {
        let a = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 0.2, 0.9, 0.1]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 0.4, 0.3, 1.0]).unwrap();
        let tape = Tape::new();
        let va = tape.leaf(a.trainable());
        let vb = tape.leaf(b.trainable());
        let loss = dd_loss(va, vb, &DDConfig::default(), false).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&va).data().iter().any(|x| *x != 0.0));
        assert!(g.get(&vb).data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn dd_gradients_match_finite_differences() {
        use crate::tensor::check_gradients;
        let mut rng = crate::rng::stream(11, 0);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect()
        };
        let a = Tensor::<f64>::from_f64([3, 2, 3], &draw(18)).unwrap();
        let b = Tensor::<f64>::from_f64([3, 2, 3], &draw(18)).unwrap();
        let cfg = DDConfig {
            theta_thre: PI,
            epsilon: 1e-6,
        };
        let report = check_gradients::<_, Error, _>(
            &[a, b],
            |_, v| {
                let inter = dd_loss(v[0], v[1], &cfg, false)?;
                let intra = dd_loss(v[0], v[0], &cfg, true)?;
                Ok(inter.add(&intra.scale(0.5))?)
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn angle_of_zero_row_is_right_angle() {
        let tape = Tape::<f64>::new();
        let a = pool(&tape, &[1, 2], &[0.0, 0.0]);
        let b = pool(&tape, &[1, 2], &[1.0, 1.0]);
        let t = pairwise_angles(a, b, 1e-6).unwrap().item();
        assert!((t - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            rce_floor: 0.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        assert!(DDConfig {
            theta_thre: 4.0,
            epsilon: 1e-6
        }
        .validate()
        .is_err());
    }
}
