use super::config::TrainConfig;
use super::model::{Features, Learner, ModelState};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, SurrogateTerm};
use crate::rng::{self, streams};
use crate::tensor::{Real, Tape, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One training or test sample with its labels and cached features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<T: Real> {
    pub id: String,
    pub composition: usize,
    pub state: usize,
    pub object: usize,
    pub features: Features<T>,
}

/// Loss components summed over a batch, as plain numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub inter: f64,
    pub intra: f64,
    pub surrogate: f64,
    pub sce_c: f64,
    pub sce_s: f64,
    pub sce_o: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.total += w * o.total;
        self.inter += w * o.inter;
        self.intra += w * o.intra;
        self.surrogate += w * o.surrogate;
        self.sce_c += w * o.sce_c;
        self.sce_s += w * o.sce_s;
        self.sce_o += w * o.sce_o;
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub batches: usize,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

/// The training objective of one batch, recorded on `tape`.
pub fn batch_objective<'t, T: Real>(
    learner: &Learner<T>,
    tape: &'t Tape<T>,
    vars: &[Var<'t, T>],
    batch: &[&LabeledSample<T>],
    keep_c: &[bool],
    cfg: &TrainConfig,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let tg = &cfg.toggles;
    let w = &cfg.weights;
    let pools = learner.pool_vars(vars);
    let (inter, intra) = if tg.inter || tg.intra {
        losses::inter_intra(&pools, &cfg.dd)?
    } else {
        (tape.scalar(0.0), tape.scalar(0.0))
    };
    let inter = if tg.inter { inter } else { tape.scalar(0.0) };
    let intra = if tg.intra { intra } else { tape.scalar(0.0) };

    let ce_w = if tg.ce { 1.0 } else { 0.0 };
    let alpha = if tg.rce { w.alpha } else { 0.0 };
    let scale = 1.0 / batch.len() as f64;
    let mut sur = tape.scalar(0.0);
    let mut sce_c = tape.scalar(0.0);
    let mut sce_s = None::<Var<'t, T>>;
    let mut sce_o = None::<Var<'t, T>>;
    let layout = learner.layout();
    let acc = |slot: &mut Option<Var<'t, T>>, v: Var<'t, T>| -> Result<()> {
        *slot = Some(match slot {
            Some(s) => s.add(&v)?,
            None => v,
        });
        Ok(())
    };
    for s in batch {
        let out = learner.forward(tape, vars, &s.features)?;
        let terms: Vec<SurrogateTerm<'_, 't, T>> = out
            .selections
            .iter()
            .map(|(ns, sel)| {
                let query = out
                    .queries
                    .iter()
                    .find(|(n, _)| n == ns)
                    .map(|(_, q)| *q)
                    .expect("query per selection");
                SurrogateTerm {
                    query,
                    keys: vars[layout.keys(*ns).expect("active pool")],
                    selection: sel,
                }
            })
            .collect();
        sur = sur.add(&losses::surrogate_loss(&terms)?.scale(scale))?;
        let c = losses::sce_terms(out.logits_c, s.composition, Some(keep_c), ce_w, alpha, w.rce_floor)?;
        sce_c = sce_c.add(&c.scale(scale))?;
        if let Some(l) = out.logits_s {
            acc(&mut sce_s, losses::sce_terms(l, s.state, None, ce_w, alpha, w.rce_floor)?.scale(scale))?;
        }
        if let Some(l) = out.logits_o {
            acc(&mut sce_o, losses::sce_terms(l, s.object, None, ce_w, alpha, w.rce_floor)?.scale(scale))?;
        }
    }
    let parts = LossParts {
        inter,
        intra,
        surrogate: sur,
        sce_c,
        sce_s,
        sce_o,
    };
    let total = losses::total_loss(&parts, w)?;
    let v = |x: &Var<'t, T>| x.item().f64();
    let breakdown = LossBreakdown {
        total: v(&total),
        inter: v(&inter),
        intra: v(&intra),
        surrogate: v(&sur),
        sce_c: v(&sce_c),
        sce_s: sce_s.as_ref().map_or(0.0, v),
        sce_o: sce_o.as_ref().map_or(0.0, v),
    };
    Ok((total, breakdown))
}

/// Seed of the shuffle for `(task, epoch)`.
fn shuffle_seed(seed: u64, task: usize, epoch: usize) -> u64 {
    seed ^ ((task as u64) << 32) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains on one task. `samples` is the task's training split and nothing
/// else; `compositions` are the task's classes, the only composition logits
/// left unmasked. Adam moments restart at the beginning of every task.
pub fn train_task<T: Real>(
    learner: &Learner<T>,
    state: &mut ModelState<T>,
    compositions: &[usize],
    samples: &[LabeledSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    learner.check_state(state)?;
    if samples.is_empty() || compositions.is_empty() {
        return Err(Error::Invalid("empty task".into()));
    }
    let n_c = learner.registry.n_compositions();
    let mut keep = vec![false; n_c];
    for &c in compositions {
        if c >= n_c {
            return Err(Error::Invalid(format!("composition {c} outside registry")));
        }
        if state.seen[c] {
            return Err(Error::Protocol(format!(
                "composition {} was already trained",
                learner.registry.name(c)
            )));
        }
        keep[c] = true;
    }
    if let Some(s) = samples.iter().find(|s| !keep[s.composition]) {
        return Err(Error::Protocol(format!("sample {} is not from this task", s.id)));
    }
    let task = state.tasks_done;
    for (m, v) in state.adam_m.iter_mut().zip(state.adam_v.iter_mut()) {
        m.iter_mut().for_each(|x| *x = T::zero());
        v.iter_mut().for_each(|x| *x = T::zero());
    }
    state.adam_step = 0;

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(shuffle_seed(cfg.seed, task, epoch), streams::SHUFFLE));
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let tape = Tape::new();
            let vars = learner.bind(&tape, state);
            let (total, parts) = batch_objective(learner, &tape, &vars, &batch, &keep, cfg)?;
            if !parts.total.is_finite() {
                tape.check_finite().map_err(|e| {
                    Error::Training(format!("task {} epoch {} non-finite loss: {e}", task + 1, epoch + 1))
                })?;
                return Err(Error::Training(format!(
                    "task {} epoch {} non-finite loss {parts:?}",
                    task + 1,
                    epoch + 1
                )));
            }
            let grads = tape.backward(total)?;
            let g: Vec<Vec<T>> = vars.iter().map(|v| grads.get(v).into_data()).collect();
            adam_step(state, &g, cfg);
            sum.add_scaled(&parts, 1.0);
            batches += 1;
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&sum, 1.0 / batches as f64);
        log::debug!("task {} epoch {} loss {:.5}", task + 1, epoch + 1, mean.total);
        log.push(EpochRecord {
            task: task + 1,
            epoch: epoch + 1,
            batches,
            loss: mean,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    for &c in compositions {
        state.seen[c] = true;
    }
    state.tasks_done += 1;
    Ok(log)
}

fn adam_step<T: Real>(state: &mut ModelState<T>, grads: &[Vec<T>], cfg: &TrainConfig) {
    state.adam_step += 1;
    let t = state.adam_step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step = T::lit(cfg.lr * c2.sqrt() / c1);
    let eps = T::lit(cfg.adam_eps * c2.sqrt());
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (((p, m), v), g) in state
        .params
        .iter_mut()
        .zip(&mut state.adam_m)
        .zip(&mut state.adam_v)
        .zip(grads)
    {
        for (((x, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *x = *x - step * *m / (v.sqrt() + eps);
        }
    }
}

/// Correct-prediction counts on one test split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub composition: usize,
    pub state: usize,
    pub object: usize,
}

impl Counts {
    fn merge(self, o: Counts) -> Counts {
        Counts {
            total: self.total + o.total,
            composition: self.composition + o.composition,
            state: self.state + o.state,
            object: self.object + o.object,
        }
    }

    pub fn accuracy(&self) -> (f64, f64, f64) {
        let n = self.total.max(1) as f64;
        (
            self.composition as f64 / n,
            self.state as f64 / n,
            self.object as f64 / n,
        )
    }
}

/// Evaluates `samples` in parallel; counts are merged by summation so the
/// result does not depend on scheduling.
pub fn evaluate<T: Real>(
    learner: &Learner<T>,
    state: &ModelState<T>,
    samples: &[LabeledSample<T>],
    mu: f64,
) -> Result<Counts> {
    samples
        .par_iter()
        .map(|s| {
            let p = learner.predict(state, &s.features, mu)?;
            Ok(Counts {
                total: 1,
                composition: usize::from(p.composition == s.composition),
                state: usize::from(p.state == s.state),
                object: usize::from(p.object == s.object),
            })
        })
        .try_reduce(Counts::default, |a, b| Ok(a.merge(b)))
}
