use crate::error::{Error, Result};
use crate::losses::{DDConfig, LossWeights};
use crate::prompts::{Fusion, Namespace};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which prompt pools are active. The composition pool is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSet {
    C,
    Co,
    Cs,
    Cso,
}

impl PoolSet {
    pub fn has(self, ns: Namespace) -> bool {
        match ns {
            Namespace::Composition => true,
            Namespace::State => matches!(self, PoolSet::Cs | PoolSet::Cso),
            Namespace::Object => matches!(self, PoolSet::Co | PoolSet::Cso),
        }
    }

    /// Active namespaces in prompt-sequence order: composition, state, object.
    pub fn namespaces(self) -> Vec<Namespace> {
        [Namespace::Composition, Namespace::State, Namespace::Object]
            .into_iter()
            .filter(|&ns| self.has(ns))
            .collect()
    }
}

impl fmt::Display for PoolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolSet::C => "C",
            PoolSet::Co => "CO",
            PoolSet::Cs => "CS",
            PoolSet::Cso => "CSO",
        })
    }
}

/// Direction of the cross-attention that conditions one primitive query on
/// the other primitive's fused prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    None,
    /// The state query attends over the fused object prompt.
    ObjectToState,
    /// The object query attends over the fused state prompt.
    StateToObject,
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Injection::None => "none",
            Injection::ObjectToState => "object-to-state",
            Injection::StateToObject => "state-to-object",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub ce: bool,
    pub rce: bool,
    pub inter: bool,
    pub intra: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            ce: true,
            rce: true,
            inter: true,
            intra: true,
        }
    }
}

impl fmt::Display for LossToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            (self.ce, "ce"),
            (self.rce, "rce"),
            (self.inter, "inter"),
            (self.intra, "intra"),
        ]
        .into_iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| n)
        .collect();
        f.write_str(&on.join("+"))
    }
}

/// Learner architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pool_size: usize,
    pub prompt_len: usize,
    pub top_k: usize,
    pub pools: PoolSet,
    pub injection: Injection,
    pub fusion: Fusion,
    pub eta_init: f64,
    /// Std of classifier weights at initialization.
    pub head_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pool_size: 20,
            prompt_len: 5,
            top_k: 5,
            pools: PoolSet::Cso,
            injection: Injection::ObjectToState,
            fusion: Fusion::Gem,
            eta_init: 3.0,
            head_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, prompt_capacity: usize) -> Result<()> {
        if self.pool_size == 0 || self.prompt_len == 0 {
            return Err(Error::Config("pool_size and prompt_len must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.pool_size
            )));
        }
        let tokens = self.prompt_tokens();
        if tokens > prompt_capacity {
            return Err(Error::Config(format!(
                "{tokens} prompt tokens exceed the backbone's {prompt_capacity} prompt positions"
            )));
        }
        if self.injection != Injection::None && self.pools != PoolSet::Cso {
            return Err(Error::Config(format!(
                "injection {} needs both primitive pools, pools = {}",
                self.injection, self.pools
            )));
        }
        if self.fusion == Fusion::Gem {
            crate::prompts::GemParam::from_eta(self.eta_init)?;
        }
        if !(self.head_std > 0.0) {
            return Err(Error::Config("head_std must be positive".into()));
        }
        Ok(())
    }

    /// Prompt tokens prepended to the patch sequence.
    pub fn prompt_tokens(&self) -> usize {
        self.pools.namespaces().len() * self.prompt_len
    }
}

/// Optimization and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub dd: DDConfig,
    pub toggles: LossToggles,
    /// Weight of primitive probabilities at inference.
    pub mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Preset::Clothing.train_config()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu = {} must be non-negative", self.mu)));
        }
        if !self.toggles.ce && !self.toggles.rce {
            return Err(Error::Config("both classification terms are switched off".into()));
        }
        self.weights.validate()?;
        self.dd.validate()
    }
}

/// Named hyperparameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Clothing,
    Ut5,
    Ut10,
    /// Scaled for the synthetic benchmark on a single CPU core.
    Desk,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        let (lambda1, lambda2, lambda3, alpha, beta, mu, lr, epochs) = match self {
            Preset::Clothing => (0.1, 1e-7, 0.1, 0.006, 0.3, 0.5, 0.03, 25),
            Preset::Ut5 => (1.0, 3e-6, 0.7, 0.01, 0.7, 0.02, 0.02, 10),
            Preset::Ut10 => (0.5, 1e-7, 0.1, 0.05, 0.4, 0.03, 0.03, 3),
            Preset::Desk => (0.1, 1e-7, 0.1, 0.006, 0.3, 0.5, 0.0003, 15),
        };
        TrainConfig {
            epochs,
            batch_size: 16,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights {
                alpha,
                beta,
                lambda1,
                lambda2,
                lambda3,
                rce_floor: -4.0,
            },
            dd: DDConfig::default(),
            toggles: LossToggles::default(),
            mu,
            seed: 0,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clothing" => Ok(Preset::Clothing),
            "ut5" => Ok(Preset::Ut5),
            "ut10" => Ok(Preset::Ut10),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Named learner variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Three pools, object-to-state injection, GeM fusion, every loss.
    Compiler,
    /// Three pools without injection, GeM fusion, CE only.
    SimCompiler,
    /// Composition pool only, mean fusion, CE only.
    Baseline,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Compiler, Method::SimCompiler, Method::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Method::Compiler => "compiler",
            Method::SimCompiler => "sim-compiler",
            Method::Baseline => "baseline",
        }
    }

    /// Overrides the ablation switches of `model` and `train` for this
    /// method.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        let ce_only = LossToggles {
            ce: true,
            rce: false,
            inter: false,
            intra: false,
        };
        match self {
            Method::Compiler => {
                model.pools = PoolSet::Cso;
                model.injection = Injection::ObjectToState;
                model.fusion = Fusion::Gem;
                train.toggles = LossToggles::default();
            }
            Method::SimCompiler => {
                model.pools = PoolSet::Cso;
                model.injection = Injection::None;
                model.fusion = Fusion::Gem;
                train.toggles = ce_only;
            }
            Method::Baseline => {
                model.pools = PoolSet::C;
                model.injection = Injection::None;
                model.fusion = Fusion::Mean;
                train.toggles = ce_only;
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_weights() {
        let c = Preset::Ut5.train_config();
        assert_eq!(c.weights.lambda1, 1.0);
        assert_eq!(c.weights.lambda2, 3e-6);
        assert_eq!(c.mu, 0.02);
        assert_eq!(c.batch_size, 16);
        assert!(c.validate().is_ok());
        assert_eq!("ut10".parse::<Preset>().unwrap(), Preset::Ut10);
    }

    #[test]
    fn model_defaults() {
        let m = ModelConfig::default();
        assert_eq!((m.pool_size, m.prompt_len, m.top_k), (20, 5, 5));
        assert_eq!(m.prompt_tokens(), 15);
        assert!(m.validate(15).is_ok());
        assert!(m.validate(10).is_err());
    }

    #[test]
    fn injection_needs_both_pools() {
        let m = ModelConfig {
            pools: PoolSet::Cs,
            ..ModelConfig::default()
        };
        assert!(m.validate(15).is_err());
    }

    #[test]
    fn baseline_is_single_pool_mean_ce() {
        let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
        Method::Baseline.apply(&mut m, &mut t);
        assert_eq!(m.pools, PoolSet::C);
        assert_eq!(m.fusion, Fusion::Mean);
        assert!(t.toggles.ce && !t.toggles.rce && !t.toggles.inter);
        assert_eq!(m.prompt_tokens(), 5);
        assert_eq!("sim-compiler".parse::<Method>().unwrap(), Method::SimCompiler);
    }

    #[test]
    fn classification_loss_required() {
        let mut t = TrainConfig::default();
        t.toggles.ce = false;
        t.toggles.rce = false;
        assert!(t.validate().is_err());
    }
}
