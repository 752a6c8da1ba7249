//! Learner assembly, incremental training, inference and checkpoints.

pub mod checkpoint;
mod config;
mod model;
mod train;

pub use config::{Injection, LossToggles, Method, ModelConfig, PoolSet, Preset, TrainConfig};
pub use model::{
    argmax, fuse_probabilities, softmax_masked, Features, Learner, ModelState, ParamLayout, Prediction,
    SampleOutput,
};
pub use train::{batch_objective, evaluate, train_task, Counts, EpochRecord, LabeledSample, LossBreakdown};

use crate::data::{ImageSource, Protocol};
use crate::error::Result;
use crate::tensor::Real;
use rayon::prelude::*;

/// Loads and featurizes the samples at `indices` of `protocol`, in order.
pub fn prepare_samples<T: Real>(
    learner: &Learner<T>,
    protocol: &Protocol,
    indices: &[usize],
    source: &dyn ImageSource,
) -> Result<Vec<LabeledSample<T>>> {
    indices
        .par_iter()
        .map(|&i| {
            let rec = &protocol.samples[i];
            let image = source.image(&rec.id)?.cast::<T>();
            let c = rec.composition;
            Ok(LabeledSample {
                id: rec.id.clone(),
                composition: c,
                state: protocol.registry.state_of(c),
                object: protocol.registry.object_of(c),
                features: learner.features(&image)?,
            })
        })
        .collect()
}
