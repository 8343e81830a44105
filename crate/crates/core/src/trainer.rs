//! Single-model training on one fold: seeded per-epoch shuffling, online
//! augmentation of training batches, mini-batch optimizer steps.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, Augmenter};
use crate::dataset::{ClassLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::neuralnet::{
    architecture, backward, build, cross_entropy, forward_graph, images_to_batch, init_graph,
    predictions_from_logits, ModelSpec, Parameters, Prediction,
};
use crate::optim::{Optimizer, OptimizerConfig};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub spec: ModelSpec,
}

impl TrainConfig {
    /// 15 epochs, batch 8, constant learning rate 5e-5 with SGDM, default augmentation.
    pub fn with_defaults(spec: ModelSpec, seed: u64) -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            augment: AugmentPolicy::default_policy(seed),
            seed,
            spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub optimizer_steps: u64,
    pub augment_draws: u64,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
}

/// Order in which samples are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train a freshly initialised model.
pub fn train(cfg: &TrainConfig, train_set: &[LabeledImage]) -> Result<(Parameters, TrainRecord)> {
    cfg.validate()?;
    let params = build(&cfg.spec, cfg.seed)?;
    train_from(cfg, params, train_set)
}

/// Continue training `params` (e.g. after [`replace_head`]).
pub fn train_from(
    cfg: &TrainConfig,
    mut params: Parameters,
    train_set: &[LabeledImage],
) -> Result<(Parameters, TrainRecord)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let started = Instant::now();
    let graph = architecture(&cfg.spec)?;
    let (h, w) = cfg.spec.input_hw;
    let c = cfg.spec.input_channels;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut augmenter = Augmenter::new(cfg.augment.clone());
    let n = train_set.len();
    // Augmentation acts on images already at the network input size.
    let resized: Vec<LabeledImage> = train_set.iter().map(|img| img.resize(h, w, c)).collect::<Result<_>>()?;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_imgs = Vec::with_capacity(chunk.len());
            for (offset, &i) in chunk.iter().enumerate() {
                let draw = (epoch * n + batch_idx * cfg.batch_size + offset) as u64;
                batch_imgs.push(augmenter.augment(&resized[i], draw));
            }
            let labels: Vec<ClassLabel> = batch_imgs.iter().map(|im| im.label).collect();
            let batch = images_to_batch(&cfg.spec, &batch_imgs)?;
            let grads = {
                let (logits, cache) = forward_graph(&params, &graph, &batch)?;
                let (loss, dlogits) = cross_entropy(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss * chunk.len() as f64;
                correct += predictions_from_logits(&logits)
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| p.predicted == **l)
                    .count();
                backward(&cache, &dlogits)?
            };
            optimizer.step(&mut params, &grads)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.3}",
            record.mean_loss,
            record.train_accuracy
        );
        epochs.push(record);
    }
    Ok((
        params,
        TrainRecord {
            epochs,
            optimizer_steps: optimizer.steps(),
            augment_draws: augmenter.draws(),
            checkpoint: None,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Keep the feature layers of `checkpoint` and re-initialise the classifier
/// head from `seed`. With `freeze_features`, feature tensors are excluded from
/// later optimizer updates.
pub fn replace_head(
    checkpoint: &Parameters,
    spec: &ModelSpec,
    seed: u64,
    freeze_features: bool,
) -> Result<Parameters> {
    let graph = architecture(spec)?;
    let fresh = init_graph(&graph, seed);
    let mut tensors = std::collections::BTreeMap::new();
    let mut frozen = std::collections::BTreeSet::new();
    for (name, p) in graph.params() {
        if p.head {
            tensors.insert(name.clone(), fresh.get(name).expect("same graph").clone());
            continue;
        }
        let t = checkpoint.get(name).ok_or_else(|| Error::Shape {
            layer: name.clone(),
            detail: "checkpoint lacks this feature tensor".into(),
        })?;
        if t.shape() != p.shape.as_slice() {
            return Err(Error::Shape {
                layer: name.clone(),
                detail: format!("checkpoint shape {:?} vs spec {:?}", t.shape(), p.shape),
            });
        }
        tensors.insert(name.clone(), t.clone());
        if freeze_features {
            frozen.insert(name.clone());
        }
    }
    let mut params = Parameters::new(tensors, seed);
    params.frozen = frozen;
    Ok(params)
}

/// Predict every test image without augmentation, in input order.
pub fn evaluate(
    params: &Parameters,
    spec: &ModelSpec,
    test_set: &[LabeledImage],
) -> Result<Vec<(String, Prediction, ClassLabel)>> {
    if test_set.is_empty() {
        return Err(Error::Invalid("test set is empty".into()));
    }
    let graph = architecture(spec)?;
    let mut out = Vec::with_capacity(test_set.len());
    for chunk in test_set.chunks(EVAL_CHUNK) {
        let batch = images_to_batch(spec, chunk)?;
        let (logits, _) = forward_graph(params, &graph, &batch)?;
        for (img, p) in chunk.iter().zip(predictions_from_logits(&logits)) {
            out.push((img.sample_id.clone(), p, img.label));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Family;
    use crate::raster::Image;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            family: Family::PlainStack,
            input_hw: (6, 6),
            input_channels: 1,
            stage_widths: vec![2],
            num_classes: 3,
            head: Default::default(),
            input_norm: Default::default(),
        }
    }

    fn toy_set(n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| {
                let bright = i % 2 == 0;
                LabeledImage {
                    pixels: Image::from_fn(6, 6, 1, |y, x, _| {
                        let base = if bright { 0.8 } else { 0.1 };
                        base + 0.01 * ((y * 6 + x + i) % 5) as f64
                    }),
                    label: if bright { ClassLabel::Malignant } else { ClassLabel::Normal },
                    sample_id: format!("s{i}"),
                    origin: "toy".into(),
                }
            })
            .collect()
    }

    fn cfg(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            optimizer: OptimizerConfig::adam(0.01),
            augment: AugmentPolicy::none(0),
            seed: 3,
            spec: tiny_spec(),
        }
    }

    #[test]
    fn step_count_law() {
        let (_, rec) = train(&cfg(15, 8), &toy_set(16)).unwrap();
        assert_eq!(rec.optimizer_steps, 30);
        assert_eq!(rec.epochs.len(), 15);
        let (_, rec) = train(&cfg(3, 4), &toy_set(10)).unwrap();
        assert_eq!(rec.optimizer_steps, 3 * 3);
        assert_eq!(rec.augment_draws, 30);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        for epoch in 0..5 {
            let mut o = epoch_order(23, 7, epoch);
            o.sort_unstable();
            assert_eq!(o, (0..23).collect::<Vec<_>>());
        }
        assert_ne!(epoch_order(23, 7, 0), epoch_order(23, 7, 1));
        assert_eq!(epoch_order(23, 7, 2), epoch_order(23, 7, 2));
    }

    #[test]
    fn training_is_deterministic() {
        let mut c = cfg(2, 4);
        c.augment = AugmentPolicy::default_policy(1);
        let (a, _) = train(&c, &toy_set(8)).unwrap();
        let (b, _) = train(&c, &toy_set(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train(&cfg(1, 1), &[]).is_err());
        assert!(evaluate(&build(&tiny_spec(), 0).unwrap(), &tiny_spec(), &[]).is_err());
    }

    #[test]
    fn diverging_training_reports_epoch_and_batch() {
        let mut c = cfg(3, 4);
        c.optimizer = OptimizerConfig::sgdm(1e300);
        match train(&c, &toy_set(8)) {
            Err(Error::NonFiniteLoss { epoch, batch }) => assert!(epoch < 3 && batch < 2),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_preserves_order_and_is_repeatable() {
        let set = toy_set(7);
        let p = build(&tiny_spec(), 1).unwrap();
        let a = evaluate(&p, &tiny_spec(), &set).unwrap();
        assert_eq!(a.len(), 7);
        for (r, img) in a.iter().zip(&set) {
            assert_eq!(r.0, img.sample_id);
            assert_eq!(r.2, img.label);
        }
        assert_eq!(a, evaluate(&p, &tiny_spec(), &set).unwrap());
    }

    #[test]
    fn replace_head_copies_features() {
        let spec = tiny_spec();
        let ck = build(&spec, 5).unwrap();
        let p = replace_head(&ck, &spec, 99, false).unwrap();
        for (name, t) in p.iter() {
            if name.starts_with("head.") {
                continue;
            }
            assert_eq!(t, ck.get(name).unwrap());
        }
        assert_ne!(p.get("head.weight"), ck.get("head.weight"));
        assert!(p.frozen.is_empty());

        let mut other = spec.clone();
        other.stage_widths = vec![3];
        assert!(replace_head(&ck, &other, 1, false).is_err());
    }
}
