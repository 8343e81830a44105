//! Tensor-level CNN core: architecture families, parameter initialisation,
//! forward/backward passes, softmax cross-entropy and prediction.

mod checkpoint;
mod graph;
mod spec;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{backward, ForwardCache, Graph, GraphBuilder, Init, Node, NodeId, Op, ParamSpec};
pub use spec::{Family, Head, InputNorm, ModelSpec, NUM_CLASSES};

use crate::dataset::{ClassLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
    pub init_seed: u64,
    /// Names excluded from optimizer updates.
    pub frozen: BTreeSet<String>,
}

impl Parameters {
    pub fn new(tensors: BTreeMap<String, Tensor>, init_seed: u64) -> Self {
        Self {
            tensors,
            init_seed,
            frozen: BTreeSet::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }
}

/// Per-parameter gradients, keyed like [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Class probabilities for one sample and the argmax label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: [f64; NUM_CLASSES],
    pub predicted: ClassLabel,
}

impl Prediction {
    /// Argmax with the lowest index winning ties.
    pub fn from_probabilities(probabilities: [f64; NUM_CLASSES]) -> Self {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if probabilities[i] > probabilities[best] {
                best = i;
            }
        }
        Self {
            probabilities,
            predicted: ClassLabel::from_index(best).expect("index < 3"),
        }
    }
}

const HEAD: &str = "head";

/// Lay out the computation graph for a model spec.
pub fn architecture(spec: &ModelSpec) -> Result<Graph> {
    spec.validate()?;
    let (h, w) = spec.input_hw;
    let mut b = GraphBuilder::new(spec.input_channels, h, w);
    let mut x = b.input();
    for (i, &width) in spec.stage_widths.iter().enumerate() {
        match spec.family {
            Family::PlainStack => {
                let c = b.conv(&format!("stage{i}.conv"), x, width, 3, 1, 1)?;
                x = b.relu(c);
                x = pool_if_room(&mut b, x)?;
            }
            Family::Residual => {
                let c = b.conv(&format!("stage{i}.conv"), x, width, 3, 1, 1)?;
                x = b.relu(c);
                x = pool_if_room(&mut b, x)?;
                let a = b.conv(&format!("stage{i}.res_a"), x, width, 3, 1, 1)?;
                let a = b.relu(a);
                let r = b.conv_zero_init(&format!("stage{i}.res_b"), a, width, 3, 1, 1)?;
                x = b.add(&format!("stage{i}.add"), x, r)?;
            }
            Family::InceptionLite => {
                let b1 = b.conv(&format!("stage{i}.branch1x1"), x, width, 1, 1, 0)?;
                let b1 = b.relu(b1);
                let b3 = b.conv(&format!("stage{i}.branch3x3"), x, width, 3, 1, 1)?;
                let b3 = b.relu(b3);
                x = b.concat(&format!("stage{i}.concat"), &[b1, b3])?;
                x = pool_if_room(&mut b, x)?;
            }
        }
    }
    let g = b.global_avg_pool(x)?;
    let out = b.dense(HEAD, g, spec.num_classes, true)?;
    b.finish(out)
}

fn pool_if_room(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
    let s = b.shape(x);
    if s[1] >= 2 && s[2] >= 2 {
        b.max_pool(x, 2)
    } else {
        Ok(x)
    }
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = spec.shape.iter().product();
    let bound = match spec.init {
        Init::HeUniform { fan_in } => (6.0 / fan_in as f64).sqrt(),
        Init::FanInUniform { fan_in } => 1.0 / (fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    let data = if bound == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    Tensor::new(spec.shape.clone(), data).expect("shape from graph")
}

/// Initialise parameters for an arbitrary graph. Parameters are drawn in name
/// order from one ChaCha stream, so the result depends only on the seed.
pub fn init_graph(graph: &Graph, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = graph
        .params()
        .iter()
        .map(|(name, p)| (name.clone(), init_tensor(p, &mut rng)))
        .collect();
    Parameters::new(tensors, seed)
}

/// Fresh parameters for `spec`: conv weights He-uniform, dense weights
/// uniform in ±1/√fan_in, biases and residual-branch outputs zero.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Parameters> {
    Ok(init_graph(&architecture(spec)?, seed))
}

/// Names of the classifier-head parameters.
pub fn head_parameter_names(spec: &ModelSpec) -> Result<Vec<String>> {
    Ok(architecture(spec)?
        .params()
        .iter()
        .filter(|(_, p)| p.head)
        .map(|(n, _)| n.clone())
        .collect())
}

/// Forward pass through the graph for `spec`. Returns logits `(n, 3)`.
pub fn forward<'a>(
    params: &'a Parameters,
    spec: &ModelSpec,
    batch: &Tensor,
) -> Result<(Tensor, ForwardCache<'a>)> {
    Graph::run(Cow::Owned(architecture(spec)?), params, batch)
}

/// Forward pass through an explicit graph.
pub fn forward_graph<'a>(
    params: &'a Parameters,
    graph: &'a Graph,
    batch: &Tensor,
) -> Result<(Tensor, ForwardCache<'a>)> {
    Graph::run(Cow::Borrowed(graph), params, batch)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / n` with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[ClassLabel]) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        other => {
            return Err(Error::Shape {
                layer: "cross_entropy".into(),
                detail: format!("logits must be 2-D, got {other:?}"),
            })
        }
    };
    if n != labels.len() {
        return Err(Error::Shape {
            layer: "cross_entropy".into(),
            detail: format!("{n} logit rows but {} labels", labels.len()),
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (i, label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let t = label.index();
        loss += lse - row[t];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let onehot = if j == t { 1.0 } else { 0.0 };
            grad.push((p - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Stack images into a `(n, c, h, w)` tensor, resizing any that do not match `spec`.
pub fn images_to_batch<'a>(
    spec: &ModelSpec,
    images: impl IntoIterator<Item = &'a LabeledImage>,
) -> Result<Tensor> {
    let (h, w) = spec.input_hw;
    let c = spec.input_channels;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        let px = &img.pixels;
        if (px.height(), px.width(), px.channels()) == (h, w, c) {
            data.extend(px.to_chw());
        } else {
            data.extend(px.resize(h, w, c)?.to_chw());
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("cannot batch zero images".into()));
    }
    let InputNorm { mean, std } = spec.input_norm;
    if (mean, std) != (0.0, 1.0) {
        for v in &mut data {
            *v = (*v - mean) / std;
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

/// Softmax probabilities of each row of a `(n, 3)` logit tensor.
pub fn predictions_from_logits(logits: &Tensor) -> Vec<Prediction> {
    (0..logits.shape()[0])
        .map(|i| {
            let p = softmax(logits.row(i));
            Prediction::from_probabilities([p[0], p[1], p[2]])
        })
        .collect()
}

/// Classify one image (resized to the spec input if needed).
pub fn predict(params: &Parameters, spec: &ModelSpec, img: &LabeledImage) -> Result<Prediction> {
    let batch = images_to_batch(spec, [img])?;
    let (logits, _) = forward(params, spec, &batch)?;
    Ok(predictions_from_logits(&logits)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Image;

    fn spec(family: Family) -> ModelSpec {
        ModelSpec {
            family,
            input_hw: (8, 8),
            input_channels: 1,
            stage_widths: vec![2, 4],
            num_classes: 3,
            head: Head::DenseSoftmax,
            input_norm: InputNorm::default(),
        }
    }

    fn image(v: f64) -> LabeledImage {
        LabeledImage {
            pixels: Image::from_fn(8, 8, 1, |y, x, _| (v + 0.05 * (y + x) as f64).min(1.0)),
            label: ClassLabel::Benign,
            sample_id: "a".into(),
            origin: "t".into(),
        }
    }

    #[test]
    fn build_is_deterministic() {
        for f in Family::ALL {
            assert_eq!(build(&spec(f), 5).unwrap(), build(&spec(f), 5).unwrap());
            assert_ne!(build(&spec(f), 5).unwrap(), build(&spec(f), 6).unwrap());
        }
    }

    #[test]
    fn plain_stack_parameter_count_by_hand() {
        let s = ModelSpec {
            input_hw: (32, 32),
            input_channels: 3,
            stage_widths: vec![8, 16],
            ..ModelSpec::desk(Family::PlainStack)
        };
        // conv 3→8 (3x3): 8*3*9 + 8; conv 8→16: 16*8*9 + 16; dense 16→3: 3*16 + 3
        let expected = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (3 * 16 + 3);
        assert_eq!(build(&s, 0).unwrap().scalar_count(), expected);
        assert_eq!(expected, 1443);
        let gray = ModelSpec {
            input_channels: 1,
            ..s
        };
        assert_eq!(build(&gray, 0).unwrap().scalar_count(), 80 + 1168 + 51);
    }

    #[test]
    fn inception_lite_parameter_count_by_hand() {
        let s = ModelSpec {
            stage_widths: vec![8, 16],
            ..ModelSpec::desk(Family::InceptionLite)
        };
        // stage0: 1x1 1→8, 3x3 1→8; stage1 reads 16 channels: 1x1 16→16, 3x3 16→16; dense 32→3
        let expected = (8 + 8) + (8 * 9 + 8) + (16 * 16 + 16) + (16 * 16 * 9 + 16) + (3 * 32 + 3);
        assert_eq!(build(&s, 0).unwrap().scalar_count(), expected);
        assert_eq!(expected, 2787);
    }

    #[test]
    fn head_has_three_outputs() {
        for f in Family::ALL {
            let p = build(&spec(f), 0).unwrap();
            let features = if f == Family::InceptionLite { 8 } else { 4 };
            assert_eq!(p.get("head.weight").unwrap().shape(), &[3, features]);
            assert_eq!(p.get("head.bias").unwrap().shape(), &[3]);
            assert_eq!(head_parameter_names(&spec(f)).unwrap(), vec!["head.bias", "head.weight"]);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(Family::PlainStack);
        s.stage_widths = vec![4, 0];
        assert!(matches!(build(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = spec(Family::InceptionLite);
        s.stage_widths = vec![];
        assert!(build(&s, 0).is_err());
        let mut s = spec(Family::Residual);
        s.num_classes = 2;
        assert!(build(&s, 0).is_err());
    }

    #[test]
    fn hand_convolution_of_ones() {
        let mut b = GraphBuilder::new(1, 3, 3);
        let x = b.input();
        let c = b.conv("c", x, 1, 2, 1, 0).unwrap();
        let g = b.finish(c).unwrap();
        let mut params = init_graph(&g, 0);
        params.get_mut("c.weight").unwrap().data_mut().fill(1.0);
        let batch = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let (out, _) = forward_graph(&params, &g, &batch).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        for f in Family::ALL {
            let s = spec(f);
            let mut p = build(&s, 1).unwrap();
            p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
            let pred = predict(&p, &s, &image(0.3)).unwrap();
            for q in pred.probabilities {
                assert!((q - 1.0 / 3.0).abs() < 1e-15);
            }
            assert_eq!(pred.predicted, ClassLabel::Normal);
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let s = spec(Family::InceptionLite);
        let p = build(&s, 2).unwrap();
        let img = image(0.2);
        let batch = images_to_batch(&s, [&img, &img, &img]).unwrap();
        let (logits, _) = forward(&p, &s, &batch).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(1), logits.row(2));
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let s = spec(Family::PlainStack);
        let p = build(&s, 0).unwrap();
        let bad = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(forward(&p, &s, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_rejects_mismatched_parameters() {
        let p = build(&spec(Family::PlainStack), 0).unwrap();
        let mut other = spec(Family::PlainStack);
        other.stage_widths = vec![3, 4];
        let batch = Tensor::zeros(&[1, 1, 8, 8]);
        match forward(&p, &other, &batch) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "stage0.conv"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[1, 3]);
        for c in ClassLabel::ALL {
            let (loss, _) = cross_entropy(&uniform, &[c]).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-15);
        }
        let saturated = Tensor::new(vec![1, 3], vec![0.0, 20.0, 0.0]).unwrap();
        assert!(cross_entropy(&saturated, &[ClassLabel::Benign]).unwrap().0 < 1e-8);
        let l = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&l, &[ClassLabel::Normal]).unwrap();
        let expected = (1.0 + 2.0 * (-1f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.5514).abs() < 1e-4);
        let e = 1f64.exp();
        let denom = e + 2.0;
        assert!((grad.data()[0] - (e / denom - 1.0)).abs() < 1e-15);
        assert!((grad.data()[1] - 1.0 / denom).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[100.3, 98.8, 102.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_blocks_are_identity_at_init() {
        let s = spec(Family::Residual);
        let p = build(&s, 3).unwrap();
        let g = architecture(&s).unwrap();
        let batch = images_to_batch(&s, [&image(0.1)]).unwrap();
        let (_, cache) = forward_graph(&p, &g, &batch).unwrap();
        for (id, node) in g.nodes().iter().enumerate() {
            if node.op == Op::Add {
                assert_eq!(cache.activation(id), cache.activation(node.inputs[0]));
            }
        }
    }

    #[test]
    fn one_by_one_dense_model_matches_closed_form() {
        // 1x1 grayscale input → GAP → dense(3): logits = w * x + b.
        let mut b = GraphBuilder::new(1, 1, 1);
        let x = b.input();
        let g = b.global_avg_pool(x).unwrap();
        let d = b.dense("head", g, 3, true).unwrap();
        let graph = b.finish(d).unwrap();
        let mut p = init_graph(&graph, 0);
        p.get_mut("head.weight").unwrap().data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        p.get_mut("head.bias").unwrap().data_mut().copy_from_slice(&[0.0, 1.0, -1.0]);
        let (logits, _) = forward_graph(&p, &graph, &Tensor::filled(&[1, 1, 1, 1], 0.5)).unwrap();
        let pred = predictions_from_logits(&logits)[0];
        let z = [0.5, 0.0, -0.75];
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        for i in 0..3 {
            assert!((pred.probabilities[i] - z[i].exp() / denom).abs() < 1e-15);
        }
        assert_eq!(pred.predicted, ClassLabel::Normal);
    }
}
