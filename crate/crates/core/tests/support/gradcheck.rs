//! Central finite-difference gradient checks shared by the core test suite
//! and the acceptance target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonovote::dataset::ClassLabel;
use sonovote::neuralnet::{
    architecture, backward, cross_entropy, forward_graph, init_graph, Family, Graph, GraphBuilder, InputNorm,
    ModelSpec, Parameters,
};
use sonovote::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar objective: either cross-entropy (3-way outputs) or a fixed random
/// projection of the output.
enum Objective {
    Projection(Tensor),
    CrossEntropy(Vec<ClassLabel>),
}

fn loss_and_grad(obj: &Objective, out: &Tensor) -> (f64, Tensor) {
    match obj {
        Objective::Projection(r) => {
            let l = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            (l, r.clone())
        }
        Objective::CrossEntropy(labels) => cross_entropy(out, labels).unwrap(),
    }
}

fn loss(graph: &Graph, params: &Parameters, batch: &Tensor, obj: &Objective) -> f64 {
    let (out, _) = forward_graph(params, graph, batch).unwrap();
    loss_and_grad(obj, &out).0
}

/// Worst relative error over all parameter scalars. The tiny denominator
/// floor only matters when both gradients are exactly zero.
fn max_rel_error(graph: &Graph, mut params: Parameters, batch: &Tensor, obj: &Objective) -> (f64, String) {
    let analytic = {
        let (out, cache) = forward_graph(&params, graph, batch).unwrap();
        let (_, g) = loss_and_grad(obj, &out);
        backward(&cache, &g).unwrap()
    };
    let names: Vec<String> = params.names().cloned().collect();
    let mut worst = (0.0, String::new());
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + EPS;
            let up = loss(graph, &params, batch, obj);
            params.get_mut(&name).unwrap().data_mut()[i] = orig - EPS;
            let down = loss(graph, &params, batch, obj);
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.get(&name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-10);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

fn randomize(params: &mut Parameters, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Worst relative error of one check and where it occurred.
pub struct CheckResult {
    pub label: String,
    pub max_rel_error: f64,
    pub at: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOL
    }
}

pub fn check_layer(label: &str, build: impl Fn(&mut GraphBuilder) -> usize, in_shape: [usize; 3], seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(in_shape[0], in_shape[1], in_shape[2]);
    let out = build(&mut b);
    let graph = b.finish(out).unwrap();
    let mut params = init_graph(&graph, seed);
    randomize(&mut params, &mut rng);
    let batch = random_tensor(&mut rng, &[2, in_shape[0], in_shape[1], in_shape[2]]);
    let mut out_shape = vec![2];
    out_shape.extend_from_slice(graph.output_shape());
    let obj = Objective::Projection(random_tensor(&mut rng, &out_shape));
    let (max_rel_error, at) = max_rel_error(&graph, params, &batch, &obj);
    CheckResult {
        label: label.into(),
        max_rel_error,
        at,
    }
}

/// One check per layer type: conv (same and strided), conv input gradient,
/// ReLU, max pool, global average pool with dense, add, concat.
pub fn layer_checks() -> Vec<CheckResult> {
    vec![
        check_layer("conv 3x3 same", |b| { let x = b.input(); b.conv("c", x, 3, 3, 1, 1).unwrap() }, [2, 5, 5], 1),
        check_layer("conv 3x3 stride 2", |b| { let x = b.input(); b.conv("c", x, 2, 3, 2, 0).unwrap() }, [2, 7, 6], 2),
        check_layer(
            "conv -> conv",
            |b| {
                let x = b.input();
                let c1 = b.conv("a", x, 3, 3, 1, 1).unwrap();
                b.conv("b", c1, 2, 3, 2, 1).unwrap()
            },
            [1, 6, 6],
            3,
        ),
        check_layer(
            "relu",
            |b| {
                let x = b.input();
                let c = b.conv("a", x, 3, 3, 1, 1).unwrap();
                b.relu(c)
            },
            [1, 5, 5],
            4,
        ),
        check_layer(
            "max pool",
            |b| {
                let x = b.input();
                let c = b.conv("a", x, 2, 3, 1, 1).unwrap();
                b.max_pool(c, 2).unwrap()
            },
            [1, 6, 5],
            5,
        ),
        check_layer(
            "gap -> dense",
            |b| {
                let x = b.input();
                let c = b.conv("a", x, 3, 3, 1, 1).unwrap();
                let g = b.global_avg_pool(c).unwrap();
                b.dense("d", g, 4, false).unwrap()
            },
            [2, 4, 4],
            6,
        ),
        check_layer(
            "add",
            |b| {
                let x = b.input();
                let c1 = b.conv("a", x, 2, 3, 1, 1).unwrap();
                let c2 = b.conv("b", c1, 2, 1, 1, 0).unwrap();
                b.add("sum", c1, c2).unwrap()
            },
            [1, 5, 5],
            7,
        ),
        check_layer(
            "concat",
            |b| {
                let x = b.input();
                let c1 = b.conv("a", x, 2, 1, 1, 0).unwrap();
                let c2 = b.conv("b", x, 3, 3, 1, 1).unwrap();
                let cat = b.concat("cat", &[c1, c2]).unwrap();
                b.conv("c", cat, 2, 3, 1, 1).unwrap()
            },
            [2, 4, 4],
            8,
        ),
    ]
}

/// Whole-network check with softmax cross-entropy on a batch of three.
pub fn check_family(family: Family, channels: usize, seed: u64) -> CheckResult {
    let spec = ModelSpec {
        family,
        input_hw: (8, 8),
        input_channels: channels,
        stage_widths: vec![2, 4],
        num_classes: 3,
        head: Default::default(),
        input_norm: InputNorm::IDENTITY,
    };
    let graph = architecture(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_graph(&graph, seed);
    // Non-zero everywhere so the residual branch is exercised too.
    randomize(&mut params, &mut rng);
    let batch = random_tensor(&mut rng, &[3, channels, 8, 8]);
    let labels = vec![ClassLabel::Normal, ClassLabel::Benign, ClassLabel::Malignant];
    let (max_rel_error, at) = max_rel_error(&graph, params, &batch, &Objective::CrossEntropy(labels));
    CheckResult {
        label: format!("{family} ({channels} channel{})", if channels == 1 { "" } else { "s" }),
        max_rel_error,
        at,
    }
}

/// Every family with one and three input channels.
pub fn family_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (i, family) in Family::ALL.iter().enumerate() {
        for (j, channels) in [1, 3].into_iter().enumerate() {
            out.push(check_family(*family, channels, 11 + 2 * i as u64 + j as u64));
        }
    }
    out
}
