//! A small static computation graph with hand-written forward and backward
//! passes for the fixed layer set: convolution, ReLU, max pooling, global
//! average pooling, dense, residual add and channel concatenation.
//!
//! Activations are `(n, c, h, w)` for spatial nodes and `(n, f)` after global
//! pooling. Nodes are stored in topological order; the last node is the output.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{Gradients, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv2d {
        weight: String,
        bias: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Dense {
        weight: String,
        bias: String,
        in_features: usize,
        out_features: usize,
    },
    Add,
    Concat,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::Add => "add",
            Op::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape: `[c, h, w]` or `[features]`.
    pub shape: Vec<usize>,
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Uniform in `±1 / sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
    /// Part of the classifier head (replaced when fine-tuning).
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamSpec>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &BTreeMap<String, ParamSpec> {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.nodes.len() - 1].shape
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Builds a [`Graph`] with shape inference at each step.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamSpec>,
}

impl GraphBuilder {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                shape: vec![channels, height, width],
            }],
            params: BTreeMap::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            name,
            op,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    fn spatial(&self, id: NodeId, name: &str) -> Result<(usize, usize, usize)> {
        match self.nodes[id].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape {
                layer: name.into(),
                detail: format!("expected a (c, h, w) input, got {:?}", self.nodes[id].shape),
            }),
        }
    }

    fn add_param(&mut self, name: String, spec: ParamSpec) -> Result<()> {
        if self.params.insert(name.clone(), spec).is_some() {
            return Err(Error::InvalidSpec(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_inner(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight_init: Option<Init>,
    ) -> Result<NodeId> {
        let (c, h, w) = self.spatial(x, name)?;
        if out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidSpec(format!(
                "{name}: out_channels, kernel and stride must be positive"
            )));
        }
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::Shape {
                layer: name.into(),
                detail: format!("kernel {kernel} larger than padded input {h}x{w} (padding {padding})"),
            });
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let fan_in = c * kernel * kernel;
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.add_param(
            weight.clone(),
            ParamSpec {
                shape: vec![out_channels, c, kernel, kernel],
                init: weight_init.unwrap_or(Init::HeUniform { fan_in }),
                head: false,
            },
        )?;
        self.add_param(
            bias.clone(),
            ParamSpec {
                shape: vec![out_channels],
                init: Init::Zeros,
                head: false,
            },
        )?;
        Ok(self.push(
            name.into(),
            Op::Conv2d {
                weight,
                bias,
                in_channels: c,
                out_channels,
                kernel,
                stride,
                padding,
            },
            vec![x],
            vec![out_channels, oh, ow],
        ))
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.conv_inner(name, x, out_channels, kernel, stride, padding, None)
    }

    /// Convolution whose weights start at zero (residual branch output).
    pub fn conv_zero_init(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.conv_inner(name, x, out_channels, kernel, stride, padding, Some(Init::Zeros))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let name = format!("{}.relu", self.nodes[x].name);
        let shape = self.nodes[x].shape.clone();
        self.push(name, Op::Relu, vec![x], shape)
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let name = format!("{}.pool", self.nodes[x].name);
        let (c, h, w) = self.spatial(x, &name)?;
        if size == 0 || h < size || w < size {
            return Err(Error::Shape {
                layer: name,
                detail: format!("pool size {size} does not fit {h}x{w}"),
            });
        }
        Ok(self.push(name, Op::MaxPool { size }, vec![x], vec![c, h / size, w / size]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.spatial(x, "global_avg_pool")?;
        Ok(self.push("gap".into(), Op::GlobalAvgPool, vec![x], vec![c]))
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out_features: usize, head: bool) -> Result<NodeId> {
        let in_features = match self.nodes[x].shape[..] {
            [f] => f,
            _ => {
                return Err(Error::Shape {
                    layer: name.into(),
                    detail: format!("dense expects a flat input, got {:?}", self.nodes[x].shape),
                })
            }
        };
        if out_features == 0 {
            return Err(Error::InvalidSpec(format!("{name}: out_features must be positive")));
        }
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.add_param(
            weight.clone(),
            ParamSpec {
                shape: vec![out_features, in_features],
                init: Init::FanInUniform { fan_in: in_features },
                head,
            },
        )?;
        self.add_param(
            bias.clone(),
            ParamSpec {
                shape: vec![out_features],
                init: Init::Zeros,
                head,
            },
        )?;
        Ok(self.push(
            name.into(),
            Op::Dense {
                weight,
                bias,
                in_features,
                out_features,
            },
            vec![x],
            vec![out_features],
        ))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape {
                layer: name.into(),
                detail: format!(
                    "cannot add {:?} and {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            });
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(name.into(), Op::Add, vec![a, b], shape))
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidSpec(format!("{name}: concat needs inputs")));
        }
        let (_, h, w) = self.spatial(parts[0], name)?;
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.spatial(p, name)?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape {
                    layer: name.into(),
                    detail: format!("spatial sizes differ: {h}x{w} vs {ph}x{pw}"),
                });
            }
            channels += c;
        }
        Ok(self.push(name.into(), Op::Concat, parts.to_vec(), vec![channels, h, w]))
    }

    /// Finish the graph; `output` must be the most recently added node.
    pub fn finish(self, output: NodeId) -> Result<Graph> {
        if output + 1 != self.nodes.len() {
            return Err(Error::InvalidSpec("graph output must be the last node".into()));
        }
        Ok(Graph {
            nodes: self.nodes,
            params: self.params,
        })
    }
}

/// Activations saved by a forward pass, borrowed from the parameters used.
#[derive(Debug)]
pub struct ForwardCache<'a> {
    graph: Cow<'a, Graph>,
    params: &'a Parameters,
    acts: Vec<Tensor>,
    /// Flat input offsets of the selected maxima, per max-pool node.
    argmax: BTreeMap<NodeId, Vec<usize>>,
    /// im2col matrices, per convolution node.
    cols: BTreeMap<NodeId, Vec<f64>>,
    batch: usize,
}

impl ForwardCache<'_> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn activation(&self, id: NodeId) -> &Tensor {
        &self.acts[id]
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}

fn param<'p>(params: &'p Parameters, name: &str, shape: &[usize], layer: &str) -> Result<&'p Tensor> {
    let t = params.get(name).ok_or_else(|| Error::Shape {
        layer: layer.into(),
        detail: format!("missing parameter {name}"),
    })?;
    if t.shape() != shape {
        return Err(Error::Shape {
            layer: layer.into(),
            detail: format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t)
}

/// Valid output column range `[lo, hi)` for a kernel tap at offset `k`.
#[inline]
fn tap_range(out_len: usize, in_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if in_len + padding <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

/// Unfold sample `i` of a batch into columns `i·oh·ow ..` of a
/// `(cin·k·k, n·oh·ow)` matrix. `cols` must be zeroed beforehand.
fn im2col(g: &ConvGeom, input: &[f64], i: usize, n: usize, cols: &mut [f64]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let stride = n * out_plane;
    for c in 0..g.cin {
        let in_c = &input[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = tap_range(g.oh, g.h, ky, g.s, g.p);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = tap_range(g.ow, g.w, kx, g.s, g.p);
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * stride + i * out_plane..][..out_plane];
                for oy in oy_lo..oy_hi {
                    let in_row = &in_c[(oy * g.s + ky - g.p) * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.s == 1 {
                        let ix0 = ox_lo + kx - g.p;
                        dst[ox_lo..ox_hi].copy_from_slice(&in_row[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = in_row[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`] for sample `i`, accumulating into `dinput`.
fn col2im(g: &ConvGeom, cols: &[f64], i: usize, n: usize, dinput: &mut [f64]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let stride = n * out_plane;
    for c in 0..g.cin {
        let din_c = &mut dinput[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = tap_range(g.oh, g.h, ky, g.s, g.p);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = tap_range(g.ow, g.w, kx, g.s, g.p);
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * stride + i * out_plane..][..out_plane];
                for oy in oy_lo..oy_hi {
                    let din_row = &mut din_c[(oy * g.s + ky - g.p) * g.w..][..g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        din_row[ox * g.s + kx - g.p] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: (m, k)`, `b: (k, n)`, `c: (m, n)`,
/// with `a` optionally read transposed from a `(k, m)` buffer and `b` from a
/// `(n, k)` buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Batched convolution. Returns the NCHW output and the column matrix.
fn conv_forward(g: &ConvGeom, n: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let kk = g.cin * g.k * g.k;
    let plane = g.oh * g.ow;
    let isz = g.cin * g.h * g.w;
    let mut cols = vec![0.0; kk * n * plane];
    for i in 0..n {
        im2col(g, &input[i * isz..(i + 1) * isz], i, n, &mut cols);
    }
    let mut tmp = vec![0.0; g.cout * n * plane];
    gemm(g.cout, kk, n * plane, weight, false, &cols, false, 0.0, &mut tmp);
    let mut out = vec![0.0; n * g.cout * plane];
    for i in 0..n {
        for o in 0..g.cout {
            let src = &tmp[(o * n + i) * plane..][..plane];
            let dst = &mut out[(i * g.cout + o) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    (out, cols)
}

/// Gradients of a batched convolution. `dinput` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &ConvGeom,
    n: usize,
    cols: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let kk = g.cin * g.k * g.k;
    let plane = g.oh * g.ow;
    let mut dout_t = vec![0.0; g.cout * n * plane];
    for i in 0..n {
        for o in 0..g.cout {
            let src = &dout[(i * g.cout + o) * plane..][..plane];
            dbias[o] += src.iter().sum::<f64>();
            dout_t[(o * n + i) * plane..][..plane].copy_from_slice(src);
        }
    }
    gemm(g.cout, n * plane, kk, &dout_t, false, cols, true, 1.0, dweight);
    if let Some(dinput) = dinput {
        let mut dcols = vec![0.0; kk * n * plane];
        gemm(kk, g.cout, n * plane, weight, true, &dout_t, false, 0.0, &mut dcols);
        let isz = g.cin * g.h * g.w;
        for i in 0..n {
            col2im(g, &dcols, i, n, &mut dinput[i * isz..(i + 1) * isz]);
        }
    }
}

impl Graph {
    /// Run the graph on a `(n, c, h, w)` batch.
    pub(crate) fn run<'a>(
        graph: Cow<'a, Graph>,
        params: &'a Parameters,
        batch: &Tensor,
    ) -> Result<(Tensor, ForwardCache<'a>)> {
        let in_shape = graph.input_shape();
        let n = match batch.shape() {
            [n, rest @ ..] if rest == in_shape => *n,
            other => {
                return Err(Error::Shape {
                    layer: "input".into(),
                    detail: format!("batch shape {other:?} does not match (n, {in_shape:?})"),
                })
            }
        };
        let mut acts: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
        let mut argmax = BTreeMap::new();
        let mut cols = BTreeMap::new();
        for (id, node) in graph.nodes.iter().enumerate() {
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&node.shape);
            let out = match &node.op {
                Op::Input => batch.clone(),
                Op::Conv2d {
                    weight,
                    bias,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let x = &acts[node.inputs[0]];
                    let wt = param(params, weight, &[*out_channels, *in_channels, *kernel, *kernel], &node.name)?;
                    let bt = param(params, bias, &[*out_channels], &node.name)?;
                    let g = conv_geom(x.shape(), &node.shape, *kernel, *stride, *padding);
                    let (out, c) = conv_forward(&g, n, x.data(), wt.data(), bt.data());
                    cols.insert(id, c);
                    Tensor::new(out_shape, out)?
                }
                Op::Relu => {
                    let x = &acts[node.inputs[0]];
                    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    Tensor::new(out_shape, data)?
                }
                Op::MaxPool { size } => {
                    let x = &acts[node.inputs[0]];
                    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let mut out = Tensor::zeros(&out_shape);
                    let mut idx = vec![0usize; out.len()];
                    let xd = x.data();
                    let od = out.data_mut();
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = base + oy * size * w + ox * size;
                                for dy in 0..*size {
                                    for dx in 0..*size {
                                        let j = base + (oy * size + dy) * w + ox * size + dx;
                                        if xd[j] > xd[best] {
                                            best = j;
                                        }
                                    }
                                }
                                let o = (plane * oh + oy) * ow + ox;
                                od[o] = xd[best];
                                idx[o] = best;
                            }
                        }
                    }
                    argmax.insert(id, idx);
                    out
                }
                Op::GlobalAvgPool => {
                    let x = &acts[node.inputs[0]];
                    let plane = x.shape()[2] * x.shape()[3];
                    let data = x
                        .data()
                        .chunks_exact(plane)
                        .map(|p| p.iter().sum::<f64>() / plane as f64)
                        .collect();
                    Tensor::new(out_shape, data)?
                }
                Op::Dense {
                    weight,
                    bias,
                    in_features,
                    out_features,
                } => {
                    let x = &acts[node.inputs[0]];
                    let wt = param(params, weight, &[*out_features, *in_features], &node.name)?;
                    let bt = param(params, bias, &[*out_features], &node.name)?;
                    let mut out = Tensor::zeros(&out_shape);
                    for i in 0..n {
                        let xi = x.row(i);
                        for j in 0..*out_features {
                            let wj = &wt.data()[j * in_features..(j + 1) * in_features];
                            out.data_mut()[i * out_features + j] =
                                bt.data()[j] + wj.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    out
                }
                Op::Add => {
                    let mut out = acts[node.inputs[0]].clone();
                    out.add_assign(&acts[node.inputs[1]]);
                    out
                }
                Op::Concat => {
                    let plane = node.shape[1] * node.shape[2];
                    let mut data = Vec::with_capacity(out_shape.iter().product());
                    for i in 0..n {
                        for &p in &node.inputs {
                            let part = &acts[p];
                            let sz = part.shape()[1] * plane;
                            data.extend_from_slice(&part.data()[i * sz..(i + 1) * sz]);
                        }
                    }
                    Tensor::new(out_shape, data)?
                }
            };
            acts.push(out);
        }
        let logits = acts.last().expect("graph has nodes").clone();
        Ok((
            logits,
            ForwardCache {
                graph,
                params,
                acts,
                argmax,
                cols,
                batch: n,
            },
        ))
    }
}

fn conv_geom(in_shape: &[usize], out_shape: &[usize], k: usize, s: usize, p: usize) -> ConvGeom {
    ConvGeom {
        cin: in_shape[1],
        h: in_shape[2],
        w: in_shape[3],
        cout: out_shape[0],
        oh: out_shape[1],
        ow: out_shape[2],
        k,
        s,
        p,
    }
}

/// Back-propagate `loss_grad` (gradient of the loss w.r.t. the output) through
/// the cached forward pass.
pub fn backward(cache: &ForwardCache<'_>, loss_grad: &Tensor) -> Result<Gradients> {
    let graph = &*cache.graph;
    let out_id = graph.nodes.len() - 1;
    if loss_grad.shape() != cache.acts[out_id].shape() {
        return Err(Error::Shape {
            layer: graph.nodes[out_id].name.clone(),
            detail: format!(
                "loss gradient shape {:?} does not match output {:?}",
                loss_grad.shape(),
                cache.acts[out_id].shape()
            ),
        });
    }
    let n = cache.batch;
    let mut grads: BTreeMap<String, Tensor> = graph
        .params
        .iter()
        .map(|(name, p)| (name.clone(), Tensor::zeros(&p.shape)))
        .collect();
    let mut dacts: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    dacts[out_id] = Some(loss_grad.clone());

    fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
        match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    for id in (1..graph.nodes.len()).rev() {
        let Some(dout) = dacts[id].take() else {
            continue;
        };
        let node = &graph.nodes[id];
        match &node.op {
            Op::Input => {}
            Op::Conv2d {
                weight,
                bias,
                kernel,
                stride,
                padding,
                ..
            } => {
                let xid = node.inputs[0];
                let x = &cache.acts[xid];
                let wt = cache.params.get(weight).expect("checked in forward");
                let g = conv_geom(x.shape(), &node.shape, *kernel, *stride, *padding);
                let needs_dx = !matches!(graph.nodes[xid].op, Op::Input);
                let mut dx = needs_dx.then(|| Tensor::zeros(x.shape()));
                let mut dw = grads.remove(weight).expect("declared");
                conv_backward(
                    &g,
                    n,
                    &cache.cols[&id],
                    wt.data(),
                    dout.data(),
                    dw.data_mut(),
                    grads.get_mut(bias).expect("declared").data_mut(),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                grads.insert(weight.clone(), dw);
                if let Some(dx) = dx {
                    accumulate(&mut dacts[xid], dx);
                }
            }
            Op::Relu => {
                let xid = node.inputs[0];
                let y = &cache.acts[id];
                let data = dout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(&mut dacts[xid], Tensor::new(dout.shape().to_vec(), data)?);
            }
            Op::MaxPool { .. } => {
                let xid = node.inputs[0];
                let mut dx = Tensor::zeros(cache.acts[xid].shape());
                let idx = &cache.argmax[&id];
                for (o, &src) in idx.iter().enumerate() {
                    dx.data_mut()[src] += dout.data()[o];
                }
                accumulate(&mut dacts[xid], dx);
            }
            Op::GlobalAvgPool => {
                let xid = node.inputs[0];
                let xs = cache.acts[xid].shape();
                let plane = xs[2] * xs[3];
                let scale = 1.0 / plane as f64;
                let data = dout
                    .data()
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * scale, plane))
                    .collect();
                accumulate(&mut dacts[xid], Tensor::new(xs.to_vec(), data)?);
            }
            Op::Dense {
                weight,
                bias,
                in_features,
                out_features,
            } => {
                let xid = node.inputs[0];
                let x = &cache.acts[xid];
                let wt = cache.params.get(weight).expect("checked in forward");
                let mut dx = Tensor::zeros(x.shape());
                {
                    let dw = grads.get_mut(weight).expect("declared");
                    for i in 0..n {
                        let xi = x.row(i);
                        let di = dout.row(i);
                        for j in 0..*out_features {
                            let d = di[j];
                            for (g, &xv) in dw.data_mut()[j * in_features..(j + 1) * in_features]
                                .iter_mut()
                                .zip(xi)
                            {
                                *g += d * xv;
                            }
                        }
                    }
                }
                {
                    let db = grads.get_mut(bias).expect("declared");
                    for i in 0..n {
                        for (g, d) in db.data_mut().iter_mut().zip(dout.row(i)) {
                            *g += d;
                        }
                    }
                }
                for i in 0..n {
                    let di = dout.row(i);
                    let dxi = &mut dx.data_mut()[i * in_features..(i + 1) * in_features];
                    for (j, &d) in di.iter().enumerate() {
                        let wj = &wt.data()[j * in_features..(j + 1) * in_features];
                        for (g, &w) in dxi.iter_mut().zip(wj) {
                            *g += w * d;
                        }
                    }
                }
                accumulate(&mut dacts[xid], dx);
            }
            Op::Add => {
                accumulate(&mut dacts[node.inputs[0]], dout.clone());
                accumulate(&mut dacts[node.inputs[1]], dout);
            }
            Op::Concat => {
                let plane = node.shape[1] * node.shape[2];
                let total = node.shape[0] * plane;
                let mut offset = 0;
                for &p in &node.inputs {
                    let ps = cache.acts[p].shape();
                    let sz = ps[1] * plane;
                    let mut data = Vec::with_capacity(n * sz);
                    for i in 0..n {
                        data.extend_from_slice(&dout.data()[i * total + offset..i * total + offset + sz]);
                    }
                    offset += sz;
                    accumulate(&mut dacts[p], Tensor::new(ps.to_vec(), data)?);
                }
            }
        }
    }
    Ok(Gradients { tensors: grads })
}
