//! Double-equivariant relational encoder with a distance-augmented triplet
//! scoring head.
//!
//! Every node `i` carries two channels per relation `k`: `h[i,k]` (relation
//! `k` only) and `h[i,¬k]` (all other relations). The first propagation layer
//! splits neighborhoods by relation; deeper layers are linear and propagate
//! each channel over the whole graph. The per-layer outputs are concatenated
//! and combined as `X[i,k] = MLP₁(h[i,k]) + MLP₂(h[i,¬k])`. A triplet
//! `(i, k, j)` is scored from `X[i,k] ‖ X[j,k] ‖ d(i,j) ‖ d(j,i)`.
//!
//! Rows of all channel matrices are indexed `k * num_nodes + i`.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DistanceCache, DistanceFeature, UnionAdjacency, DEFAULT_CAP};
use crate::graph::{KnowledgeGraph, Triplet};
use crate::nn::{glorot, sigmoid, Mlp, MlpTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            _ => Err(Error::Invalid(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// How edge direction reaches a relation channel.
///
/// `Tied`: messages from out-neighbors of relation `k` enter channel `k`
/// through their own weights, i.e. the inverse of relation `k` shares the
/// channel of `k`. `Separate`: the graph is inverse-augmented to `2R`
/// relations and each relation only listens to its in-neighbors. `None`:
/// in-neighbors only, no augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InverseMode {
    Tied,
    Separate,
    None,
}

impl std::str::FromStr for InverseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tied" => Ok(Self::Tied),
            "separate" => Ok(Self::Separate),
            "none" => Ok(Self::None),
            _ => Err(Error::Invalid(format!("unknown inverse mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub aggregation: Aggregation,
    pub use_distance: bool,
    pub distance_cap: u32,
    pub mlp_hidden_dims: Vec<usize>,
    pub inverse_mode: InverseMode,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 32,
            aggregation: Aggregation::Mean,
            use_distance: true,
            distance_cap: DEFAULT_CAP,
            mlp_hidden_dims: vec![32],
            inverse_mode: InverseMode::Tied,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Invalid("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Invalid("hidden_dim must be at least 1".into()));
        }
        if self.distance_cap == 0 {
            return Err(Error::Invalid("distance_cap must be at least 1".into()));
        }
        if self.mlp_hidden_dims.contains(&0) {
            return Err(Error::Invalid("mlp_hidden_dims must be positive".into()));
        }
        Ok(())
    }

    /// Width of `h[i,k] = h⁰ ‖ … ‖ hᵀ`; the all-ones `h⁰` has width 1.
    pub fn concat_dim(&self) -> usize {
        1 + self.num_layers * self.hidden_dim
    }

    pub fn head_input_dim(&self) -> usize {
        2 * self.hidden_dim + if self.use_distance { 2 } else { 0 }
    }

    fn bidirectional(&self) -> bool {
        self.inverse_mode == InverseMode::Tied
    }
}

/// One linear propagation layer: `h' = W_self h + W_in AGG(in) [+ W_out AGG(out)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnLayer {
    pub w_self: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_out: Option<Array2<f64>>,
}

impl GnnLayer {
    fn new<R: rand::Rng>(input: usize, output: usize, bidirectional: bool, rng: &mut R) -> Self {
        Self {
            w_self: glorot(output, input, rng),
            w_in: glorot(output, input, rng),
            w_out: bidirectional.then(|| glorot(output, input, rng)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_self: Array2::zeros(self.w_self.raw_dim()),
            w_in: Array2::zeros(self.w_in.raw_dim()),
            w_out: self.w_out.as_ref().map(|w| Array2::zeros(w.raw_dim())),
        }
    }
}

/// All learned weights, with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub rel_layers: Vec<GnnLayer>,
    pub comp_layers: Vec<GnnLayer>,
    pub mlp_rel: Mlp,
    pub mlp_comp: Mlp,
    pub head: Mlp,
}

pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = crate::rng::rng(config.seed);
    let d = config.hidden_dim;
    let bi = config.bidirectional();
    let mut rel_layers = Vec::new();
    let mut comp_layers = Vec::new();
    for t in 0..config.num_layers {
        let input = if t == 0 { 1 } else { d };
        rel_layers.push(GnnLayer::new(input, d, bi, &mut rng));
        comp_layers.push(GnnLayer::new(input, d, bi, &mut rng));
    }
    let mut mlp_dims = vec![config.concat_dim()];
    mlp_dims.extend(&config.mlp_hidden_dims);
    mlp_dims.push(d);
    let mlp_rel = Mlp::new(&mlp_dims, &mut rng);
    let mlp_comp = Mlp::new(&mlp_dims, &mut rng);
    let head = Mlp::new(&[config.head_input_dim(), d, 1], &mut rng);
    Ok(EncoderParams {
        config: config.clone(),
        rel_layers,
        comp_layers,
        mlp_rel,
        mlp_comp,
        head,
    })
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            rel_layers: self.rel_layers.iter().map(GnnLayer::zeros_like).collect(),
            comp_layers: self.comp_layers.iter().map(GnnLayer::zeros_like).collect(),
            mlp_rel: self.mlp_rel.zeros_like(),
            mlp_comp: self.mlp_comp.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Every parameter tensor as `(name, shape, values)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (prefix, layers) in [("rel", &self.rel_layers), ("comp", &self.comp_layers)] {
            for (t, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.layer{t}.self"), l.w_self.shape().to_vec(), slice(&l.w_self)));
                out.push((format!("{prefix}.layer{t}.in"), l.w_in.shape().to_vec(), slice(&l.w_in)));
                if let Some(w) = &l.w_out {
                    out.push((format!("{prefix}.layer{t}.out"), w.shape().to_vec(), slice(w)));
                }
            }
        }
        for (prefix, mlp) in [("mlp_rel", &self.mlp_rel), ("mlp_comp", &self.mlp_comp), ("head", &self.head)] {
            for (idx, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{idx}.weight"), l.w.shape().to_vec(), slice(&l.w)));
                out.push((format!("{prefix}.{idx}.bias"), l.b.shape().to_vec(), l.b.as_slice().unwrap()));
            }
        }
        out
    }

    /// Mutable views in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layers in [&mut self.rel_layers, &mut self.comp_layers] {
            for l in layers.iter_mut() {
                out.push(l.w_self.as_slice_mut().unwrap());
                out.push(l.w_in.as_slice_mut().unwrap());
                if let Some(w) = &mut l.w_out {
                    out.push(w.as_slice_mut().unwrap());
                }
            }
        }
        for mlp in [&mut self.mlp_rel, &mut self.mlp_comp, &mut self.head] {
            for l in mlp.layers.iter_mut() {
                out.push(l.w.as_slice_mut().unwrap());
                out.push(l.b.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Rebuilds parameters from named flat tensors (checkpoint loading).
    pub fn from_named(config: &EncoderConfig, tensors: &HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut params = init_encoder(config)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if tensors.len() != names.len() {
            return Err(Error::Schema(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((name, shape), dst) in names.iter().zip(params.tensors_mut()) {
            let (s, values) = tensors
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))?;
            if s != shape || values.len() != dst.len() {
                return Err(Error::Schema(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            dst.copy_from_slice(values);
        }
        Ok(params)
    }

    /// Graph the encoder actually propagates over.
    pub fn encoded_graph(&self, g: &KnowledgeGraph) -> KnowledgeGraph {
        match self.config.inverse_mode {
            InverseMode::Separate => g.augment_inverses(),
            _ => g.clone(),
        }
    }

    pub fn operator(&self, g: &KnowledgeGraph) -> GraphOperator {
        GraphOperator::new(
            &self.encoded_graph(g),
            self.config.aggregation,
            self.config.bidirectional(),
        )
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

#[derive(Debug, Clone)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    fn from_lists(lists: impl Iterator<Item = Vec<usize>>, agg: Aggregation) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for list in lists {
            let w = match agg {
                Aggregation::Mean => 1.0 / list.len().max(1) as f64,
                _ => 1.0,
            };
            weights.extend(std::iter::repeat_n(w, list.len()));
            cols.extend(list);
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            weights,
        }
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.cols[a..b], &self.weights[a..b])
    }
}

/// Graph-dependent propagation operators, independent of the weights.
#[derive(Debug, Clone)]
pub struct GraphOperator {
    num_nodes: usize,
    num_channels: usize,
    agg: Aggregation,
    bidirectional: bool,
    /// Layer-0 aggregates of the all-ones input, indexed `k * n + i`.
    rel_in: Vec<f64>,
    rel_out: Vec<f64>,
    comp_in: Vec<f64>,
    comp_out: Vec<f64>,
    union_in: Csr,
    union_out: Csr,
}

impl GraphOperator {
    pub fn new(g: &KnowledgeGraph, agg: Aggregation, bidirectional: bool) -> Self {
        let n = g.num_nodes();
        let r = g.num_relations();
        let count = |c: usize| -> f64 {
            match agg {
                Aggregation::Sum => c as f64,
                Aggregation::Mean | Aggregation::Max => (c > 0) as u8 as f64,
            }
        };
        // Relations backing each directed node pair.
        let mut pair_rels: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in g.triplets() {
            pair_rels.entry((t.head, t.tail)).or_default().push(t.relation);
        }
        let mut rel_in_count = vec![0usize; r * n];
        let mut rel_out_count = vec![0usize; r * n];
        let mut union_in_count = vec![0usize; n];
        let mut union_out_count = vec![0usize; n];
        // Neighbors whose only link to the node is relation k do not count in ¬k.
        let mut sole_in = vec![0usize; r * n];
        let mut sole_out = vec![0usize; r * n];
        for (&(h, t), rels) in &pair_rels {
            union_in_count[t] += 1;
            union_out_count[h] += 1;
            for &k in rels {
                rel_in_count[k * n + t] += 1;
                rel_out_count[k * n + h] += 1;
            }
            if let [k] = rels.as_slice() {
                sole_in[k * n + t] += 1;
                sole_out[k * n + h] += 1;
            }
        }
        let mut rel_in = vec![0.0; r * n];
        let mut rel_out = vec![0.0; r * n];
        let mut comp_in = vec![0.0; r * n];
        let mut comp_out = vec![0.0; r * n];
        for k in 0..r {
            for i in 0..n {
                let row = k * n + i;
                rel_in[row] = count(rel_in_count[row]);
                rel_out[row] = count(rel_out_count[row]);
                comp_in[row] = count(union_in_count[i] - sole_in[row]);
                comp_out[row] = count(union_out_count[i] - sole_out[row]);
            }
        }
        let adj = UnionAdjacency::new(g);
        let union_in = Csr::from_lists((0..n).map(|i| adj.in_neighbors(i).to_vec()), agg);
        let union_out = Csr::from_lists((0..n).map(|i| adj.out_neighbors(i).to_vec()), agg);
        Self {
            num_nodes: n,
            num_channels: r,
            agg,
            bidirectional,
            rel_in,
            rel_out,
            comp_in,
            comp_out,
            union_in,
            union_out,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    fn rows(&self) -> usize {
        self.num_nodes * self.num_channels
    }

    /// Applies the neighborhood aggregation to every relation block.
    /// For `Max`, also returns the source row chosen for every output entry.
    fn aggregate(&self, csr: &Csr, h: &Array2<f64>) -> (Array2<f64>, Option<Vec<usize>>) {
        let n = self.num_nodes;
        let d = h.ncols();
        let mut out = Array2::<f64>::zeros((self.rows(), d));
        let src = h.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        match self.agg {
            Aggregation::Mean | Aggregation::Sum => {
                for k in 0..self.num_channels {
                    for i in 0..n {
                        let orow = (k * n + i) * d;
                        let (cols, ws) = csr.row(i);
                        for (&j, &w) in cols.iter().zip(ws) {
                            let irow = (k * n + j) * d;
                            for c in 0..d {
                                dst[orow + c] += w * src[irow + c];
                            }
                        }
                    }
                }
                (out, None)
            }
            Aggregation::Max => {
                let mut arg = vec![usize::MAX; self.rows() * d];
                for k in 0..self.num_channels {
                    for i in 0..n {
                        let orow = (k * n + i) * d;
                        let (cols, _) = csr.row(i);
                        for (pos, &j) in cols.iter().enumerate() {
                            let irow = (k * n + j) * d;
                            for c in 0..d {
                                if pos == 0 || src[irow + c] > dst[orow + c] {
                                    dst[orow + c] = src[irow + c];
                                    arg[orow + c] = k * n + j;
                                }
                            }
                        }
                    }
                }
                (out, Some(arg))
            }
        }
    }

    /// Adjoint of [`aggregate`](Self::aggregate), accumulated into `dh`.
    fn aggregate_adjoint(&self, csr: &Csr, arg: Option<&[usize]>, dout: &Array2<f64>, dh: &mut Array2<f64>) {
        let n = self.num_nodes;
        let d = dout.ncols();
        let g = dout.as_slice().unwrap();
        let dst = dh.as_slice_mut().unwrap();
        match arg {
            None => {
                for k in 0..self.num_channels {
                    for i in 0..n {
                        let orow = (k * n + i) * d;
                        let (cols, ws) = csr.row(i);
                        for (&j, &w) in cols.iter().zip(ws) {
                            let irow = (k * n + j) * d;
                            for c in 0..d {
                                dst[irow + c] += w * g[orow + c];
                            }
                        }
                    }
                }
            }
            Some(arg) => {
                for (idx, &src_row) in arg.iter().enumerate() {
                    if src_row != usize::MAX {
                        dst[src_row * d + idx % d] += g[idx];
                    }
                }
            }
        }
    }
}

struct LayerTape {
    input: Array2<f64>,
    agg_in: Array2<f64>,
    arg_in: Option<Vec<usize>>,
    agg_out: Option<Array2<f64>>,
    arg_out: Option<Vec<usize>>,
}

/// Per-layer channel outputs `h¹ … hᵀ` for both channel families.
pub struct Propagated {
    rel: Vec<Array2<f64>>,
    comp: Vec<Array2<f64>>,
    rel_tapes: Vec<LayerTape>,
    comp_tapes: Vec<LayerTape>,
}

fn first_layer(layer: &GnnLayer, agg_in: &[f64], agg_out: &[f64], bidirectional: bool) -> Array2<f64> {
    let rows = agg_in.len();
    let d = layer.w_self.nrows();
    let ws = layer.w_self.column(0);
    let wi = layer.w_in.column(0);
    let mut h = Array2::<f64>::zeros((rows, d));
    for (row, mut out) in h.axis_iter_mut(Axis(0)).enumerate() {
        out.assign(&ws);
        out.scaled_add(agg_in[row], &wi);
        if bidirectional {
            out.scaled_add(agg_out[row], &layer.w_out.as_ref().unwrap().column(0));
        }
    }
    h
}

fn first_layer_backward(dh: &Array2<f64>, agg_in: &[f64], agg_out: &[f64], grad: &mut GnnLayer) {
    let mut gs = grad.w_self.column_mut(0);
    gs += &dh.sum_axis(Axis(0));
    let a_in = ArrayView1::from(agg_in);
    let mut gi = grad.w_in.column_mut(0);
    gi += &dh.t().dot(&a_in);
    if let Some(wo) = &mut grad.w_out {
        let a_out = ArrayView1::from(agg_out);
        let mut go = wo.column_mut(0);
        go += &dh.t().dot(&a_out);
    }
}

impl EncoderParams {
    fn deep_layer(&self, layer: &GnnLayer, op: &GraphOperator, h: Array2<f64>) -> (Array2<f64>, LayerTape) {
        let (agg_in, arg_in) = op.aggregate(&op.union_in, &h);
        let mut out = h.dot(&layer.w_self.t()) + agg_in.dot(&layer.w_in.t());
        let (agg_out, arg_out) = if let Some(w_out) = &layer.w_out {
            let (a, arg) = op.aggregate(&op.union_out, &h);
            out += &a.dot(&w_out.t());
            (Some(a), arg)
        } else {
            (None, None)
        };
        (
            out,
            LayerTape {
                input: h,
                agg_in,
                arg_in,
                agg_out,
                arg_out,
            },
        )
    }

    fn deep_layer_backward(
        &self,
        layer: &GnnLayer,
        op: &GraphOperator,
        tape: &LayerTape,
        dout: &Array2<f64>,
        grad: &mut GnnLayer,
    ) -> Array2<f64> {
        grad.w_self += &dout.t().dot(&tape.input);
        grad.w_in += &dout.t().dot(&tape.agg_in);
        let mut dh = dout.dot(&layer.w_self);
        let d_agg_in = dout.dot(&layer.w_in);
        op.aggregate_adjoint(&op.union_in, tape.arg_in.as_deref(), &d_agg_in, &mut dh);
        if let (Some(w_out), Some(agg_out)) = (&layer.w_out, &tape.agg_out) {
            grad.w_out.as_mut().unwrap().scaled_add(1.0, &dout.t().dot(agg_out));
            let d_agg_out = dout.dot(w_out);
            op.aggregate_adjoint(&op.union_out, tape.arg_out.as_deref(), &d_agg_out, &mut dh);
        }
        dh
    }

    /// Runs all propagation layers on the operator's graph.
    pub fn propagate(&self, op: &GraphOperator) -> Propagated {
        let bi = op.bidirectional;
        let run = |layers: &[GnnLayer], a_in: &[f64], a_out: &[f64]| {
            let mut hs = vec![first_layer(&layers[0], a_in, a_out, bi)];
            let mut tapes = Vec::new();
            for layer in &layers[1..] {
                let (next, tape) = self.deep_layer(layer, op, hs.last().unwrap().clone());
                hs.push(next);
                tapes.push(tape);
            }
            (hs, tapes)
        };
        let (rel, rel_tapes) = run(&self.rel_layers, &op.rel_in, &op.rel_out);
        let (comp, comp_tapes) = run(&self.comp_layers, &op.comp_in, &op.comp_out);
        Propagated {
            rel,
            comp,
            rel_tapes,
            comp_tapes,
        }
    }

    fn gather_concat(&self, hs: &[Array2<f64>], rows: &[usize]) -> Array2<f64> {
        let d = self.config.hidden_dim;
        let mut z = Array2::<f64>::zeros((rows.len(), self.config.concat_dim()));
        for (p, &row) in rows.iter().enumerate() {
            z[[p, 0]] = 1.0;
            for (t, h) in hs.iter().enumerate() {
                z.slice_mut(s![p, 1 + t * d..1 + (t + 1) * d]).assign(&h.row(row));
            }
        }
        z
    }
}

/// Channel concatenations and combined embeddings for every `(node, relation)`.
#[derive(Debug, Clone)]
pub struct NodeRelEmbeddings {
    num_nodes: usize,
    num_relations: usize,
    /// `h[i,k]`, rows `k * n + i`, width `1 + T·d`.
    pub h_rel: Array2<f64>,
    /// `h[i,¬k]`.
    pub h_comp: Array2<f64>,
    /// `X[i,k]`, width `d`.
    pub x: Array2<f64>,
}

impl NodeRelEmbeddings {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn row(&self, node: usize, relation: usize) -> usize {
        relation * self.num_nodes + node
    }

    pub fn x(&self, node: usize, relation: usize) -> ArrayView1<'_, f64> {
        self.x.row(self.row(node, relation))
    }

    pub fn h_rel(&self, node: usize, relation: usize) -> ArrayView1<'_, f64> {
        self.h_rel.row(self.row(node, relation))
    }

    pub fn h_comp(&self, node: usize, relation: usize) -> ArrayView1<'_, f64> {
        self.h_comp.row(self.row(node, relation))
    }
}

pub fn encode_nodes(params: &EncoderParams, g: &KnowledgeGraph) -> NodeRelEmbeddings {
    let op = params.operator(g);
    encode_with(params, &op)
}

fn encode_with(params: &EncoderParams, op: &GraphOperator) -> NodeRelEmbeddings {
    let prop = params.propagate(op);
    let rows: Vec<usize> = (0..op.rows()).collect();
    let h_rel = params.gather_concat(&prop.rel, &rows);
    let h_comp = params.gather_concat(&prop.comp, &rows);
    let x = params.mlp_rel.forward(&h_rel) + params.mlp_comp.forward(&h_comp);
    NodeRelEmbeddings {
        num_nodes: op.num_nodes,
        num_relations: op.num_channels,
        h_rel,
        h_comp,
        x,
    }
}

fn head_input(
    config: &EncoderConfig,
    x: &Array2<f64>,
    row_of: impl Fn(usize, usize) -> usize,
    queries: &[Triplet],
    dists: &[[f64; 2]],
) -> Array2<f64> {
    let d = config.hidden_dim;
    let mut input = Array2::<f64>::zeros((queries.len(), config.head_input_dim()));
    for (q, t) in queries.iter().enumerate() {
        input
            .slice_mut(s![q, 0..d])
            .assign(&x.row(row_of(t.head, t.relation)));
        input
            .slice_mut(s![q, d..2 * d])
            .assign(&x.row(row_of(t.tail, t.relation)));
        if config.use_distance {
            let [f, b] = dists[q];
            input[[q, 2 * d]] = f;
            input[[q, 2 * d + 1]] = b;
        }
    }
    input
}

/// Scores a batch of queries against one graph, reusing the node encoding
/// and the distance cache across calls.
pub struct TripletScorer<'g> {
    params: &'g EncoderParams,
    embeddings: NodeRelEmbeddings,
    distances: DistanceCache<'g>,
}

impl<'g> TripletScorer<'g> {
    pub fn new(params: &'g EncoderParams, g: &'g KnowledgeGraph) -> Self {
        Self {
            params,
            embeddings: encode_nodes(params, g),
            distances: DistanceCache::new(g, params.config.distance_cap),
        }
    }

    pub fn embeddings(&self) -> &NodeRelEmbeddings {
        &self.embeddings
    }

    pub fn logits(&mut self, queries: &[Triplet]) -> Vec<f64> {
        let dists: Vec<[f64; 2]> = if self.params.config.use_distance {
            self.distances.features(queries).iter().map(DistanceFeature::encoded).collect()
        } else {
            Vec::new()
        };
        self.logits_with_features(queries, &dists)
    }

    /// Logits with caller-supplied encoded distance features, one pair per
    /// query. Ignored when distances are disabled.
    pub fn logits_with_features(&self, queries: &[Triplet], dists: &[[f64; 2]]) -> Vec<f64> {
        let emb = &self.embeddings;
        let input = head_input(
            &self.params.config,
            &emb.x,
            |i, k| emb.row(i, k),
            queries,
            dists,
        );
        self.params.head.forward(&input).column(0).to_vec()
    }

    pub fn score(&mut self, queries: &[Triplet]) -> Vec<f64> {
        self.logits(queries).into_iter().map(sigmoid).collect()
    }
}

/// Scores in `(0, 1)` for each query triplet.
pub fn score_triplets(params: &EncoderParams, g: &KnowledgeGraph, queries: &[Triplet]) -> Vec<f64> {
    TripletScorer::new(params, g).score(queries)
}

/// Forward state of a training batch, kept for the backward pass.
pub struct BatchForward<'a> {
    params: &'a EncoderParams,
    op: &'a GraphOperator,
    prop: Propagated,
    rows: Vec<usize>,
    queries: Vec<Triplet>,
    row_pos: HashMap<usize, usize>,
    rel_tape: MlpTape,
    comp_tape: MlpTape,
    head_tape: MlpTape,
    pub logits: Vec<f64>,
}

impl EncoderParams {
    /// Forward pass over `queries` on a prepared operator; `dists` must hold
    /// one feature per query when distances are enabled.
    pub fn forward_batch<'a>(
        &'a self,
        op: &'a GraphOperator,
        queries: &[Triplet],
        dists: &[DistanceFeature],
    ) -> BatchForward<'a> {
        let n = op.num_nodes;
        let prop = self.propagate(op);
        let mut rows = Vec::new();
        let mut row_pos = HashMap::new();
        for t in queries {
            for node in [t.head, t.tail] {
                let row = t.relation * n + node;
                row_pos.entry(row).or_insert_with(|| {
                    rows.push(row);
                    rows.len() - 1
                });
            }
        }
        let z_rel = self.gather_concat(&prop.rel, &rows);
        let z_comp = self.gather_concat(&prop.comp, &rows);
        let (x_rel, rel_tape) = self.mlp_rel.forward_tape(z_rel);
        let (x_comp, comp_tape) = self.mlp_comp.forward_tape(z_comp);
        let x = x_rel + x_comp;
        let enc: Vec<[f64; 2]> = dists.iter().map(DistanceFeature::encoded).collect();
        let input = head_input(&self.config, &x, |i, k| row_pos[&(k * n + i)], queries, &enc);
        let (out, head_tape) = self.head.forward_tape(input);
        BatchForward {
            params: self,
            op,
            prop,
            rows,
            queries: queries.to_vec(),
            row_pos,
            rel_tape,
            comp_tape,
            head_tape,
            logits: out.column(0).to_vec(),
        }
    }
}

impl BatchForward<'_> {
    /// Gradients of a loss with `∂L/∂logit = dlogits`.
    pub fn backward(&self, dlogits: &[f64]) -> EncoderParams {
        let params = self.params;
        let op = self.op;
        let n = op.num_nodes;
        let d = params.config.hidden_dim;
        let mut grad = params.zeros_like();

        let dout = Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec()).unwrap();
        let dinput = params.head.backward(&self.head_tape, dout, &mut grad.head);
        let mut dx = Array2::<f64>::zeros((self.rows.len(), d));
        for (q, t) in self.queries.iter().enumerate() {
            let ph = self.row_pos[&(t.relation * n + t.head)];
            let pt = self.row_pos[&(t.relation * n + t.tail)];
            let mut a = dx.row_mut(ph);
            a += &dinput.slice(s![q, 0..d]);
            let mut b = dx.row_mut(pt);
            b += &dinput.slice(s![q, d..2 * d]);
        }
        let dz_rel = params.mlp_rel.backward(&self.rel_tape, dx.clone(), &mut grad.mlp_rel);
        let dz_comp = params.mlp_comp.backward(&self.comp_tape, dx, &mut grad.mlp_comp);

        let channel_backward = |layers: &[GnnLayer],
                                hs: &[Array2<f64>],
                                tapes: &[LayerTape],
                                dz: &Array2<f64>,
                                a_in: &[f64],
                                a_out: &[f64],
                                grads: &mut Vec<GnnLayer>| {
            let total = layers.len();
            let mut dh: Vec<Array2<f64>> = hs.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
            for (p, &row) in self.rows.iter().enumerate() {
                for (t, dht) in dh.iter_mut().enumerate() {
                    let mut r = dht.row_mut(row);
                    r += &dz.slice(s![p, 1 + t * d..1 + (t + 1) * d]);
                }
            }
            for t in (1..total).rev() {
                let upstream = std::mem::replace(&mut dh[t], Array2::zeros((0, 0)));
                let back = params.deep_layer_backward(&layers[t], op, &tapes[t - 1], &upstream, &mut grads[t]);
                dh[t - 1] += &back;
            }
            first_layer_backward(&dh[0], a_in, a_out, &mut grads[0]);
        };
        channel_backward(
            &params.rel_layers,
            &self.prop.rel,
            &self.prop.rel_tapes,
            &dz_rel,
            &op.rel_in,
            &op.rel_out,
            &mut grad.rel_layers,
        );
        channel_backward(
            &params.comp_layers,
            &self.prop.comp,
            &self.prop.comp_tapes,
            &dz_comp,
            &op.comp_in,
            &op.comp_out,
            &mut grad.comp_layers,
        );
        grad
    }
}
