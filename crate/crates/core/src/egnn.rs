//! SE(3)-equivariant message passing over kNN graphs with update and condition nodes.
//!
//! Update nodes move; condition nodes only exchange features. Every layer rebuilds
//! the kNN graph from the current coordinates, updates features by attention over
//! incoming messages, then moves update nodes along gated relative vectors.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const RBF_COUNT: usize = 16;
const RBF_MAX: f64 = 10.0;
const DIST_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;
const TIME_FREQS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Update,
    Condition,
}

/// Class of a directed edge `j -> i`, keyed by (receiver role, sender role).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeTag {
    UpdateUpdate,
    UpdateCondition,
    ConditionUpdate,
    ConditionCondition,
}

impl EdgeTag {
    pub fn of(receiver: Role, sender: Role) -> Self {
        match (receiver, sender) {
            (Role::Update, Role::Update) => EdgeTag::UpdateUpdate,
            (Role::Update, Role::Condition) => EdgeTag::UpdateCondition,
            (Role::Condition, Role::Update) => EdgeTag::ConditionUpdate,
            (Role::Condition, Role::Condition) => EdgeTag::ConditionCondition,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Coordinates, features and roles of one point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSet {
    pub x: Tensor,
    pub h: Tensor,
    pub role: Vec<Role>,
}

impl NodeSet {
    pub fn new(x: Tensor, h: Tensor, role: Vec<Role>) -> Result<Self> {
        if x.cols != 3 {
            return Err(Error::shape(format!("{}x3", x.rows), format!("{}x{}", x.rows, x.cols)));
        }
        if h.rows != x.rows || role.len() != x.rows {
            return Err(Error::shape(
                format!("{} rows", x.rows),
                format!("h {} rows, {} roles", h.rows, role.len()),
            ));
        }
        if !x.is_finite() || !h.is_finite() {
            return Err(Error::NonFinite("node set".into()));
        }
        Ok(NodeSet { x, h, role })
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    pub fn update_mask(&self) -> Vec<bool> {
        self.role.iter().map(|r| *r == Role::Update).collect()
    }
}

/// Directed edges sorted by receiver; within a receiver, by increasing distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub tag: Vec<EdgeTag>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Senders of node `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.dst
            .iter()
            .zip(self.src.iter())
            .filter(|(d, _)| **d == i)
            .map(|(_, s)| *s)
            .collect()
    }
}

/// Each node receives edges from its `min(k, N-1)` nearest other nodes.
/// Distance ties are broken by the lower node index.
pub fn knn_graph(x: &Tensor, role: &[Role], k: usize) -> Result<Graph> {
    let n = x.rows;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("kNN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let kk = k.min(n - 1);
    let mut src = Vec::with_capacity(n * kk);
    let mut dst = Vec::with_capacity(n * kk);
    let mut tag = Vec::with_capacity(n * kk);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let xi = x.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let xj = x.row(j);
            let d2: f64 = (0..3).map(|c| (xi[c] - xj[c]) * (xi[c] - xj[c])).sum();
            cand.push((d2, j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &cand[..kk] {
            src.push(j);
            dst.push(i);
            tag.push(EdgeTag::of(role[i], role[j]));
        }
    }
    Ok(Graph {
        src: src.into(),
        dst: dst.into(),
        tag,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub k: usize,
    /// Attention-weighted aggregation; plain sums when false.
    pub attention: bool,
    pub time_conditioned: bool,
    /// Initial gain of the coordinate gate's output layer.
    pub coord_gain: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.k == 0 {
            return Err(Error::Config("hidden, heads and k must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide hidden width {}",
                self.heads, self.hidden
            )));
        }
        Ok(())
    }
}

/// First layer of an edge MLP, split so the node terms are computed once per node.
#[derive(Clone, Copy, Debug)]
struct EdgeLinear {
    recv: Linear,
    send: Linear,
    edge: Linear,
}

impl EdgeLinear {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, f: usize, out: usize) -> Self {
        EdgeLinear {
            recv: Linear::new(init, &format!("{name}.recv"), d, out, false, 1.0),
            send: Linear::new(init, &format!("{name}.send"), d, out, false, 1.0),
            edge: Linear::new(init, &format!("{name}.edge"), f, out, true, 1.0),
        }
    }

    fn forward(&self, ctx: &Ctx<'_>, hn: Var, ef: Var, g: &Graph) -> Var {
        let t = ctx.tape;
        let a = t.gather_rows(self.recv.forward(ctx, hn), g.dst.clone());
        let b = t.gather_rows(self.send.forward(ctx, hn), g.src.clone());
        t.add(t.add(a, b), self.edge.forward(ctx, ef))
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    q: Linear,
    k: EdgeLinear,
    v1: EdgeLinear,
    v2: Linear,
    out1: Linear,
    out2: Linear,
    qx: Linear,
    kx: EdgeLinear,
    g1: EdgeLinear,
    g2: Linear,
}

/// Weights of the shared backbone.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Vec<LayerParams>,
    time: Option<Linear>,
}

/// Non-differentiable per-call constants.
struct Consts {
    centers: Rc<[f64]>,
    gamma: f64,
    bsum: Var,
    bexp: Var,
    hmean: Var,
}

impl Backbone {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, prefix: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let h = config.heads;
        let f = RBF_COUNT + 4;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(LayerParams {
                q: Linear::new(init, &format!("{p}.q"), d, d, false, 1.0),
                k: EdgeLinear::new(init, &format!("{p}.k"), d, f, d),
                v1: EdgeLinear::new(init, &format!("{p}.v1"), d, f, d),
                v2: Linear::new(init, &format!("{p}.v2"), d, d, true, 1.0),
                out1: Linear::new(init, &format!("{p}.out1"), 2 * d, d, true, 1.0),
                out2: Linear::new(init, &format!("{p}.out2"), d, d, true, 1.0),
                qx: Linear::new(init, &format!("{p}.qx"), d, d, false, 1.0),
                kx: EdgeLinear::new(init, &format!("{p}.kx"), d, f, d),
                g1: EdgeLinear::new(init, &format!("{p}.g1"), d, f, d),
                g2: Linear::new(init, &format!("{p}.g2"), d, h, true, config.coord_gain),
            });
        }
        let time = config
            .time_conditioned
            .then(|| Linear::new(init, &format!("{prefix}.time"), 2 * TIME_FREQS, d, true, 1.0));
        Ok(Backbone {
            config,
            layers,
            time,
        })
    }

    /// Final layer of each coordinate gate network.
    pub fn gate_output(&self, layer: usize) -> Linear {
        self.layers[layer].g2
    }

    fn consts(&self, tape: &Tape) -> Consts {
        let d = self.config.hidden;
        let h = self.config.heads;
        let dh = d / h;
        let centers: Rc<[f64]> = (0..RBF_COUNT)
            .map(|m| RBF_MAX * m as f64 / (RBF_COUNT - 1) as f64)
            .collect();
        let spacing = RBF_MAX / (RBF_COUNT - 1) as f64;
        let mut bsum = Tensor::zeros(d, h);
        for c in 0..d {
            *bsum.at_mut(c, c / dh) = 1.0;
        }
        Consts {
            centers,
            gamma: 1.0 / (spacing * spacing),
            bexp: tape.constant(bsum.transpose()),
            bsum: tape.constant(bsum),
            hmean: tape.constant(Tensor::filled(h, 1, 1.0 / h as f64)),
        }
    }

    /// Sinusoidal features of `t` mapped to the hidden width.
    pub fn time_embedding(&self, ctx: &Ctx<'_>, t: f64) -> Option<Var> {
        let lin = self.time?;
        let mut feats = Vec::with_capacity(2 * TIME_FREQS);
        for k in 0..TIME_FREQS {
            let w = std::f64::consts::PI * (1u32 << k) as f64 / 2.0;
            feats.push((w * t).sin());
            feats.push((w * t).cos());
        }
        let f = ctx.tape.constant(Tensor::from_vec(1, 2 * TIME_FREQS, feats));
        Some(lin.forward(ctx, f))
    }

    fn layer(
        &self,
        ctx: &Ctx<'_>,
        c: &Consts,
        l: usize,
        x: Var,
        h: Var,
        g: &Graph,
        mask: &Rc<[bool]>,
        temb: Option<Var>,
    ) -> (Var, Var) {
        let t = ctx.tape;
        let p = &self.layers[l];
        let n = t.shape(x).0;
        let heads = self.config.heads;
        let dh = (self.config.hidden / heads) as f64;

        let h_in = match temb {
            Some(e) => t.add_row(h, e),
            None => h,
        };
        let rel = t.sub(t.gather_rows(x, g.dst.clone()), t.gather_rows(x, g.src.clone()));
        let d = t.sqrt(t.add_scalar(t.row_sum(t.square(rel)), DIST_EPS));
        let rbf = t.rbf(d, c.centers.clone(), c.gamma);
        let mut tags = Tensor::zeros(g.len(), 4);
        for (e, tag) in g.tag.iter().enumerate() {
            *tags.at_mut(e, tag.index()) = 1.0;
        }
        let ef = t.concat_cols(&[rbf, t.constant(tags)]);

        let hn = t.layer_norm(h_in, LN_EPS);
        let v = p.v2.forward(ctx, t.silu(p.v1.forward(ctx, hn, ef, g)));
        let msg = if self.config.attention {
            let q = t.gather_rows(p.q.forward(ctx, hn), g.dst.clone());
            let k = p.k.forward(ctx, hn, ef, g);
            let logits = t.scale(t.matmul(t.mul(q, k), c.bsum), 1.0 / dh.sqrt());
            let a = t.segment_softmax(logits, g.dst.clone(), n);
            t.mul(t.matmul(a, c.bexp), v)
        } else {
            v
        };
        let agg = t.scatter_add_rows(msg, g.dst.clone(), n);
        let upd = p.out2.forward(ctx, t.silu(p.out1.forward(ctx, t.concat_cols(&[agg, hn]))));
        let h_new = t.add(h, upd);

        let hn2 = t.layer_norm(h_new, LN_EPS);
        let gate = p.g2.forward(ctx, t.silu(p.g1.forward(ctx, hn2, ef, g)));
        let w = if self.config.attention {
            let q = t.gather_rows(p.qx.forward(ctx, hn2), g.dst.clone());
            let k = p.kx.forward(ctx, hn2, ef, g);
            let logits = t.scale(t.matmul(t.mul(q, k), c.bsum), 1.0 / dh.sqrt());
            t.mul(t.segment_softmax(logits, g.dst.clone(), n), gate)
        } else {
            gate
        };
        let coef = t.mul(t.matmul(w, c.hmean), t.recip(t.add_scalar(d, 1.0)));
        let dx = t.scatter_add_rows(t.mul_col(rel, coef), g.dst.clone(), n);
        let x_new = t.masked_add_rows(x, dx, mask.clone());
        (x_new, h_new)
    }

    /// Runs all layers on the tape. `x` and `h` cover every node in `role` order.
    /// Returned features are layer-normalised.
    pub fn forward(
        &self,
        ctx: &Ctx<'_>,
        x: Var,
        h: Var,
        role: &[Role],
        time: Option<f64>,
    ) -> Result<(Var, Var)> {
        let t = ctx.tape;
        check_inputs(&t.value(x), &t.value(h), role, self.config.hidden)?;
        let c = self.consts(t);
        let temb = match time {
            Some(tv) if self.time.is_some() => {
                if !(0.0..=1.0).contains(&tv) {
                    return Err(Error::InvalidArgument(format!("time {tv} outside [0, 1]")));
                }
                self.time_embedding(ctx, tv)
            }
            _ => None,
        };
        let mask: Rc<[bool]> = role.iter().map(|r| *r == Role::Update).collect();
        let (mut x, mut h) = (x, h);
        for l in 0..self.layers.len() {
            let g = knn_graph(&t.value(x), role, self.config.k)?;
            (x, h) = self.layer(ctx, &c, l, x, h, &g, &mask, temb);
            if !t.value(x).is_finite() || !t.value(h).is_finite() {
                return Err(Error::NonFinite(format!("backbone layer {l}")));
            }
        }
        Ok((x, t.layer_norm(h, LN_EPS)))
    }
}

fn check_inputs(x: &Tensor, h: &Tensor, role: &[Role], hidden: usize) -> Result<()> {
    if x.cols != 3 || h.cols != hidden || x.rows != h.rows || role.len() != x.rows {
        return Err(Error::shape(
            format!("{n}x3 coords, {n}x{hidden} features, {n} roles", n = role.len()),
            format!("{}x{} coords, {}x{} features", x.rows, x.cols, h.rows, h.cols),
        ));
    }
    if !role.contains(&Role::Update) {
        return Err(Error::InvalidArgument("no update nodes".into()));
    }
    let mut mean = [0.0; 3];
    let mut nc = 0usize;
    for (i, r) in role.iter().enumerate() {
        if *r == Role::Condition {
            nc += 1;
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
    }
    if nc > 0 {
        let off = mean.iter().map(|m| (m / nc as f64).abs()).fold(0.0, f64::max);
        if off > 1e-6 {
            return Err(Error::Uncentered(off));
        }
    }
    Ok(())
}

/// One layer applied outside of training.
pub fn layer_forward(
    nodes: &NodeSet,
    graph: &Graph,
    backbone: &Backbone,
    store: &ParamStore,
    layer: usize,
    time_embed: Option<&[f64]>,
) -> Result<NodeSet> {
    if layer >= backbone.layers.len() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if graph.src.iter().chain(graph.dst.iter()).any(|&i| i >= nodes.len()) {
        return Err(Error::InvalidArgument("edge endpoint out of range".into()));
    }
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store);
    let c = backbone.consts(&tape);
    let temb = time_embed.map(|e| tape.constant(Tensor::from_vec(1, e.len(), e.to_vec())));
    let x = tape.constant(nodes.x.clone());
    let h = tape.constant(nodes.h.clone());
    let mask: Rc<[bool]> = nodes.update_mask().into();
    let (x, h) = backbone.layer(&ctx, &c, layer, x, h, graph, &mask, temb);
    let (x, h) = (tape.value(x).clone(), tape.value(h).clone());
    if !x.is_finite() || !h.is_finite() {
        return Err(Error::NonFinite(format!("backbone layer {layer}")));
    }
    NodeSet::new(x, h, nodes.role.clone())
}

/// Runs the backbone on update nodes conditioned on (centred) condition nodes.
/// Returns the updated update nodes and the final condition-node features.
pub fn backbone_forward(
    update: &NodeSet,
    condition: &NodeSet,
    backbone: &Backbone,
    store: &ParamStore,
    time: Option<f64>,
) -> Result<(NodeSet, Tensor)> {
    let nu = update.len();
    let nc = condition.len();
    let mut xs = update.x.data.clone();
    xs.extend_from_slice(&condition.x.data);
    let mut hs = update.h.data.clone();
    hs.extend_from_slice(&condition.h.data);
    let d = update.h.cols;
    let mut role = vec![Role::Update; nu];
    role.extend(std::iter::repeat_n(Role::Condition, nc));
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store);
    let x = tape.constant(Tensor::from_vec(nu + nc, 3, xs));
    let h = tape.constant(Tensor::from_vec(nu + nc, d, hs));
    let (x, h) = backbone.forward(&ctx, x, h, &role, time)?;
    let x = tape.value(x);
    let h = tape.value(h);
    let out = NodeSet::new(x.slice_rows(0, nu), h.slice_rows(0, nu), update.role.clone())?;
    Ok((out, h.slice_rows(nu, nc)))
}
