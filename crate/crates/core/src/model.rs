//! CVR model: node embedding, edge preference scoring, the two-filter graph
//! convolution and the three prediction heads.

use std::collections::{BTreeSet, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeLabel, NeighborSample, NodeKey, Role};
use crate::pipeline::{ClickSample, Features};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

/// How neighbour messages are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Per-edge mix of high- and low-pass filters driven by the preference.
    Hlgcn,
    /// Every edge gets preference 1 (plain normalised low-pass).
    LowPass,
}

/// How the preference of an unlabeled edge is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    ConvE,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub reshape_side: usize,
    pub categorical_dim: usize,
    pub conv_kernel: [usize; 2],
    pub conv_channels: usize,
    pub epsilon: f64,
    pub leaky_slope: f64,
    pub aggregator: Aggregator,
    pub scorer: Scorer,
    /// Aux heads back-propagate into the shared embedding trunk.
    pub aux_shared_trunk: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            reshape_side: 4,
            categorical_dim: 8,
            conv_kernel: [3, 3],
            conv_channels: 4,
            epsilon: 0.7,
            leaky_slope: 0.01,
            aggregator: Aggregator::Hlgcn,
            scorer: Scorer::ConvE,
            aux_shared_trunk: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.reshape_side;
        if self.embed_dim == 0 || r * r != self.embed_dim {
            return Err(Error::Config(format!(
                "embed_dim {} is not reshape_side^2 = {}",
                self.embed_dim,
                r * r
            )));
        }
        let [kh, kw] = self.conv_kernel;
        if kh == 0 || kw == 0 || kh > 2 * r || kw > r {
            return Err(Error::Config(format!(
                "conv kernel {kh}x{kw} does not fit the {}x{r} preference image",
                2 * r
            )));
        }
        if self.conv_channels == 0 || self.categorical_dim == 0 {
            return Err(Error::Config(
                "conv_channels and categorical_dim must be positive".into(),
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn conv_out_len(&self) -> usize {
        let r = self.reshape_side;
        (2 * r - self.conv_kernel[0] + 1) * (r - self.conv_kernel[1] + 1) * self.conv_channels
    }
}

/// Feature layout of one node role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSchema {
    pub dense: usize,
    pub categorical: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user: RoleSchema,
    pub item: RoleSchema,
}

impl FeatureSchema {
    pub fn of(sample: &ClickSample) -> Self {
        Self {
            user: RoleSchema {
                dense: sample.user_features.dense.len(),
                categorical: sample.user_features.categorical.len(),
            },
            item: RoleSchema {
                dense: sample.item_features.dense.len(),
                categorical: sample.item_features.categorical.len(),
            },
        }
    }

    pub fn role(&self, role: Role) -> RoleSchema {
        match role {
            Role::User => self.user,
            Role::Item => self.item,
        }
    }

    fn check(&self, role: Role, f: &Features) -> Result<()> {
        let s = self.role(role);
        if f.dense.len() != s.dense || f.categorical.len() != s.categorical {
            return Err(Error::Structural(format!(
                "{role:?} features have {} dense / {} categorical values, schema expects {} / {}",
                f.dense.len(),
                f.categorical.len(),
                s.dense,
                s.categorical
            )));
        }
        Ok(())
    }
}

/// Categorical id → embedding row, per field. Row 0 is reserved for ids not
/// seen when the vocabulary was built.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    user: Vec<HashMap<u32, usize>>,
    item: Vec<HashMap<u32, usize>>,
}

impl Vocabulary {
    pub fn build<'a>(
        schema: &FeatureSchema,
        samples: impl IntoIterator<Item = &'a ClickSample>,
    ) -> Self {
        let mut user: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); schema.user.categorical];
        let mut item: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); schema.item.categorical];
        for s in samples {
            for (set, &id) in user.iter_mut().zip(&s.user_features.categorical) {
                set.insert(id);
            }
            for (set, &id) in item.iter_mut().zip(&s.item_features.categorical) {
                set.insert(id);
            }
        }
        let index = |sets: Vec<BTreeSet<u32>>| {
            sets.into_iter()
                .map(|set| {
                    set.into_iter()
                        .enumerate()
                        .map(|(i, id)| (id, i + 1))
                        .collect()
                })
                .collect()
        };
        Self {
            user: index(user),
            item: index(item),
        }
    }

    fn fields(&self, role: Role) -> &[HashMap<u32, usize>] {
        match role {
            Role::User => &self.user,
            Role::Item => &self.item,
        }
    }

    /// Table rows for field `field` (known ids plus the OOV row).
    pub fn rows(&self, role: Role, field: usize) -> usize {
        self.fields(role)[field].len() + 1
    }

    pub fn row(&self, role: Role, field: usize, id: u32) -> usize {
        self.fields(role)[field].get(&id).copied().unwrap_or(0)
    }
}

/// Running per-feature range used for min-max scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMax {
    pub fn new(n: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; n],
            max: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn observe(&mut self, values: &[f64]) {
        for ((lo, hi), &v) in self.min.iter_mut().zip(self.max.iter_mut()).zip(values) {
            if v.is_finite() {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
    }

    /// Scaled value in `[0, 1]`; `0` for constant or unobserved features.
    pub fn scale(&self, i: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[i], self.max[i]);
        if !(hi > lo) {
            return 0.0;
        }
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.min[i], self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub user: MinMax,
    pub item: MinMax,
}

impl FeatureScaler {
    pub fn new(schema: &FeatureSchema) -> Self {
        Self {
            user: MinMax::new(schema.user.dense),
            item: MinMax::new(schema.item.dense),
        }
    }

    pub fn observe(&mut self, sample: &ClickSample) {
        self.user.observe(&sample.user_features.dense);
        self.item.observe(&sample.item_features.dense);
    }

    pub fn role(&self, role: Role) -> &MinMax {
        match role {
            Role::User => &self.user,
            Role::Item => &self.item,
        }
    }
}

#[derive(Debug, Clone)]
struct EmbedParams {
    tables: Vec<ParamId>,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct MlpParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
enum ScorerParams {
    ConvE {
        kernel: ParamId,
        bias: ParamId,
        projection: ParamId,
    },
    Mlp(MlpParams),
}

/// One edge of a convolution step. Endpoints index rows of the layer input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerEdge {
    pub user: usize,
    pub item: usize,
    pub label: EdgeLabel,
}

/// Structure of one convolution step: rows `0..targets` of the input are
/// updated; `degrees` covers every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub targets: usize,
    pub edges: Vec<LayerEdge>,
    pub degrees: Vec<usize>,
}

/// Head probabilities of one forward pass, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub y_p: Var,
    pub y_fn: Var,
    pub y_cvr: Var,
    /// Mean low-pass weight `(1 + p) / 2` over every aggregated edge;
    /// `None` when the neighbourhood had no edges.
    pub mean_filter_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutputs {
    pub y_p_hat: f64,
    pub y_fn_hat: f64,
    pub y_cvr_hat: f64,
}

impl ForwardOut {
    pub fn values(&self, tape: &Tape) -> HeadOutputs {
        let v = |x: Var| tape.value(x).data()[0];
        HeadOutputs {
            y_p_hat: v(self.y_p),
            y_fn_hat: v(self.y_fn),
            y_cvr_hat: v(self.y_cvr),
        }
    }
}

/// Model structure; the learnable values live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub schema: FeatureSchema,
    pub vocab: Vocabulary,
    user: EmbedParams,
    item: EmbedParams,
    scorer: ScorerParams,
    heads: [MlpParams; 3],
}

fn uniform(rng: &mut Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(
        rng,
        &[fan_in, fan_out],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
    )
}

fn add_mlp(
    set: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    input: usize,
    hidden: usize,
) -> MlpParams {
    MlpParams {
        w1: set.add(format!("{name}.w1"), glorot(rng, input, hidden)),
        b1: set.add(format!("{name}.b1"), Tensor::zeros(&[hidden])),
        w2: set.add(format!("{name}.w2"), glorot(rng, hidden, 1)),
        b2: set.add(format!("{name}.b2"), Tensor::zeros(&[1])),
    }
}

impl Model {
    /// Builds the structure and a freshly initialised parameter set.
    pub fn new(
        cfg: ModelConfig,
        schema: FeatureSchema,
        vocab: Vocabulary,
        rng: &mut Rng,
    ) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let d = cfg.embed_dim;
        let mut embed = |set: &mut ParamSet, role: Role, prefix: &str| {
            let s = schema.role(role);
            let tables = (0..s.categorical)
                .map(|f| {
                    let rows = vocab.fields(role).get(f).map_or(1, |m| m.len() + 1);
                    set.add(
                        format!("{prefix}.table{f}"),
                        uniform(rng, &[rows, cfg.categorical_dim], 0.1),
                    )
                })
                .collect();
            let input = s.categorical * cfg.categorical_dim + s.dense;
            EmbedParams {
                tables,
                weight: set.add(format!("{prefix}.w"), glorot(rng, input.max(1), d)),
                bias: set.add(format!("{prefix}.b"), Tensor::zeros(&[d])),
            }
        };
        if vocab.user.len() != schema.user.categorical
            || vocab.item.len() != schema.item.categorical
        {
            return Err(Error::Config(
                "vocabulary does not match the feature schema".into(),
            ));
        }
        let user = embed(&mut set, Role::User, "user");
        let item = embed(&mut set, Role::Item, "item");
        let scorer = match cfg.scorer {
            Scorer::ConvE => {
                let [kh, kw] = cfg.conv_kernel;
                let fan = kh * kw;
                ScorerParams::ConvE {
                    kernel: set.add(
                        "conve.kernel",
                        uniform(rng, &[kh, kw, cfg.conv_channels], (3.0 / fan as f64).sqrt()),
                    ),
                    bias: set.add("conve.bias", Tensor::zeros(&[cfg.conv_channels])),
                    projection: set.add("conve.projection", glorot(rng, cfg.conv_out_len(), 1)),
                }
            }
            Scorer::Mlp => ScorerParams::Mlp(add_mlp(&mut set, rng, "scorer", 2 * d, d)),
        };
        let heads = [
            add_mlp(&mut set, rng, "head_p", 2 * d, d),
            add_mlp(&mut set, rng, "head_fn", 2 * d, d),
            add_mlp(&mut set, rng, "head_cvr", 2 * d, d),
        ];
        Ok((
            Self {
                cfg,
                schema,
                vocab,
                user,
                item,
                scorer,
                heads,
            },
            set,
        ))
    }

    /// Parameters of the CVR pathway: embedding trunk, scorer and CVR head.
    pub fn cvr_params(&self, set: &ParamSet) -> Vec<ParamId> {
        let aux: Vec<ParamId> = self.aux_head_params();
        set.ids().filter(|id| !aux.contains(id)).collect()
    }

    /// Parameters owned by the p and fn heads.
    pub fn aux_head_params(&self) -> Vec<ParamId> {
        self.heads[..2]
            .iter()
            .flat_map(|h| [h.w1, h.b1, h.w2, h.b2])
            .collect()
    }

    /// Initial embeddings `[n, d]` for nodes of one role, in input order.
    fn embed_role(
        &self,
        tape: &mut Tape,
        scaler: &FeatureScaler,
        role: Role,
        feats: &[&Features],
    ) -> Result<Var> {
        let p = match role {
            Role::User => &self.user,
            Role::Item => &self.item,
        };
        let s = self.schema.role(role);
        for f in feats {
            self.schema.check(role, f)?;
        }
        let mut parts = Vec::with_capacity(s.categorical + 1);
        for (field, &table) in p.tables.iter().enumerate() {
            let rows: Vec<usize> = feats
                .iter()
                .map(|f| self.vocab.row(role, field, f.categorical[field]))
                .collect();
            let t = tape.param(table);
            parts.push(tape.embedding_lookup(t, &rows)?);
        }
        if s.dense > 0 {
            let mm = scaler.role(role);
            let mut dense = Vec::with_capacity(feats.len() * s.dense);
            for f in feats {
                dense.extend(f.dense.iter().enumerate().map(|(i, &v)| mm.scale(i, v)));
            }
            parts.push(tape.constant(Tensor::new(vec![feats.len(), s.dense], dense)?));
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else if parts.is_empty() {
            tape.constant(Tensor::zeros(&[feats.len(), 1]))
        } else {
            tape.concat(&parts, 1)?
        };
        let w = tape.param(p.weight);
        let b = tape.param(p.bias);
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    /// `e^(0)` of a single node, `[1, d]`.
    pub fn embed_node(
        &self,
        tape: &mut Tape,
        scaler: &FeatureScaler,
        role: Role,
        attr: &Features,
    ) -> Result<Var> {
        self.embed_role(tape, scaler, role, &[attr])
    }

    /// Initial embeddings of `nodes` in the given order, `[n, d]`.
    pub fn embed_nodes(
        &self,
        tape: &mut Tape,
        scaler: &FeatureScaler,
        nodes: &[(Role, &Features)],
    ) -> Result<Var> {
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut slot = Vec::with_capacity(nodes.len());
        for (role, f) in nodes {
            match role {
                Role::User => {
                    slot.push((Role::User, users.len()));
                    users.push(*f);
                }
                Role::Item => {
                    slot.push((Role::Item, items.len()));
                    items.push(*f);
                }
            }
        }
        let nu = users.len();
        let blocks: Vec<Var> = [(Role::User, users), (Role::Item, items)]
            .into_iter()
            .filter(|(_, f)| !f.is_empty())
            .map(|(role, f)| self.embed_role(tape, scaler, role, &f))
            .collect::<Result<_>>()?;
        let stacked = match blocks.as_slice() {
            [] => return Err(Error::Structural("no nodes to embed".into())),
            [one] => *one,
            _ => tape.concat(&blocks, 0)?,
        };
        let order: Vec<usize> = slot
            .iter()
            .map(|&(role, i)| {
                if role == Role::User || nu == 0 {
                    i
                } else {
                    nu + i
                }
            })
            .collect();
        if order.iter().enumerate().all(|(a, &b)| a == b) {
            return Ok(stacked);
        }
        tape.embedding_lookup(stacked, &order)
    }

    /// Preference scores `[E, 1]` for edges between rows of `h`.
    /// Positive edges are pinned to exactly 1.
    pub fn preferences(&self, tape: &mut Tape, h: Var, edges: &[LayerEdge]) -> Result<Var> {
        let n = edges.len();
        let scored: Vec<usize> = match self.cfg.aggregator {
            Aggregator::LowPass => Vec::new(),
            Aggregator::Hlgcn => (0..n)
                .filter(|&e| edges[e].label != EdgeLabel::Positive)
                .collect(),
        };
        let fixed: Vec<f64> = (0..n)
            .map(|e| {
                if scored.binary_search(&e).is_ok() {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let fixed = tape.constant(Tensor::new(vec![n, 1], fixed)?);
        if scored.is_empty() {
            return Ok(fixed);
        }
        let users: Vec<usize> = scored.iter().map(|&e| edges[e].user).collect();
        let items: Vec<usize> = scored.iter().map(|&e| edges[e].item).collect();
        let hu = tape.embedding_lookup(h, &users)?;
        let hi = tape.embedding_lookup(h, &items)?;
        let pair = tape.concat(&[hu, hi], 1)?;
        let c = self.score(tape, pair)?;
        let p = tape.tanh(c);
        let placed = tape.scatter_add_rows(p, &scored, n)?;
        tape.add(placed, fixed)
    }

    /// Raw preference logit `[E, 1]` from concatenated endpoint embeddings `[E, 2d]`.
    fn score(&self, tape: &mut Tape, pair: Var) -> Result<Var> {
        let e = tape.value(pair).shape()[0];
        match &self.scorer {
            ScorerParams::ConvE {
                kernel,
                bias,
                projection,
            } => {
                let r = self.cfg.reshape_side;
                // user rows on top of item rows: a 2r x r image per edge
                let img = tape.reshape(pair, &[e, 2 * r, r])?;
                let k = tape.param(*kernel);
                let b = tape.param(*bias);
                let fmap = tape.conv2d(img, k, b)?;
                let flat = tape.flatten(fmap)?;
                let w = tape.param(*projection);
                tape.matmul(flat, w)
            }
            ScorerParams::Mlp(m) => self.mlp(tape, m, pair),
        }
    }

    fn mlp(&self, tape: &mut Tape, m: &MlpParams, x: Var) -> Result<Var> {
        let w1 = tape.param(m.w1);
        let b1 = tape.param(m.b1);
        let w2 = tape.param(m.w2);
        let b2 = tape.param(m.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.leaky_relu(h, self.cfg.leaky_slope);
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }

    /// Preference of one edge from two `[1, d]` embeddings.
    pub fn compute_preference(
        &self,
        tape: &mut Tape,
        e_u: Var,
        e_i: Var,
        label: EdgeLabel,
    ) -> Result<Var> {
        let h = tape.concat(&[e_u, e_i], 0)?;
        self.preferences(
            tape,
            h,
            &[LayerEdge {
                user: 0,
                item: 1,
                label,
            }],
        )
    }

    /// One convolution step with preferences scored from `h_prev`.
    /// Returns the new target embeddings and the per-edge preferences.
    pub fn hlgcn_layer(
        &self,
        tape: &mut Tape,
        layer: &LayerGraph,
        h_prev: Var,
        h0: Var,
    ) -> Result<(Var, Var)> {
        let p = self.preferences(tape, h_prev, &layer.edges)?;
        let out = hlgcn_aggregate(tape, layer, h_prev, h0, p, self.cfg.epsilon)?;
        Ok((out, p))
    }

    fn head(&self, tape: &mut Tape, idx: usize, z: Var) -> Result<Var> {
        let logit = self.mlp(tape, &self.heads[idx], z)?;
        Ok(tape.sigmoid(logit))
    }

    /// Head probabilities from the final `[1, 2d]` pair embedding.
    pub fn heads(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var, Var)> {
        let z_aux = if self.cfg.aux_shared_trunk {
            z
        } else {
            tape.stop_gradient(z)
        };
        let y_p = self.head(tape, 0, z_aux)?;
        let y_fn = self.head(tape, 1, z_aux)?;
        let y_cvr = self.head(tape, 2, z)?;
        Ok((y_p, y_fn, y_cvr))
    }

    /// Full pass over a neighbourhood whose seeds include `user` and `item`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scaler: &FeatureScaler,
        sample: &NeighborSample,
        user: NodeKey,
        item: NodeKey,
    ) -> Result<ForwardOut> {
        let missing = |k: NodeKey| Error::Structural(format!("seed {k} not in neighbour sample"));
        let ui = sample.index_of(user).ok_or_else(|| missing(user))?;
        let ii = sample.index_of(item).ok_or_else(|| missing(item))?;
        let k = sample.hops.max(1);
        let nodes: Vec<(Role, &Features)> = sample
            .nodes
            .iter()
            .map(|n| (n.key.role, &n.attribute))
            .collect();
        let h0 = self.embed_nodes(tape, scaler, &nodes)?;
        let degrees: Vec<usize> = sample.nodes.iter().map(|n| n.degree).collect();

        let mut h = h0;
        let mut weight_sum = 0.0;
        let mut weight_n = 0usize;
        for l in 1..=k {
            let targets = sample.prefix_len(k - l);
            let edges: Vec<LayerEdge> = sample
                .edges
                .iter()
                .filter(|e| e.user < targets || e.item < targets)
                .map(|e| LayerEdge {
                    user: e.user,
                    item: e.item,
                    label: e.label,
                })
                .collect();
            let layer = LayerGraph {
                targets,
                edges,
                degrees: degrees.clone(),
            };
            let (next, p) = self.hlgcn_layer(tape, &layer, h, h0)?;
            for &pv in tape.value(p).data() {
                weight_sum += (1.0 + pv) / 2.0;
                weight_n += 1;
            }
            h = next;
        }
        // seeds sit at hop 0, inside every prefix
        let eu = tape.embedding_lookup(h, &[ui])?;
        let ei = tape.embedding_lookup(h, &[ii])?;
        let z = tape.concat(&[eu, ei], 1)?;
        let (y_p, y_fn, y_cvr) = self.heads(tape, z)?;
        Ok(ForwardOut {
            y_p,
            y_fn,
            y_cvr,
            mean_filter_weight: (weight_n > 0).then(|| weight_sum / weight_n as f64),
        })
    }
}

/// `e_t = ε·e_t^(0) + Σ_{(t,s)} p_ts · e_s / sqrt(d_t d_s)` for every target row.
pub fn hlgcn_aggregate(
    tape: &mut Tape,
    layer: &LayerGraph,
    h_prev: Var,
    h0: Var,
    p: Var,
    epsilon: f64,
) -> Result<Var> {
    let n_t = layer.targets;
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    let mut edge_of = Vec::new();
    let mut norm = Vec::new();
    let mut push = |t: usize, s: usize, e: usize| -> Result<()> {
        let (dt, ds) = (layer.degrees[t], layer.degrees[s]);
        assert!(
            dt >= 1 && ds >= 1,
            "aggregated edge with zero degree endpoint"
        );
        targets.push(t);
        sources.push(s);
        edge_of.push(e);
        norm.push(1.0 / ((dt * ds) as f64).sqrt());
        Ok(())
    };
    for (e, edge) in layer.edges.iter().enumerate() {
        if edge.user < n_t {
            push(edge.user, edge.item, e)?;
        }
        if edge.item < n_t {
            push(edge.item, edge.user, e)?;
        }
    }
    let rows: Vec<usize> = (0..n_t).collect();
    let base = tape.embedding_lookup(h0, &rows)?;
    let base = tape.scale(base, epsilon);
    if targets.is_empty() {
        return Ok(base);
    }
    let msgs = tape.embedding_lookup(h_prev, &sources)?;
    let pe = tape.embedding_lookup(p, &edge_of)?;
    let norm = tape.constant(Tensor::new(vec![norm.len(), 1], norm)?);
    let coef = tape.mul(pe, norm)?;
    let weighted = tape.mul_rows(msgs, coef)?;
    let agg = tape.scatter_add_rows(weighted, &targets, n_t)?;
    tape.add(base, agg)
}

/// Low/high-pass filter weights implied by a preference: `((1-p)/2, (1+p)/2)`.
pub fn filter_weights(p: f64) -> (f64, f64) {
    ((1.0 - p) / 2.0, (1.0 + p) / 2.0)
}
