//! FCNN, homogeneous GNN and heterogeneous GNN over the object graph, with
//! type-specific embedders and the label-weighted loss.
//!
//! GNN node rows are grouped by object class (generators, loads, line
//! endpoints) across the whole batch so each embedder runs as one matrix
//! product; [`Batch`] keeps the mapping back to per-sample object order.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actions::predicted_substation;
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Matrix, ParamId, ParamStore, Pairs, Tape, Var};
use crate::dataset::{feature_layout, n_features, Datapoint};
use crate::error::{Error, Result};
use crate::graphs::{build_graph, GridGraph, Representation};
use crate::grid::{GridSpec, ObjectKind};
use crate::scalar::Scalar;

/// Bounds applied to `p` inside the logarithms of the loss.
pub const LOSS_CLAMP: f64 = 1e-12;

/// Fan-in gain that keeps the deep GNNs out of sigmoid saturation at start.
/// The default of 5 drives every output to 0 or 1 and training stalls.
pub const TRAINABLE_INIT_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fcnn,
    HomGnn,
    HetGnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Fcnn, ModelKind::HomGnn, ModelKind::HetGnn];

    pub fn is_gnn(self) -> bool {
        self != ModelKind::Fcnn
    }

    pub fn representation(self) -> Option<Representation> {
        match self {
            ModelKind::Fcnn => None,
            ModelKind::HomGnn => Some(Representation::Homogeneous),
            ModelKind::HetGnn => Some(Representation::Heterogeneous),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fcnn => "fcnn",
            ModelKind::HomGnn => "hom_gnn",
            ModelKind::HetGnn => "het_gnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcnn" => Ok(ModelKind::Fcnn),
            "hom_gnn" => Ok(ModelKind::HomGnn),
            "het_gnn" => Ok(ModelKind::HetGnn),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
    /// Fan-in-scaled gain unless `raw_init` is set, in which case it is the
    /// weight standard deviation itself.
    pub init_sigma: f64,
    #[serde(default)]
    pub raw_init: bool,
    /// Loss weight of objects away from the target and predicted substations.
    pub label_weight: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        let (hidden_layers, hidden_dim) = match kind {
            ModelKind::Fcnn => (4, 230),
            _ => (8, 180),
        };
        Self {
            kind,
            hidden_layers,
            hidden_dim,
            leaky_slope: 0.1,
            init_sigma: 5.0,
            raw_init: false,
            label_weight: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.label_weight > 0.0 && self.label_weight <= 1.0) {
            return Err(Error::Config(format!(
                "label_weight must lie in (0, 1], got {}",
                self.label_weight
            )));
        }
        if !(self.init_sigma > 0.0) || !self.leaky_slope.is_finite() {
            return Err(Error::Config("init_sigma must be positive and leaky_slope finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct MessageLayer {
    w_self: ParamId,
    /// Homogeneous layers use the same id for `w_same` and `w_line`.
    w_same: ParamId,
    w_line: ParamId,
    w_other: Option<ParamId>,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Arch {
    Fcnn(Vec<Dense>),
    Gnn {
        /// Generator, load and endpoint two-layer embedders.
        embed: [[Dense; 2]; 3],
        layers: Vec<MessageLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

/// Directed `(dst, src)` pairs per edge type over the batch's node rows.
#[derive(Debug, Clone)]
pub struct EdgeSets {
    pub n_nodes: usize,
    pub same: Pairs,
    pub other: Pairs,
    pub line: Pairs,
}

impl EdgeSets {
    fn from_graphs(graphs: &[(GridGraph, Vec<usize>)], n_nodes: usize) -> Self {
        let mut same = Vec::new();
        let mut other = Vec::new();
        let mut line = Vec::new();
        for (g, rows) in graphs {
            for (list, out) in [(&g.same_busbar, &mut same), (&g.other_busbar, &mut other), (&g.line, &mut line)] {
                for &(a, b) in list {
                    let (ra, rb) = (rows[a] as u32, rows[b] as u32);
                    out.push((ra, rb));
                    out.push((rb, ra));
                }
            }
        }
        Self {
            n_nodes,
            same: Rc::new(same),
            other: Rc::new(other),
            line: Rc::new(line),
        }
    }
}

const CLASSES: usize = 3;

fn class_of(kind: ObjectKind) -> usize {
    match kind {
        ObjectKind::Generator => 0,
        ObjectKind::Load => 1,
        ObjectKind::LineOrigin | ObjectKind::LineExtremity => 2,
    }
}

fn class_width(class: usize) -> usize {
    match class {
        0 => crate::dataset::GEN_FEATURES,
        1 => crate::dataset::LOAD_FEATURES,
        _ => crate::dataset::ENDPOINT_FEATURES,
    }
}

#[derive(Debug, Clone)]
enum Input<T> {
    Dense(Matrix<T>),
    Graph {
        /// Per-class feature rows (generators, loads, endpoints).
        x: [Matrix<T>; CLASSES],
        edges: EdgeSets,
    },
}

/// Model input for a set of datapoints plus the row of each `(sample,
/// object)` pair in the output.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub size: usize,
    pub n_objects: usize,
    input: Input<T>,
    /// `rows[b * n_objects + o]` is the flat output index of object `o` of
    /// sample `b`.
    rows: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(spec: &GridSpec, kind: ModelKind, points: &[&Datapoint]) -> Result<Self> {
        let n_obj = spec.n_objects();
        let nf = n_features(spec);
        for p in points {
            if p.features.len() != nf || p.topology.len() != n_obj {
                return Err(Error::ShapeMismatch(format!(
                    "datapoint has {} features and {} topology entries, expected {nf} and {n_obj}",
                    p.features.len(),
                    p.topology.len()
                )));
            }
        }
        let b = points.len();
        let conv = |v: f64| T::from_f64_lossy(v);
        match kind.representation() {
            None => {
                let width = nf + n_obj;
                let mut data = Vec::with_capacity(b * width);
                for p in points {
                    data.extend(p.features.iter().map(|&v| conv(v)));
                    data.extend(p.topology.0.iter().map(|&v| conv(v as f64)));
                }
                Ok(Self {
                    size: b,
                    n_objects: n_obj,
                    input: Input::Dense(Matrix::from_vec(b, width, data)?),
                    rows: (0..b * n_obj).collect(),
                })
            }
            Some(repr) => {
                let layout = feature_layout(spec);
                let mut members: [Vec<usize>; CLASSES] = Default::default();
                let mut index_in_class = vec![0; n_obj];
                for (o, obj) in spec.objects().iter().enumerate() {
                    let c = class_of(obj.kind);
                    index_in_class[o] = members[c].len();
                    members[c].push(o);
                }
                let mut class_offset = [0; CLASSES];
                for c in 1..CLASSES {
                    class_offset[c] = class_offset[c - 1] + b * members[c - 1].len();
                }
                let mut rows = Vec::with_capacity(b * n_obj);
                let mut x: [Vec<T>; CLASSES] = Default::default();
                let mut graphs = Vec::with_capacity(b);
                for (s, p) in points.iter().enumerate() {
                    let sample_rows: Vec<usize> = spec
                        .objects()
                        .iter()
                        .enumerate()
                        .map(|(o, obj)| {
                            let c = class_of(obj.kind);
                            class_offset[c] + s * members[c].len() + index_in_class[o]
                        })
                        .collect();
                    for c in 0..CLASSES {
                        for &o in &members[c] {
                            let (off, w) = layout[o];
                            x[c].extend(p.features[off..off + w].iter().map(|&v| conv(v)));
                        }
                    }
                    graphs.push((build_graph(spec, &p.topology, repr), sample_rows.clone()));
                    rows.extend(sample_rows);
                }
                let x = [0, 1, 2].map(|c| {
                    let w = class_width(c);
                    Matrix::from_vec(x[c].len() / w, w, std::mem::take(&mut x[c])).expect("class block shape")
                });
                Ok(Self {
                    size: b,
                    n_objects: n_obj,
                    input: Input::Graph {
                        x,
                        edges: EdgeSets::from_graphs(&graphs, b * n_obj),
                    },
                    rows,
                })
            }
        }
    }

    /// Per-sample object-order values of an output-shaped matrix.
    pub fn unpack(&self, out: &Matrix<T>) -> Vec<Vec<f64>> {
        (0..self.size)
            .map(|s| {
                (0..self.n_objects)
                    .map(|o| out.data[self.rows[s * self.n_objects + o]].to_f64_lossy())
                    .collect()
            })
            .collect()
    }

    /// Inverse of [`Batch::unpack`]: lays per-sample vectors out in output
    /// order with the given shape.
    fn pack(&self, values: &[Vec<f64>], shape: (usize, usize)) -> Matrix<T> {
        let mut m = Matrix::zeros(shape.0, shape.1);
        for (s, v) in values.iter().enumerate() {
            for (o, &x) in v.iter().enumerate() {
                m.data[self.rows[s * self.n_objects + o]] = T::from_f64_lossy(x);
            }
        }
        m
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Sigmoid outputs, `batch × n_objects` (FCNN) or `nodes × 1` (GNN).
    pub out: Var,
    /// Node embeddings after the embedders and after each hidden message
    /// layer (empty for the FCNN).
    pub embeddings: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: weights `N(0, (σ/√fan_in)²)` (or `N(0, σ²)` with
    /// `raw_init`), biases zero.
    pub fn init(config: ModelConfig, spec: &GridSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dense = |store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize| -> Dense {
            let w = weight(&config, &mut rng, fan_in, fan_out);
            Dense {
                w: store.add(format!("{name}.w"), w),
                b: store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
            }
        };
        let d = config.hidden_dim;
        let n_obj = spec.n_objects();
        let arch = match config.kind {
            ModelKind::Fcnn => {
                let mut layers = Vec::new();
                let mut fan_in = n_features(spec) + n_obj;
                for k in 0..config.hidden_layers {
                    layers.push(dense(&mut store, &format!("dense{k}"), fan_in, d));
                    fan_in = d;
                }
                layers.push(dense(&mut store, "output", fan_in, n_obj));
                Arch::Fcnn(layers)
            }
            kind => {
                let names = ["embed.gen", "embed.load", "embed.endpoint"];
                let embed = [0, 1, 2].map(|c| {
                    [
                        dense(&mut store, &format!("{}.0", names[c]), class_width(c), d),
                        dense(&mut store, &format!("{}.1", names[c]), d, d),
                    ]
                });
                let mut layers = Vec::new();
                for k in 0..config.hidden_layers {
                    let out = if k + 1 == config.hidden_layers { 1 } else { d };
                    let mut w = |store: &mut ParamStore<T>, name: &str| {
                        let m = weight(&config, &mut rng, d, out);
                        store.add(format!("mp{k}.{name}"), m)
                    };
                    let w_self = w(&mut store, "w_self");
                    let layer = if kind == ModelKind::HomGnn {
                        let w_nb = w(&mut store, "w_neighbor");
                        MessageLayer {
                            w_self,
                            w_same: w_nb,
                            w_line: w_nb,
                            w_other: None,
                            b: store.add(format!("mp{k}.b"), Matrix::zeros(1, out)),
                        }
                    } else {
                        let w_same = w(&mut store, "w_same");
                        let w_other = w(&mut store, "w_other");
                        let w_line = w(&mut store, "w_line");
                        MessageLayer {
                            w_self,
                            w_same,
                            w_line,
                            w_other: Some(w_other),
                            b: store.add(format!("mp{k}.b"), Matrix::zeros(1, out)),
                        }
                    };
                    layers.push(layer);
                }
                Arch::Gnn { embed, layers }
            }
        };
        Ok(Self { config, store, arch })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<Forward> {
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        match (&self.arch, &batch.input) {
            (Arch::Fcnn(layers), Input::Dense(x)) => {
                let mut h = tape.constant(x.clone());
                let last = layers.len() - 1;
                for (k, l) in layers.iter().enumerate() {
                    let (w, b) = (tape.param(&self.store, l.w), tape.param(&self.store, l.b));
                    let z = tape.affine(&[(h, w)], Some(b))?;
                    h = if k == last { tape.sigmoid(z) } else { tape.leaky_relu(z, slope) };
                }
                Ok(Forward {
                    out: h,
                    embeddings: Vec::new(),
                })
            }
            (Arch::Gnn { embed, .. }, Input::Graph { x, edges }) => {
                let mut blocks = Vec::new();
                for (c, mlp) in embed.iter().enumerate() {
                    if x[c].rows == 0 {
                        continue;
                    }
                    let mut h = tape.constant(x[c].clone());
                    for l in mlp {
                        let (w, b) = (tape.param(&self.store, l.w), tape.param(&self.store, l.b));
                        let z = tape.affine(&[(h, w)], Some(b))?;
                        h = tape.leaky_relu(z, slope);
                    }
                    blocks.push(h);
                }
                let h0 = tape.concat_rows(&blocks)?;
                let mut embeddings = self.message_passing(tape, h0, edges)?;
                let out = embeddings.pop().expect("at least one layer");
                Ok(Forward { out, embeddings })
            }
            _ => Err(Error::ShapeMismatch(format!(
                "batch was built for a different model kind than {}",
                self.config.kind
            ))),
        }
    }

    /// Runs the message layers from `h0`; returns `h0`, every hidden state
    /// and finally the sigmoid output.
    pub fn message_passing(&self, tape: &mut Tape<T>, h0: Var, edges: &EdgeSets) -> Result<Vec<Var>> {
        let Arch::Gnn { layers, .. } = &self.arch else {
            return Err(Error::Config("message passing needs a GNN model".into()));
        };
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let n = edges.n_nodes;
        let mut states = vec![h0];
        let mut h = h0;
        for (k, l) in layers.iter().enumerate() {
            let w_self = tape.param(&self.store, l.w_self);
            let w_same = tape.param(&self.store, l.w_same);
            let w_line = if l.w_line == l.w_same {
                w_same
            } else {
                tape.param(&self.store, l.w_line)
            };
            let s_same = tape.segment_sum(h, edges.same.clone(), n)?;
            let s_line = tape.segment_sum(h, edges.line.clone(), n)?;
            let mut terms = vec![(h, w_self), (s_same, w_same), (s_line, w_line)];
            if let Some(w_other) = l.w_other {
                if !edges.other.is_empty() {
                    let s_other = tape.segment_sum(h, edges.other.clone(), n)?;
                    let w_other = tape.param(&self.store, w_other);
                    terms.push((s_other, w_other));
                }
            }
            let b = tape.param(&self.store, l.b);
            let z = tape.affine(&terms, Some(b))?;
            h = if k + 1 == layers.len() {
                tape.sigmoid(z)
            } else {
                tape.leaky_relu(z, slope)
            };
            states.push(h);
        }
        Ok(states)
    }

    /// Forward pass plus the label-weighted loss. Loss weights come from the
    /// raw outputs of this same pass. Returns the loss and per-sample `p`.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        spec: &GridSpec,
        batch: &Batch<T>,
        points: &[&Datapoint],
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        self.loss_with_weights(tape, spec, batch, points, None)
    }

    /// [`Model::loss`], optionally with externally fixed loss weights.
    fn loss_with_weights(
        &self,
        tape: &mut Tape<T>,
        spec: &GridSpec,
        batch: &Batch<T>,
        points: &[&Datapoint],
        fixed: Option<&[Vec<f64>]>,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let fwd = self.forward(tape, batch)?;
        let p = batch.unpack(tape.value(fwd.out));
        let mut ys = Vec::with_capacity(points.len());
        let mut ws = Vec::with_capacity(points.len());
        for (i, (pt, pp)) in points.iter().zip(&p).enumerate() {
            let y: Vec<f64> = pt.target.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let target_sub = pt.target.substation(spec).ok().flatten();
            ws.push(match fixed {
                Some(w) => w[i].clone(),
                None => loss_weights(spec, pp, target_sub, self.config.label_weight),
            });
            ys.push(y);
        }
        let shape = tape.value(fwd.out).shape();
        let y = tape.constant(batch.pack(&ys, shape));
        let w = tape.constant(batch.pack(&ws, shape));
        let loss = weighted_bce(tape, fwd.out, y, w)?;
        Ok((loss, p))
    }

    /// Raw sigmoid outputs per datapoint, evaluated in chunks.
    pub fn predict(&self, spec: &GridSpec, points: &[&Datapoint]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(128) {
            let batch = Batch::new(spec, self.config.kind, chunk)?;
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &batch)?;
            out.extend(batch.unpack(tape.value(fwd.out)));
        }
        Ok(out)
    }

    /// Per-node embeddings of one datapoint after the embedders and each
    /// hidden message layer, in object order.
    pub fn layer_embeddings(&self, spec: &GridSpec, point: &Datapoint) -> Result<Vec<Vec<Vec<f64>>>> {
        if !self.config.kind.is_gnn() {
            return Err(Error::Config("layer embeddings need a GNN model".into()));
        }
        let batch = Batch::<T>::new(spec, self.config.kind, &[point])?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &batch)?;
        Ok(fwd
            .embeddings
            .iter()
            .map(|&v| {
                let m = tape.value(v);
                (0..batch.n_objects)
                    .map(|o| m.row(batch.rows[o]).iter().map(|x| x.to_f64_lossy()).collect())
                    .collect()
            })
            .collect())
    }

    pub fn checkpoint_metadata(&self) -> Vec<String> {
        vec![format!(
            "model {}",
            serde_json::to_string(&self.config).expect("config serializes")
        )]
    }

    pub fn save(&self, path: &Path, extra: &[String]) -> Result<()> {
        let mut meta = self.checkpoint_metadata();
        meta.extend_from_slice(extra);
        self.store.save(path, &meta)
    }

    /// Rebuilds a model from a checkpoint written by [`Model::save`].
    pub fn load(path: &Path, spec: &GridSpec) -> Result<(Self, Vec<String>)> {
        let (store, meta) = ParamStore::<T>::load(path)?;
        let config = meta
            .iter()
            .find_map(|m| m.strip_prefix("model "))
            .ok_or_else(|| Error::parse("checkpoint", 1, "missing model configuration line"))?;
        let config: ModelConfig =
            serde_json::from_str(config).map_err(|e| Error::parse("checkpoint", 1, e.to_string()))?;
        let mut model = Self::init(config, spec, 0)?;
        model.store.copy_values_from(&store)?;
        Ok((model, meta))
    }
}

impl Model<f64> {
    /// Finite-difference check of the loss gradient on one batch. The loss
    /// weights are a piecewise-constant function of the outputs and carry no
    /// gradient, so they are frozen at the unperturbed parameters.
    pub fn check_gradients(
        &mut self,
        spec: &GridSpec,
        points: &[&Datapoint],
        cfg: &GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let batch = Batch::new(spec, self.config.kind, points)?;
        let weights: Vec<Vec<f64>> = {
            let (_, p) = self.loss(&mut Tape::new(), spec, &batch, points)?;
            p.iter()
                .zip(points)
                .map(|(pp, pt)| {
                    let target_sub = pt.target.substation(spec).ok().flatten();
                    loss_weights(spec, pp, target_sub, self.config.label_weight)
                })
                .collect()
        };
        let frozen = Model {
            config: self.config.clone(),
            store: ParamStore::new(),
            arch: self.arch.clone(),
        };
        grad_check(
            &mut self.store,
            |tape, store| {
                let m = Model {
                    store: store.clone(),
                    ..frozen.clone()
                };
                Ok(m.loss_with_weights(tape, spec, &batch, points, Some(&weights))?.0)
            },
            cfg,
        )
    }
}

fn weight<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let std = if config.raw_init {
        config.init_sigma
    } else {
        config.init_sigma / (fan_in as f64).sqrt()
    };
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("weight shape")
}

/// Per-object loss weights: 1 at the target substation and at the
/// substation predicted from `p`, `alpha` elsewhere.
pub fn loss_weights(spec: &GridSpec, p: &[f64], target_substation: Option<usize>, alpha: f64) -> Vec<f64> {
    let predicted = predicted_substation(spec, p);
    (0..spec.n_objects())
        .map(|o| {
            let s = Some(spec.object(o).substation);
            if s == target_substation || s == predicted {
                1.0
            } else {
                alpha
            }
        })
        .collect()
}

/// `mean(−w ⊙ (y log p + (1 − y) log(1 − p)))` with `p` clamped away from
/// 0 and 1.
pub fn weighted_bce<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, w: Var) -> Result<Var> {
    let eps = T::from_f64_lossy(LOSS_CLAMP);
    let pc = tape.clamp(p, eps, T::one() - eps);
    let log_p = tape.log(pc);
    let q = tape.affine_scalar(pc, -T::one(), T::one());
    let log_q = tape.log(q);
    let not_y = tape.affine_scalar(y, -T::one(), T::one());
    let a = tape.hadamard(y, log_p)?;
    let b = tape.hadamard(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let ws = tape.hadamard(w, s)?;
    let m = tape.mean(ws);
    Ok(tape.scale(m, -T::one()))
}
