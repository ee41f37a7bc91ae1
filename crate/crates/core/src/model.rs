//! The forecasting network.
//!
//! Node and edge LSTMs encode each agent's (state, class probabilities)
//! history and the summed histories of its neighbors into `e_x`. A linear
//! prior and a bi-LSTM posterior give categorical distributions over the
//! discrete latent `z`. For every `z` a GRU decoder emits per-step Gaussian
//! controls that are integrated into position Gaussians.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{BatchConfig, ObservationBatch};
use crate::dynamics::{self, trig_moments, Gaussian2, UnicycleState, COV_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Linear, LstmCell, ParamId, ParamStore};
use crate::scene::{argmax, AgentState, Vec2, DEFAULT_DT, DEFAULT_INTERACTION_RADIUS};
use crate::tape::{Matrix, Tape, Var};

/// Divisors applied to (position, velocity, acceleration) encoder inputs.
const STATE_SCALE: [f64; AgentState::DIM] = [10.0, 10.0, 5.0, 5.0, 3.0, 3.0];
const FUTURE_SCALE: f64 = 10.0;
/// Soft bound on the raw log standard deviation of each control.
const LOG_STD_BOUND: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullProbs,
    OneHot,
    MultiHead,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_probs" => Ok(Variant::FullProbs),
            "one_hot" => Ok(Variant::OneHot),
            "multi_head" => Ok(Variant::MultiHead),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::FullProbs => "full_probs",
            Variant::OneHot => "one_hot",
            Variant::MultiHead => "multi_head",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Controls are velocities.
    SingleIntegrator,
    /// Controls are heading rate and longitudinal acceleration.
    Unicycle,
}

impl Dynamics {
    fn control_scale(self) -> [f64; 2] {
        match self {
            Dynamics::SingleIntegrator => [5.0, 5.0],
            Dynamics::Unicycle => [1.0, 2.0],
        }
    }
}

/// Class names treated as vehicles by the multi-head variant.
pub fn is_vehicle_class(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.contains("vehicle") || ["car", "truck", "bus", "motorcycle", "van", "trailer"].contains(&n.as_str())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub class_names: Vec<String>,
    pub history: usize,
    pub horizon: usize,
    pub node_hidden: usize,
    pub edge_hidden: usize,
    pub future_hidden: usize,
    pub decoder_hidden: usize,
    pub latent: usize,
    pub variant: Variant,
    pub dt: f64,
    pub interaction_radius: f64,
    pub edge_window_union: bool,
}

impl ModelConfig {
    pub fn new(class_names: Vec<String>, variant: Variant) -> Self {
        ModelConfig {
            state_dim: AgentState::DIM,
            class_names,
            history: 20,
            horizon: 20,
            node_hidden: 32,
            edge_hidden: 8,
            future_hidden: 32,
            decoder_hidden: 128,
            latent: 25,
            variant,
            dt: DEFAULT_DT,
            interaction_radius: DEFAULT_INTERACTION_RADIUS,
            edge_window_union: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim != AgentState::DIM {
            return Err(Error::Config(format!("state_dim must be {}", AgentState::DIM)));
        }
        let dims = [
            ("classes", self.class_names.len()),
            ("history", self.history),
            ("horizon", self.horizon),
            ("node_hidden", self.node_hidden),
            ("edge_hidden", self.edge_hidden),
            ("future_hidden", self.future_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("latent", self.latent),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.interaction_radius > 0.0) {
            return Err(Error::Config("interaction_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_config(&self, horizon: usize) -> BatchConfig {
        BatchConfig {
            history: self.history,
            horizon,
            interaction_radius: self.interaction_radius,
            edge_window_union: self.edge_window_union,
        }
    }

    /// Per-head dynamics: one head for the shared variants, one per class for
    /// multi-head.
    pub fn head_dynamics(&self) -> Vec<Dynamics> {
        match self.variant {
            Variant::MultiHead => self
                .class_names
                .iter()
                .map(|n| if is_vehicle_class(n) { Dynamics::Unicycle } else { Dynamics::SingleIntegrator })
                .collect(),
            _ => vec![Dynamics::SingleIntegrator],
        }
    }

    fn encoder_input(&self) -> usize {
        match self.variant {
            Variant::MultiHead => self.state_dim,
            _ => self.state_dim + self.num_classes(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.node_hidden + self.edge_hidden
    }
}

#[derive(Clone, Debug)]
struct DecoderHead {
    dynamics: Dynamics,
    init: Linear,
    gru: GruCell,
    feedback: ParamId,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Haicu {
    pub config: ModelConfig,
    pub params: ParamStore,
    node: LstmCell,
    edge: LstmCell,
    prior: Linear,
    future_fwd: LstmCell,
    future_bwd: LstmCell,
    posterior: Linear,
    heads: Vec<DecoderHead>,
}

/// Position Gaussians and the control Gaussians behind them for one head;
/// every entry is a `(batch * latent, 1)` column.
pub(crate) struct HeadOutput {
    pub dynamics: Dynamics,
    pub mean: Vec<[Var; 2]>,
    /// `(xx, xy, yy)`.
    pub cov: Vec<[Var; 3]>,
    /// `(mean0, mean1, std0, std1, rho)`.
    pub controls: Vec<[Var; 5]>,
}

pub(crate) struct Forward {
    pub embedding: Var,
    pub log_prior: Var,
    pub heads: Vec<HeadOutput>,
}

/// Symbolic matrix entry so that structurally zero or constant Jacobian
/// entries add no tape nodes.
#[derive(Clone, Copy)]
enum Entry {
    Zero,
    Const(f64),
    Node(Var),
}

impl Entry {
    fn mul(self, other: Entry, t: &mut Tape) -> Entry {
        match (self, other) {
            (Entry::Zero, _) | (_, Entry::Zero) => Entry::Zero,
            (Entry::Const(a), Entry::Const(b)) => Entry::Const(a * b),
            (Entry::Const(a), Entry::Node(v)) | (Entry::Node(v), Entry::Const(a)) => {
                if a == 1.0 {
                    Entry::Node(v)
                } else {
                    Entry::Node(t.scale(v, a))
                }
            }
            (Entry::Node(a), Entry::Node(b)) => Entry::Node(t.mul(a, b)),
        }
    }

    fn add(self, other: Entry, t: &mut Tape) -> Entry {
        match (self, other) {
            (Entry::Zero, x) | (x, Entry::Zero) => x,
            (Entry::Const(a), Entry::Const(b)) => Entry::Const(a + b),
            (Entry::Const(a), Entry::Node(v)) | (Entry::Node(v), Entry::Const(a)) => Entry::Node(t.add_scalar(v, a)),
            (Entry::Node(a), Entry::Node(b)) => Entry::Node(t.add(a, b)),
        }
    }

    fn into_var(self, t: &mut Tape, rows: usize) -> Var {
        match self {
            Entry::Zero => t.constant(Array2::zeros((rows, 1))),
            Entry::Const(c) => t.constant(Array2::from_elem((rows, 1), c)),
            Entry::Node(v) => v,
        }
    }
}

/// `A P B^T` for symbolic matrices.
fn sandwich<const N: usize, const M: usize>(t: &mut Tape, a: &[[Entry; M]; N], p: &[[Entry; M]; M]) -> [[Entry; N]; N] {
    let mut ap = [[Entry::Zero; M]; N];
    for i in 0..N {
        for j in 0..M {
            let mut acc = Entry::Zero;
            for k in 0..M {
                let prod = a[i][k].mul(p[k][j], t);
                acc = acc.add(prod, t);
            }
            ap[i][j] = acc;
        }
    }
    let mut out = [[Entry::Zero; N]; N];
    for i in 0..N {
        for j in i..N {
            let mut acc = Entry::Zero;
            for k in 0..M {
                let prod = ap[i][k].mul(a[j][k], t);
                acc = acc.add(prod, t);
            }
            out[i][j] = acc;
            out[j][i] = acc;
        }
    }
    out
}

fn moment_entry(t: &mut Tape, w: Var, n: u32, cosine: bool, dt: f64) -> Var {
    t.map(w, |w| {
        let (c, s) = trig_moments(n, w, dt);
        let (c1, s1) = trig_moments(n + 1, w, dt);
        if cosine {
            (c, -s1)
        } else {
            (s, c1)
        }
    })
}

impl Haicu {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let input = config.encoder_input();
        let e = config.embedding_dim();
        let z = config.latent;
        let node = LstmCell::new(&mut params, "node_lstm", input, config.node_hidden, &mut rng);
        let edge = LstmCell::new(&mut params, "edge_lstm", input, config.edge_hidden, &mut rng);
        let prior = Linear::new(&mut params, "prior", e, z, &mut rng);
        let future_fwd = LstmCell::new(&mut params, "future_fwd", 2, config.future_hidden, &mut rng);
        let future_bwd = LstmCell::new(&mut params, "future_bwd", 2, config.future_hidden, &mut rng);
        let posterior = Linear::new(&mut params, "posterior", e + 2 * config.future_hidden, z, &mut rng);
        let heads = config
            .head_dynamics()
            .into_iter()
            .enumerate()
            .map(|(k, dynamics)| {
                let name = format!("decoder{k}");
                let h = config.decoder_hidden;
                let init = Linear::new(&mut params, &format!("{name}.init"), e + z, h, &mut rng);
                let gru = GruCell::new(&mut params, &format!("{name}.gru"), e + z, h, &mut rng);
                let bound = 1.0 / (h as f64).sqrt();
                let fb = Array2::from_shape_fn((2, 3 * h), |_| rng.gen_range(-bound..=bound));
                let feedback = params.add(format!("{name}.gru.w_feedback"), fb);
                let out = Linear::new(&mut params, &format!("{name}.out"), h, 5, &mut rng);
                DecoderHead {
                    dynamics,
                    init,
                    gru,
                    feedback,
                    out,
                }
            })
            .collect();
        Ok(Haicu {
            config,
            params,
            node,
            edge,
            prior,
            future_fwd,
            future_bwd,
            posterior,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn check_batch(&self, batch: &ObservationBatch) -> Result<()> {
        if batch.num_classes != self.config.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "batch has K={}, model expects K={}",
                batch.num_classes,
                self.config.num_classes()
            )));
        }
        if batch.window != self.config.history + 1 {
            return Err(Error::DimensionMismatch(format!(
                "batch window {} but model history {}",
                batch.window, self.config.history
            )));
        }
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        batch.validate()
    }

    /// Encoder input row for one history step under the model's variant.
    fn input_row(&self, state: &[f64; AgentState::DIM], probs: &[f64], row: &mut [f64]) {
        for (i, (&s, &k)) in state.iter().zip(&STATE_SCALE).enumerate() {
            row[i] += s / k;
        }
        let d = AgentState::DIM;
        match self.config.variant {
            Variant::FullProbs => {
                for (r, &p) in row[d..].iter_mut().zip(probs) {
                    *r += p;
                }
            }
            Variant::OneHot => {
                if probs.iter().any(|&p| p != 0.0) {
                    row[d + argmax(probs)] += 1.0;
                }
            }
            Variant::MultiHead => {}
        }
    }

    /// Node inputs, edge inputs and update masks for every history step.
    fn encoder_inputs(&self, batch: &ObservationBatch) -> Vec<(Matrix, Matrix, Matrix)> {
        let b = batch.len();
        let width = self.config.encoder_input();
        (0..batch.window)
            .map(|tau| {
                let mut node = Array2::zeros((b, width));
                let mut edge = Array2::zeros((b, width));
                let mut mask = Array2::zeros((b, 1));
                for (i, ex) in batch.examples.iter().enumerate() {
                    if ex.node.mask[tau] {
                        mask[[i, 0]] = 1.0;
                        let row = node.row_mut(i).into_slice().expect("standard layout");
                        self.input_row(&ex.node.states[tau], &ex.node.probs[tau], row);
                    }
                    let row = edge.row_mut(i).into_slice().expect("standard layout");
                    for n in &ex.neighbors {
                        if n.history.mask[tau] {
                            self.input_row(&n.history.states[tau], &n.history.probs[tau], row);
                        }
                    }
                }
                (node, edge, mask)
            })
            .collect()
    }

    fn run_lstm(&self, t: &mut Tape, p: &Bound, cell: &LstmCell, inputs: &[(Var, Var)], rows: usize) -> Var {
        let mut h = t.zeros(rows, cell.hidden);
        let mut c = t.zeros(rows, cell.hidden);
        for &(x, m) in inputs {
            let (hn, cn) = cell.step(t, p, x, h, c);
            // h <- h + m (h_new - h), leaving padded steps untouched
            let dh = t.sub(hn, h);
            let dh = t.mul(dh, m);
            h = t.add(h, dh);
            let dc = t.sub(cn, c);
            let dc = t.mul(dc, m);
            c = t.add(c, dc);
        }
        h
    }

    pub(crate) fn encode_on(&self, t: &mut Tape, p: &Bound, batch: &ObservationBatch) -> Var {
        let rows = batch.len();
        let steps = self.encoder_inputs(batch);
        let mut node_in = Vec::with_capacity(steps.len());
        let mut edge_in = Vec::with_capacity(steps.len());
        for (node, edge, mask) in steps {
            let m = t.constant(mask);
            node_in.push((t.constant(node), m));
            edge_in.push((t.constant(edge), m));
        }
        let hn = self.run_lstm(t, p, &self.node, &node_in, rows);
        let he = self.run_lstm(t, p, &self.edge, &edge_in, rows);
        t.concat_cols(&[hn, he])
    }

    pub(crate) fn log_prior_on(&self, t: &mut Tape, p: &Bound, e: Var) -> Var {
        let logits = self.prior.forward(t, p, e);
        t.log_softmax(logits)
    }

    pub(crate) fn log_posterior_on(&self, t: &mut Tape, p: &Bound, e: Var, batch: &ObservationBatch) -> Result<Var> {
        let horizon = self.config.horizon;
        if !batch.has_futures(horizon) {
            return Err(Error::InvalidParameter(format!("batch lacks {horizon}-step futures")));
        }
        let rows = batch.len();
        let inputs: Vec<Var> = (0..horizon)
            .map(|k| {
                let m = Array2::from_shape_fn((rows, 2), |(i, j)| {
                    batch.examples[i].future.as_ref().expect("checked")[k][j] / FUTURE_SCALE
                });
                t.constant(m)
            })
            .collect();
        let ones = t.constant(Array2::ones((rows, 1)));
        let fwd: Vec<(Var, Var)> = inputs.iter().map(|&x| (x, ones)).collect();
        let bwd: Vec<(Var, Var)> = inputs.iter().rev().map(|&x| (x, ones)).collect();
        let hf = self.run_lstm(t, p, &self.future_fwd, &fwd, rows);
        let hb = self.run_lstm(t, p, &self.future_bwd, &bwd, rows);
        let x = t.concat_cols(&[e, hf, hb]);
        let logits = self.posterior.forward(t, p, x);
        Ok(t.log_softmax(logits))
    }

    /// Runs every decoder head for every latent value. Row `b * latent + z`
    /// belongs to example `b` with latent `z`.
    pub(crate) fn decode_on(&self, t: &mut Tape, p: &Bound, e: Var, batch: &ObservationBatch, steps: usize) -> Vec<HeadOutput> {
        let z = self.config.latent;
        let rows = batch.len() * z;
        let e_rep = t.repeat_rows(e, z);
        let zoh = t.constant(Array2::from_shape_fn((rows, z), |(r, j)| if r % z == j { 1.0 } else { 0.0 }));
        let stat = t.concat_cols(&[e_rep, zoh]);
        let velocity: Vec<Vec2> = batch
            .examples
            .iter()
            .flat_map(|ex| std::iter::repeat_n(ex.velocity, z))
            .collect();
        self.heads
            .iter()
            .map(|head| {
                let h0 = head.init.forward(t, p, stat);
                let mut h = t.tanh(h0);
                let gi_static = head.gru.project(t, p, stat);
                let scale = head.dynamics.control_scale();
                let mut feedback = t.zeros(rows, 2);
                let mut controls = Vec::with_capacity(steps);
                for _ in 0..steps {
                    let fb = t.matmul(feedback, p.var(head.feedback));
                    let gi = t.add(gi_static, fb);
                    h = head.gru.step_projected(t, p, gi, h);
                    let o = head.out.forward(t, p, h);
                    let raw_mean = t.slice_cols(o, 0, 2);
                    let m0 = t.slice_cols(o, 0, 1);
                    let m0 = t.scale(m0, scale[0]);
                    let m1 = t.slice_cols(o, 1, 1);
                    let m1 = t.scale(m1, scale[1]);
                    let mut stds = [m0; 2];
                    for (k, s) in stds.iter_mut().enumerate() {
                        let raw = t.slice_cols(o, 2 + k, 1);
                        let bounded = t.scale(raw, 1.0 / LOG_STD_BOUND);
                        let bounded = t.tanh(bounded);
                        let log_std = t.scale(bounded, LOG_STD_BOUND);
                        let log_std = t.add_scalar(log_std, scale[k].ln());
                        *s = t.exp(log_std);
                    }
                    let rho = t.slice_cols(o, 4, 1);
                    let rho = t.tanh(rho);
                    controls.push([m0, m1, stds[0], stds[1], rho]);
                    feedback = raw_mean;
                }
                let (mean, cov) = match head.dynamics {
                    Dynamics::SingleIntegrator => integrate_single_on(t, &controls, self.config.dt, rows),
                    Dynamics::Unicycle => integrate_unicycle_on(t, &controls, &velocity, self.config.dt, rows),
                };
                HeadOutput {
                    dynamics: head.dynamics,
                    mean,
                    cov,
                    controls,
                }
            })
            .collect()
    }

    pub(crate) fn forward_on(&self, t: &mut Tape, p: &Bound, batch: &ObservationBatch, steps: usize) -> Result<Forward> {
        self.check_batch(batch)?;
        let embedding = self.encode_on(t, p, batch);
        let log_prior = self.log_prior_on(t, p, embedding);
        let heads = self.decode_on(t, p, embedding, batch, steps);
        Ok(Forward {
            embedding,
            log_prior,
            heads,
        })
    }

    /// `e_x` for every example, shape `(batch, node_hidden + edge_hidden)`.
    pub fn encode(&self, batch: &ObservationBatch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let e = self.encode_on(&mut t, &p, batch);
        Ok(t.value(e).clone())
    }

    /// Prior mode probabilities `p(z | x, c)`, shape `(batch, latent)`.
    pub fn prior_probs(&self, batch: &ObservationBatch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let e = self.encode_on(&mut t, &p, batch);
        let lp = self.log_prior_on(&mut t, &p, e);
        Ok(t.value(lp).mapv(f64::exp))
    }

    /// Full mixture over `steps` future steps for every example.
    pub fn predict_distributions(&self, batch: &ObservationBatch, steps: usize) -> Result<Vec<TrajectoryDistribution>> {
        if steps == 0 {
            return Err(Error::InvalidParameter("prediction horizon must be at least one step".into()));
        }
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let fwd = self.forward_on(&mut t, &p, batch, steps)?;
        let z = self.config.latent;
        let prior = t.value(fwd.log_prior).mapv(f64::exp);
        let col = |v: Var| t.value(v).column(0).to_vec();
        let heads: Vec<_> = fwd
            .heads
            .iter()
            .map(|h| {
                let means: Vec<[Vec<f64>; 2]> = h.mean.iter().map(|m| [col(m[0]), col(m[1])]).collect();
                let covs: Vec<[Vec<f64>; 3]> = h.cov.iter().map(|c| [col(c[0]), col(c[1]), col(c[2])]).collect();
                let ctrl: Vec<[Vec<f64>; 5]> = h
                    .controls
                    .iter()
                    .map(|c| [col(c[0]), col(c[1]), col(c[2]), col(c[3]), col(c[4])])
                    .collect();
                (h.dynamics, means, covs, ctrl)
            })
            .collect();
        let multi = self.config.variant == Variant::MultiHead;
        batch
            .examples
            .iter()
            .enumerate()
            .map(|(b, ex)| {
                let mix: Vec<f64> = if multi { ex.current_probs().to_vec() } else { vec![1.0] };
                let mut modes = Vec::with_capacity(heads.len() * z);
                for (k, (dynamics, means, covs, ctrl)) in heads.iter().enumerate() {
                    for zi in 0..z {
                        let r = b * z + zi;
                        let positions = (0..steps)
                            .map(|s| {
                                Gaussian2::new(
                                    [ex.origin[0] + means[s][0][r], ex.origin[1] + means[s][1][r]],
                                    [[covs[s][0][r], covs[s][1][r]], [covs[s][1][r], covs[s][2][r]]],
                                )
                            })
                            .collect();
                        let controls = (0..steps)
                            .map(|s| {
                                let c = &ctrl[s];
                                Gaussian2::from_std([c[0][r], c[1][r]], c[2][r], c[3][r], c[4][r])
                            })
                            .collect();
                        modes.push(Mode {
                            weight: mix[k] * prior[[b, zi]],
                            head: k,
                            latent: zi,
                            dynamics: *dynamics,
                            positions,
                            controls,
                        });
                    }
                }
                let dist = TrajectoryDistribution {
                    scene_id: ex.scene_id.clone(),
                    agent_id: ex.agent_id.clone(),
                    timestep: ex.timestep,
                    dt: self.config.dt,
                    origin: ex.origin,
                    velocity: ex.velocity,
                    modes,
                };
                dist.validate()?;
                Ok(dist)
            })
            .collect()
    }

    pub fn predict(&self, batch: &ObservationBatch, mode: PredictMode, steps: usize, seed: u64) -> Result<Prediction> {
        let dists = self.predict_distributions(batch, steps)?;
        Ok(match mode {
            PredictMode::FullDistribution => Prediction::Distributions(dists),
            PredictMode::MostLikely => Prediction::Trajectories(dists.iter().map(|d| d.most_likely()).collect()),
            PredictMode::Sample(n) => {
                if n == 0 {
                    return Err(Error::InvalidParameter("sample count must be at least 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Prediction::Samples(dists.iter().map(|d| d.sample(n, &mut rng)).collect())
            }
        })
    }
}

fn integrate_single_on(t: &mut Tape, controls: &[[Var; 5]], dt: f64, rows: usize) -> (Vec<[Var; 2]>, Vec<[Var; 3]>) {
    let mut px = t.zeros(rows, 1);
    let mut py = t.zeros(rows, 1);
    let mut sxx = t.zeros(rows, 1);
    let mut sxy = t.zeros(rows, 1);
    let mut syy = t.zeros(rows, 1);
    let mut means = Vec::with_capacity(controls.len());
    let mut covs = Vec::with_capacity(controls.len());
    let dt2 = dt * dt;
    for &[m0, m1, s0, s1, rho] in controls {
        let dx = t.scale(m0, dt);
        px = t.add(px, dx);
        let dy = t.scale(m1, dt);
        py = t.add(py, dy);
        let vxx = t.square(s0);
        let vxx = t.scale(vxx, dt2);
        sxx = t.add(sxx, vxx);
        let vyy = t.square(s1);
        let vyy = t.scale(vyy, dt2);
        syy = t.add(syy, vyy);
        let c = t.mul(s0, s1);
        let c = t.mul(c, rho);
        let c = t.scale(c, dt2);
        sxy = t.add(sxy, c);
        means.push([px, py]);
        let fxx = t.add_scalar(sxx, COV_FLOOR);
        let fyy = t.add_scalar(syy, COV_FLOOR);
        covs.push([fxx, sxy, fyy]);
    }
    (means, covs)
}

fn integrate_unicycle_on(
    t: &mut Tape,
    controls: &[[Var; 5]],
    velocity: &[Vec2],
    dt: f64,
    rows: usize,
) -> (Vec<[Var; 2]>, Vec<[Var; 3]>) {
    let start: Vec<UnicycleState> = velocity.iter().map(|&v| UnicycleState::from_velocity([0.0, 0.0], v)).collect();
    let mut x = t.zeros(rows, 1);
    let mut y = t.zeros(rows, 1);
    let mut heading = t.constant(Array2::from_shape_fn((rows, 1), |(i, _)| start[i].heading));
    let mut speed = t.constant(Array2::from_shape_fn((rows, 1), |(i, _)| start[i].speed));
    let mut p = [[Entry::Zero; 4]; 4];
    let mut means = Vec::with_capacity(controls.len());
    let mut covs = Vec::with_capacity(controls.len());
    for &[w, a, s0, s1, rho] in controls {
        let c0 = moment_entry(t, w, 0, true, dt);
        let s0m = moment_entry(t, w, 0, false, dt);
        let c1 = moment_entry(t, w, 1, true, dt);
        let s1m = moment_entry(t, w, 1, false, dt);
        let c2 = moment_entry(t, w, 2, true, dt);
        let s2m = moment_entry(t, w, 2, false, dt);
        let sin = t.sin(heading);
        let cos = t.cos(heading);
        // rotate (re, im) by the heading
        let rot = |t: &mut Tape, re: Var, im: Var| {
            let a = t.mul(cos, re);
            let b = t.mul(sin, im);
            let c = t.mul(sin, re);
            let d = t.mul(cos, im);
            (t.sub(a, b), t.add(c, d))
        };
        let vc0 = t.mul(speed, c0);
        let ac1 = t.mul(a, c1);
        let rc = t.add(vc0, ac1);
        let vs0 = t.mul(speed, s0m);
        let as1 = t.mul(a, s1m);
        let rs = t.add(vs0, as1);
        let (dx, dy) = rot(t, rc, rs);
        let (fxv, fyv) = rot(t, c0, s0m);
        let vs1 = t.mul(speed, s1m);
        let as2 = t.mul(a, s2m);
        let drc = t.add(vs1, as2);
        let drc = t.neg(drc);
        let vc1 = t.mul(speed, c1);
        let ac2 = t.mul(a, c2);
        let drs = t.add(vc1, ac2);
        let (gxw, gyw) = rot(t, drc, drs);
        let (gxa, gya) = rot(t, c1, s1m);
        let ndy = t.neg(dy);
        let f = [
            [Entry::Const(1.0), Entry::Zero, Entry::Node(ndy), Entry::Node(fxv)],
            [Entry::Zero, Entry::Const(1.0), Entry::Node(dx), Entry::Node(fyv)],
            [Entry::Zero, Entry::Zero, Entry::Const(1.0), Entry::Zero],
            [Entry::Zero, Entry::Zero, Entry::Zero, Entry::Const(1.0)],
        ];
        let g = [
            [Entry::Node(gxw), Entry::Node(gxa)],
            [Entry::Node(gyw), Entry::Node(gya)],
            [Entry::Const(dt), Entry::Zero],
            [Entry::Zero, Entry::Const(dt)],
        ];
        let v00 = t.square(s0);
        let v11 = t.square(s1);
        let v01 = t.mul(s0, s1);
        let v01 = t.mul(v01, rho);
        let su = [[Entry::Node(v00), Entry::Node(v01)], [Entry::Node(v01), Entry::Node(v11)]];
        let fpf = sandwich(t, &f, &p);
        let gsg = sandwich(t, &g, &su);
        for i in 0..4 {
            for j in i..4 {
                let e = fpf[i][j].add(gsg[i][j], t);
                p[i][j] = e;
                p[j][i] = e;
            }
        }
        x = t.add(x, dx);
        y = t.add(y, dy);
        let dh = t.scale(w, dt);
        heading = t.add(heading, dh);
        let dv = t.scale(a, dt);
        speed = t.add(speed, dv);
        means.push([x, y]);
        let pxx = p[0][0].add(Entry::Const(COV_FLOOR), t).into_var(t, rows);
        let pxy = p[0][1].into_var(t, rows);
        let pyy = p[1][1].add(Entry::Const(COV_FLOOR), t).into_var(t, rows);
        covs.push([pxx, pxy, pyy]);
    }
    (means, covs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    FullDistribution,
    MostLikely,
    Sample(usize),
}

#[derive(Clone, Debug)]
pub enum Prediction {
    Distributions(Vec<TrajectoryDistribution>),
    /// One absolute trajectory per example.
    Trajectories(Vec<Vec<Vec2>>),
    /// `n` absolute trajectories per example.
    Samples(Vec<Vec<Vec<Vec2>>>),
}

/// One mixture component: a latent value under one decoder head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub weight: f64,
    pub head: usize,
    pub latent: usize,
    pub dynamics: Dynamics,
    /// Absolute position Gaussians (m, m^2) for steps 1..=T.
    pub positions: Vec<Gaussian2>,
    /// Per-step control Gaussians (m/s for velocity controls; rad/s and
    /// m/s^2 for unicycle controls).
    pub controls: Vec<Gaussian2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub scene_id: String,
    pub agent_id: String,
    pub timestep: i64,
    pub dt: f64,
    pub origin: Vec2,
    pub velocity: Vec2,
    pub modes: Vec<Mode>,
}

impl TrajectoryDistribution {
    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, |m| m.positions.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-6 || self.modes.iter().any(|m| !(m.weight >= 0.0)) {
            return Err(Error::Invariant {
                agent_id: self.agent_id.clone(),
                timestep: self.timestep,
                reason: format!("mode weights sum to {total}"),
            });
        }
        for m in &self.modes {
            for g in &m.positions {
                if !g.mean.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("predicted mean for agent {}", self.agent_id)));
                }
                if !dynamics::is_psd(&g.cov, 0.0) {
                    return Err(Error::NotPsd(format!("predicted covariance for agent {}", self.agent_id)));
                }
            }
        }
        Ok(())
    }

    /// Index of the highest-weight mode; ties go to the lowest index.
    pub fn top_mode(&self) -> usize {
        argmax(&self.weights())
    }

    pub fn most_likely(&self) -> Vec<Vec2> {
        self.modes[self.top_mode()].positions.iter().map(|g| g.mean).collect()
    }

    /// Keeps the first `steps` steps of every mode.
    pub fn truncated(&self, steps: usize) -> Self {
        let mut out = self.clone();
        for m in &mut out.modes {
            m.positions.truncate(steps);
            m.controls.truncate(steps);
        }
        out
    }

    /// Ancestral sampling: a mode, then independent per-step controls,
    /// integrated through the mode's dynamics.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<Vec2>> {
        let weights = self.weights();
        let dist = rand_distr::WeightedIndex::new(&weights).expect("validated weights");
        (0..n)
            .map(|_| {
                let m = &self.modes[dist.sample(rng)];
                let controls: Vec<Vec2> = m.controls.iter().map(|g| sample_gaussian(g, rng)).collect();
                match m.dynamics {
                    Dynamics::SingleIntegrator => dynamics::single_integrator_path(&controls, self.origin, self.dt),
                    Dynamics::Unicycle => {
                        let start = UnicycleState::from_velocity(self.origin, self.velocity);
                        dynamics::unicycle_path(&controls, &start, self.dt)
                    }
                }
            })
            .collect()
    }
}

pub fn sample_gaussian(g: &Gaussian2, rng: &mut impl Rng) -> Vec2 {
    let a = g.cov[0][0].max(0.0).sqrt();
    let b = if a > 0.0 { g.cov[0][1] / a } else { 0.0 };
    let c = (g.cov[1][1] - b * b).max(0.0).sqrt();
    let e0: f64 = StandardNormal.sample(rng);
    let e1: f64 = StandardNormal.sample(rng);
    [g.mean[0] + a * e0, g.mean[1] + b * e0 + c * e1]
}

/// Trainable scalars; equals `model.num_parameters()` for a constructed
/// model.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let input = config.encoder_input();
    let e = config.embedding_dim();
    let z = config.latent;
    let h = config.decoder_hidden;
    let head = Linear::num_params(e + z, h) + GruCell::num_params(e + z + 2, h) + Linear::num_params(h, 5);
    LstmCell::num_params(input, config.node_hidden)
        + LstmCell::num_params(input, config.edge_hidden)
        + Linear::num_params(e, z)
        + 2 * LstmCell::num_params(2, config.future_hidden)
        + Linear::num_params(e + 2 * config.future_hidden, z)
        + config.head_dynamics().len() * head
}

/// Inference FLOPs (two per multiply-accumulate, one per addition in the
/// neighbor sums) for a scene with `n_nodes` agents and `n_edges` undirected
/// edges over `steps` decoded steps.
pub fn count_flops(config: &ModelConfig, n_nodes: usize, n_edges: usize, steps: usize) -> u64 {
    let input = config.encoder_input() as u64;
    let window = (config.history + 1) as u64;
    let lstm = |i: u64, h: u64| 2 * 4 * h * (i + h);
    let gru = |i: u64, h: u64| 2 * 3 * h * (i + h);
    let (e, z, h) = (config.embedding_dim() as u64, config.latent as u64, config.decoder_hidden as u64);
    let encoder = window * (lstm(input, config.node_hidden as u64) + lstm(input, config.edge_hidden as u64));
    let prior = 2 * e * z;
    let head = z * (2 * (e + z) * h + steps as u64 * (gru(e + z + 2, h) + 2 * h * 5));
    let per_node = encoder + prior + config.head_dynamics().len() as u64 * head;
    let per_edge = window * 2 * input;
    n_nodes as u64 * per_node + n_edges as u64 * per_edge
}
