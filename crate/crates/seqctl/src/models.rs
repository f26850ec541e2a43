//! Policy architectures sharing one embedding/prediction interface:
//! Decision Transformer (causal GPT-2-style blocks over interleaved
//! (RTG, state, action) tokens), Decision LSTM (same token stream, no
//! positional embeddings or attention mask), and a feedforward behavior
//! cloning baseline that never sees rewards.
//!
//! Each architecture has two numerically identical execution paths: a
//! graph forward used for training (differentiable) and a lean host
//! forward used for control-loop inference, where per-step latency and
//! rollout throughput matter.

use crate::data::TrainingBatch;
use crate::envs::EnvSpec;
use crate::kernel::array::{matmul, Array};
use crate::kernel::{Graph, KernelError, NodeId, ParamStore, StreamRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("missing parameter `{0}` in store")]
    MissingParam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Dt,
    Dlstm,
    Bc,
}

impl ModelVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelVariant::Dt => "dt",
            ModelVariant::Dlstm => "dlstm",
            ModelVariant::Bc => "bc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dt" => Some(Self::Dt),
            "dlstm" => Some(Self::Dlstm),
            "bc" => Some(Self::Bc),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Context length K (number of (RTG, state, action) triples).
    pub context_len: usize,
    pub n_layers: usize,
    pub hidden: usize,
    /// Attention heads; present only for the transformer.
    pub n_heads: Option<usize>,
    pub dropout: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Positional-embedding table size; present only for the transformer.
    pub max_timestep: Option<usize>,
    pub rtg_scale: f64,
    pub action_bound: f64,
    /// Ablation: feed the LSTM one summed token per timestep
    /// (RTG_t + state_t + previous action) instead of three tokens.
    #[serde(default)]
    pub fused_tokens: bool,
}

impl ModelConfig {
    pub fn defaults(variant: ModelVariant, env: &EnvSpec) -> Self {
        let bc = variant == ModelVariant::Bc;
        Self {
            variant,
            context_len: 20,
            n_layers: 3,
            hidden: if bc { 256 } else { 128 },
            n_heads: (variant == ModelVariant::Dt).then_some(1),
            dropout: if bc { 0.0 } else { 0.1 },
            state_dim: env.obs_dim(),
            action_dim: env.action_dim(),
            max_timestep: (variant == ModelVariant::Dt).then_some(env.max_steps + 1),
            rtg_scale: env.rtg_scale,
            action_bound: env.action_bound,
            fused_tokens: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let need = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(ModelError::DimMismatch(msg.to_string()))
            }
        };
        need(self.context_len > 0, "context_len must be positive")?;
        need(self.hidden > 0 && self.n_layers > 0, "hidden/n_layers must be positive")?;
        need(self.state_dim > 0 && self.action_dim > 0, "state/action dims must be positive")?;
        match self.variant {
            ModelVariant::Dt => {
                let h = self.n_heads.unwrap_or(0);
                need(h > 0, "DT requires n_heads >= 1")?;
                need(self.hidden % h == 0, "hidden must divide evenly into heads")?;
                need(self.max_timestep.unwrap_or(0) > 0, "DT requires max_timestep")?;
            }
            ModelVariant::Dlstm | ModelVariant::Bc => {
                need(self.n_heads.is_none(), "n_heads is a DT-only field")?;
                need(self.max_timestep.is_none(), "max_timestep is a DT-only field")?;
            }
        }
        Ok(())
    }
}

/// Checkpoint sidecar: everything needed to rebuild and run the policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub env: EnvSpec,
    pub dataset: String,
    pub dataset_mean_return: f64,
    pub dataset_max_return: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub seed: u64,
    pub param_count: usize,
}

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    fn pid(&self, name: &str) -> Result<usize, ModelError> {
        self.store
            .id(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn p(&self, name: &str) -> Result<&Array, ModelError> {
        Ok(self.store.value(self.pid(name)?))
    }

    pub fn param_count(&self) -> usize {
        self.store.num_values()
    }
}

fn uniform_init(rng: &mut StreamRng, shape: Vec<usize>, fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Array::new(shape, data)
}

/// Builds the parameter set for a config. Linear layers use
/// scaled-uniform fan-in initialization; the LSTM forget-gate bias gets
/// +1; the positional table is small-normal (sigma = 0.02); layer-norm
/// affine starts at identity.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut rng = StreamRng::new(seed, 0);
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let (s, a, k) = (cfg.state_dim, cfg.action_dim, cfg.context_len);

    let lin = |store: &mut ParamStore, rng: &mut StreamRng, name: &str, ins: usize, outs: usize| {
        store.add(format!("{name}.w"), uniform_init(rng, vec![ins, outs], ins));
        store.add(format!("{name}.b"), uniform_init(rng, vec![outs], ins));
    };
    let ln = |store: &mut ParamStore, name: &str, n: usize| {
        store.add(format!("{name}.g"), Array::full(vec![n], 1.0));
        store.add(format!("{name}.b"), Array::zeros(vec![n]));
    };

    match cfg.variant {
        ModelVariant::Bc => {
            lin(&mut store, &mut rng, "bc0", k * s, h);
            lin(&mut store, &mut rng, "bc1", h, h);
            lin(&mut store, &mut rng, "bc2", h, h);
            lin(&mut store, &mut rng, "head", h, a);
        }
        ModelVariant::Dt | ModelVariant::Dlstm => {
            lin(&mut store, &mut rng, "embed.rtg", 1, h);
            lin(&mut store, &mut rng, "embed.state", s, h);
            lin(&mut store, &mut rng, "embed.action", a, h);
            if cfg.variant == ModelVariant::Dt {
                let mt = cfg.max_timestep.unwrap();
                let pos: Vec<f64> = (0..mt * h).map(|_| rng.normal(0.0, 0.02)).collect();
                store.add("pos.table", Array::new(vec![mt, h], pos));
                ln(&mut store, "embed.ln", h);
                let heads = cfg.n_heads.unwrap();
                let dh = h / heads;
                for i in 0..cfg.n_layers {
                    ln(&mut store, &format!("blk{i}.ln1"), h);
                    lin(&mut store, &mut rng, &format!("blk{i}.attn.q"), h, h);
                    lin(&mut store, &mut rng, &format!("blk{i}.attn.k"), h, h);
                    lin(&mut store, &mut rng, &format!("blk{i}.attn.v"), h, h);
                    for hd in 0..heads {
                        store.add(
                            format!("blk{i}.attn.proj{hd}.w"),
                            uniform_init(&mut rng, vec![dh, h], h),
                        );
                    }
                    store.add(
                        format!("blk{i}.attn.proj.b"),
                        uniform_init(&mut rng, vec![h], h),
                    );
                    ln(&mut store, &format!("blk{i}.ln2"), h);
                    lin(&mut store, &mut rng, &format!("blk{i}.mlp1"), h, 4 * h);
                    lin(&mut store, &mut rng, &format!("blk{i}.mlp2"), 4 * h, h);
                }
                ln(&mut store, "final.ln", h);
            } else {
                for i in 0..cfg.n_layers {
                    store.add(format!("lstm{i}.wx"), uniform_init(&mut rng, vec![h, 4 * h], h));
                    store.add(format!("lstm{i}.wh"), uniform_init(&mut rng, vec![h, 4 * h], h));
                    let mut b = uniform_init(&mut rng, vec![4 * h], h);
                    // Forget-gate bias +1 (gate order i, f, g, o).
                    for j in h..2 * h {
                        b.data_mut()[j] += 1.0;
                    }
                    store.add(format!("lstm{i}.b"), b);
                }
            }
            lin(&mut store, &mut rng, "head", h, a);
        }
    }
    Ok(Model {
        cfg: cfg.clone(),
        store,
    })
}

// ---------------------------------------------------------------------
// Graph (training) forwards
// ---------------------------------------------------------------------

/// y = x W + b for a [B,T,I] stream, via a flattening round trip.
fn linear3d(
    g: &mut Graph,
    m: &Model,
    x: NodeId,
    name: &str,
) -> Result<NodeId, ModelError> {
    let shape = g.value(x).shape().to_vec();
    let (b, t, i) = (shape[0], shape[1], shape[2]);
    let w = g.param(&m.store, m.pid(&format!("{name}.w"))?);
    let bias = g.param(&m.store, m.pid(&format!("{name}.b"))?);
    let o = g.value(w).shape()[1];
    let flat = g.reshape(x, vec![b * t, i]);
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, bias)?;
    Ok(g.reshape(y, vec![b, t, o]))
}

fn layer_norm_affine(
    g: &mut Graph,
    m: &Model,
    x: NodeId,
    name: &str,
) -> Result<NodeId, ModelError> {
    let gain = g.param(&m.store, m.pid(&format!("{name}.g"))?);
    let bias = g.param(&m.store, m.pid(&format!("{name}.b"))?);
    let n = g.layer_norm_lastdim(x)?;
    let n = g.mul_bias(n, gain)?;
    Ok(g.add_bias(n, bias)?)
}

/// Embeds a training batch into the interleaved (RTG, state, action)
/// token stream [B, 3K, hidden]. The DT variant adds a learned
/// per-timestep positional embedding shared across each triple and a
/// trailing layer-norm; the DLSTM variant adds neither.
pub fn embed_tokens(
    g: &mut Graph,
    m: &Model,
    batch: &TrainingBatch,
) -> Result<NodeId, ModelError> {
    let (b, k) = (batch.batch, batch.k);
    if batch.obs.last_dim() != m.cfg.state_dim || batch.act.last_dim() != m.cfg.action_dim {
        return Err(ModelError::DimMismatch(format!(
            "batch dims (state {}, action {}) vs model (state {}, action {})",
            batch.obs.last_dim(),
            batch.act.last_dim(),
            m.cfg.state_dim,
            m.cfg.action_dim
        )));
    }
    let rtg = g.leaf(batch.rtg.clone());
    let obs = g.leaf(batch.obs.clone());
    let act = g.leaf(batch.act.clone());
    let mut r_emb = linear3d(g, m, rtg, "embed.rtg")?;
    let mut s_emb = linear3d(g, m, obs, "embed.state")?;
    let mut a_emb = linear3d(g, m, act, "embed.action")?;
    if m.cfg.variant == ModelVariant::Dt {
        let table = g.param(&m.store, m.pid("pos.table")?);
        let pos = g.gather_rows(table, batch.timesteps.clone())?;
        let pos = g.reshape(pos, vec![b, k, m.cfg.hidden]);
        r_emb = g.add(r_emb, pos)?;
        s_emb = g.add(s_emb, pos)?;
        a_emb = g.add(a_emb, pos)?;
    }
    let tokens = g.interleave3(r_emb, s_emb, a_emb)?;
    if m.cfg.variant == ModelVariant::Dt {
        layer_norm_affine(g, m, tokens, "embed.ln")
    } else {
        Ok(tokens)
    }
}

/// Additive attention mask [B, 3K, 3K]: forbids attending to future
/// positions and to left-padding.
fn dt_mask(batch: &TrainingBatch) -> Array {
    let (b, t) = (batch.batch, 3 * batch.k);
    let mut data = vec![0.0; b * t * t];
    for bi in 0..b {
        for i in 0..t {
            for j in 0..t {
                let pad = batch.pad_mask[bi * batch.k + j / 3];
                if j > i || (pad && j != i) {
                    data[(bi * t + i) * t + j] = -1e9;
                }
            }
        }
    }
    Array::new(vec![b, t, t], data)
}

fn action_head(g: &mut Graph, m: &Model, states: NodeId) -> Result<NodeId, ModelError> {
    let y = linear3d(g, m, states, "head")?;
    let y = g.tanh(y);
    Ok(g.scale(y, m.cfg.action_bound))
}

/// Pre-norm transformer over the token stream; returns predicted
/// actions [B, K, action_dim], each read from its state-token position.
pub fn dt_forward(
    g: &mut Graph,
    m: &Model,
    tokens: NodeId,
    batch: &TrainingBatch,
    rng: &mut StreamRng,
) -> Result<NodeId, ModelError> {
    let heads = m.cfg.n_heads.unwrap();
    let h = m.cfg.hidden;
    let dh = h / heads;
    let (b, t) = (batch.batch, 3 * batch.k);
    let mask = g.leaf(dt_mask(batch));
    let mut x = g.dropout(tokens, m.cfg.dropout, rng);
    for i in 0..m.cfg.n_layers {
        let pre = layer_norm_affine(g, m, x, &format!("blk{i}.ln1"))?;
        let q = linear3d(g, m, pre, &format!("blk{i}.attn.q"))?;
        let kk = linear3d(g, m, pre, &format!("blk{i}.attn.k"))?;
        let v = linear3d(g, m, pre, &format!("blk{i}.attn.v"))?;
        // Concat-then-project is computed as a sum of per-head
        // projections, which is the same linear map.
        let mut proj_sum: Option<NodeId> = None;
        for hd in 0..heads {
            let qh = g.slice_lastdim(q, hd * dh, dh);
            let kh = g.slice_lastdim(kk, hd * dh, dh);
            let vh = g.slice_lastdim(v, hd * dh, dh);
            let att = crate::kernel::masked_attention(g, qh, kh, vh, mask)?;
            let flat = g.reshape(att, vec![b * t, dh]);
            let wp = g.param(&m.store, m.pid(&format!("blk{i}.attn.proj{hd}.w"))?);
            let p = g.matmul(flat, wp)?;
            let p = g.reshape(p, vec![b, t, h]);
            proj_sum = Some(match proj_sum {
                None => p,
                Some(acc) => g.add(acc, p)?,
            });
        }
        let pb = g.param(&m.store, m.pid(&format!("blk{i}.attn.proj.b"))?);
        let att_out = g.add_bias(proj_sum.unwrap(), pb)?;
        let att_out = g.dropout(att_out, m.cfg.dropout, rng);
        x = g.add(x, att_out)?;

        let pre2 = layer_norm_affine(g, m, x, &format!("blk{i}.ln2"))?;
        let mid = linear3d(g, m, pre2, &format!("blk{i}.mlp1"))?;
        let mid = g.tanh(mid);
        let out = linear3d(g, m, mid, &format!("blk{i}.mlp2"))?;
        let out = g.dropout(out, m.cfg.dropout, rng);
        x = g.add(x, out)?;
    }
    let x = layer_norm_affine(g, m, x, "final.ln")?;
    let states = g.take_stride3(x, 1);
    action_head(g, m, states)
}

struct LstmLayerIds {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
}

fn lstm_cell(
    g: &mut Graph,
    ids: &LstmLayerIds,
    xt: NodeId,
    hprev: NodeId,
    cprev: NodeId,
    hidden: usize,
) -> Result<(NodeId, NodeId), ModelError> {
    let gx = g.matmul(xt, ids.wx)?;
    let gh = g.matmul(hprev, ids.wh)?;
    let gates = g.add(gx, gh)?;
    let gates = g.add_bias(gates, ids.b)?;
    let i = g.slice_lastdim(gates, 0, hidden);
    let f = g.slice_lastdim(gates, hidden, hidden);
    let gg = g.slice_lastdim(gates, 2 * hidden, hidden);
    let o = g.slice_lastdim(gates, 3 * hidden, hidden);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let gg = g.tanh(gg);
    let o = g.sigmoid(o);
    let fc = g.mul(f, cprev)?;
    let ig = g.mul(i, gg)?;
    let c = g.add(fc, ig)?;
    let ct = g.tanh(c);
    let h = g.mul(o, ct)?;
    Ok((h, c))
}

/// Runs the stacked LSTM over an input stream [B,T,H], returning the
/// stacked top-layer outputs [B,T,H]. Inter-layer dropout follows the
/// usual stacked-LSTM convention (not applied after the last layer).
fn lstm_stack(
    g: &mut Graph,
    m: &Model,
    input: NodeId,
    rng: &mut StreamRng,
) -> Result<NodeId, ModelError> {
    let shape = g.value(input).shape().to_vec();
    let (b, t) = (shape[0], shape[1]);
    let h = m.cfg.hidden;
    let mut stream = input;
    for l in 0..m.cfg.n_layers {
        let ids = LstmLayerIds {
            wx: g.param(&m.store, m.pid(&format!("lstm{l}.wx"))?),
            wh: g.param(&m.store, m.pid(&format!("lstm{l}.wh"))?),
            b: g.param(&m.store, m.pid(&format!("lstm{l}.b"))?),
        };
        let mut hs = g.leaf(Array::zeros(vec![b, h]));
        let mut cs = g.leaf(Array::zeros(vec![b, h]));
        let mut outs = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = g.take_time(stream, ti);
            let (hn, cn) = lstm_cell(g, &ids, xt, hs, cs, h)?;
            hs = hn;
            cs = cn;
            outs.push(hs);
        }
        stream = g.stack_rows(&outs)?;
        if l + 1 < m.cfg.n_layers {
            stream = g.dropout(stream, m.cfg.dropout, rng);
        }
    }
    Ok(stream)
}

/// Stacked LSTM over the 3K token stream (zero initial hidden/cell
/// states); actions read at state-token positions. In fused-token mode
/// the stream is K summed tokens (RTG_t + state_t + action_{t-1}) and
/// actions are read at step positions directly.
pub fn dlstm_forward(
    g: &mut Graph,
    m: &Model,
    tokens: NodeId,
    batch: &TrainingBatch,
    rng: &mut StreamRng,
) -> Result<NodeId, ModelError> {
    let (b, k) = (batch.batch, batch.k);
    let h = m.cfg.hidden;
    let input = if m.cfg.fused_tokens {
        // token_t = rtg_t + state_t + action_{t-1}; the previous-step
        // action keeps the fused stream causal for action prediction.
        let zero = g.leaf(Array::zeros(vec![b, h]));
        let mut fused = Vec::with_capacity(k);
        for t in 0..k {
            let r = g.take_time(tokens, 3 * t);
            let s = g.take_time(tokens, 3 * t + 1);
            let a_prev = if t == 0 {
                zero
            } else {
                g.take_time(tokens, 3 * (t - 1) + 2)
            };
            let rs = g.add(r, s)?;
            fused.push(g.add(rs, a_prev)?);
        }
        g.stack_rows(&fused)?
    } else {
        tokens
    };
    let out = lstm_stack(g, m, input, rng)?;
    let states = if m.cfg.fused_tokens {
        out
    } else {
        g.take_stride3(out, 1)
    };
    action_head(g, m, states)
}

/// Flattens the K-step observation window and applies the MLP; returns
/// one action per batch row [B, action_dim]. RTG and reward data never
/// enter this path.
pub fn bc_forward(
    g: &mut Graph,
    m: &Model,
    batch: &TrainingBatch,
    _rng: &mut StreamRng,
) -> Result<NodeId, ModelError> {
    let (b, k) = (batch.batch, batch.k);
    let s = m.cfg.state_dim;
    if batch.obs.last_dim() != s {
        return Err(ModelError::DimMismatch(format!(
            "batch state dim {} vs model {}",
            batch.obs.last_dim(),
            s
        )));
    }
    let obs = g.leaf(batch.obs.clone());
    let mut x = g.reshape(obs, vec![b, k * s]);
    for name in ["bc0", "bc1", "bc2"] {
        let w = g.param(&m.store, m.pid(&format!("{name}.w"))?);
        let bias = g.param(&m.store, m.pid(&format!("{name}.b"))?);
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, bias)?;
        x = g.tanh(y);
    }
    let w = g.param(&m.store, m.pid("head.w")?);
    let bias = g.param(&m.store, m.pid("head.b")?);
    let y = g.matmul(x, w)?;
    let y = g.add_bias(y, bias)?;
    let y = g.tanh(y);
    Ok(g.scale(y, m.cfg.action_bound))
}

/// Variant dispatch for the trainer: returns predicted actions plus the
/// matching regression target and loss mask. DT/DLSTM predict per
/// position ([B,K,A] against the full action tensor); BC predicts only
/// the final action of each window ([B,A]).
pub fn forward_for_training(
    g: &mut Graph,
    m: &Model,
    batch: &TrainingBatch,
    rng: &mut StreamRng,
) -> Result<(NodeId, Array, Array), ModelError> {
    match m.cfg.variant {
        ModelVariant::Bc => {
            let pred = bc_forward(g, m, batch, rng)?;
            let a = m.cfg.action_dim;
            let mut target = Vec::with_capacity(batch.batch * a);
            for b in 0..batch.batch {
                let off = (b * batch.k + batch.k - 1) * a;
                target.extend_from_slice(&batch.act.data()[off..off + a]);
            }
            let target = Array::new(vec![batch.batch, a], target);
            let mask = Array::full(vec![batch.batch, a], 1.0);
            Ok((pred, target, mask))
        }
        ModelVariant::Dt => {
            let tokens = embed_tokens(g, m, batch)?;
            let pred = dt_forward(g, m, tokens, batch, rng)?;
            Ok((pred, batch.act.clone(), batch.loss_mask(m.cfg.action_dim)))
        }
        ModelVariant::Dlstm => {
            let tokens = embed_tokens(g, m, batch)?;
            let pred = dlstm_forward(g, m, tokens, batch, rng)?;
            Ok((pred, batch.act.clone(), batch.loss_mask(m.cfg.action_dim)))
        }
    }
}

// ---------------------------------------------------------------------
// Rolling evaluation context
// ---------------------------------------------------------------------

/// Rolling window of the last K (rtg, observation, action) triples plus
/// absolute timesteps. The action slot of the current step holds zeros
/// until the prediction is committed.
#[derive(Clone, Debug)]
pub struct PolicyContext {
    k: usize,
    action_dim: usize,
    pub target_rtg: f64,
    rtgs: Vec<f64>,
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    timesteps: Vec<usize>,
}

impl PolicyContext {
    pub fn new(k: usize, action_dim: usize, target_rtg: f64) -> Self {
        Self {
            k,
            action_dim,
            target_rtg,
            rtgs: Vec::new(),
            observations: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
        }
    }

    /// Opens step `t`: records the current target RTG and observation
    /// with a zero action placeholder, evicting beyond-window history.
    pub fn begin_step(&mut self, observation: Vec<f64>, t: usize) {
        self.rtgs.push(self.target_rtg);
        self.observations.push(observation);
        self.actions.push(vec![0.0; self.action_dim]);
        self.timesteps.push(t);
        if self.rtgs.len() > self.k {
            self.rtgs.remove(0);
            self.observations.remove(0);
            self.actions.remove(0);
            self.timesteps.remove(0);
        }
    }

    /// Fills the current step's action slot with the executed action.
    pub fn commit_action(&mut self, action: &[f64]) {
        let last = self.actions.last_mut().expect("begin_step first");
        last.copy_from_slice(action);
    }

    /// Decrements the target RTG by the observed reward.
    pub fn observe_reward(&mut self, reward: f64) {
        self.target_rtg -= reward;
    }

    pub fn len(&self) -> usize {
        self.rtgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtgs.is_empty()
    }

    pub fn current_rtg(&self) -> f64 {
        self.target_rtg
    }
}

// ---------------------------------------------------------------------
// Host (inference) forwards
// ---------------------------------------------------------------------

/// A trained model plus the dataset normalizer it was fitted with:
/// everything the control loop needs to act.
pub struct Policy {
    pub model: Model,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl Policy {
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Predicts the action for the newest (still-uncommitted) step in
    /// the context. Uses the host execution path.
    pub fn predict_next_action(&self, ctx: &PolicyContext) -> Result<Vec<f64>, ModelError> {
        let m = &self.model;
        if ctx.is_empty() {
            return Err(ModelError::DimMismatch("empty context".into()));
        }
        if ctx.action_dim != m.cfg.action_dim {
            return Err(ModelError::DimMismatch(format!(
                "context action dim {} vs model {}",
                ctx.action_dim, m.cfg.action_dim
            )));
        }
        if ctx.observations[0].len() != m.cfg.state_dim {
            return Err(ModelError::DimMismatch(format!(
                "context state dim {} vs model {}",
                ctx.observations[0].len(),
                m.cfg.state_dim
            )));
        }
        let l = ctx.len();
        let norm_obs: Vec<Vec<f64>> = ctx.observations.iter().map(|o| self.normalize(o)).collect();
        let scaled_rtg: Vec<f64> = ctx.rtgs.iter().map(|r| r / m.cfg.rtg_scale).collect();
        match m.cfg.variant {
            ModelVariant::Bc => {
                // Left-pad the flattened window with zeros up to K.
                let s = m.cfg.state_dim;
                let mut flat = vec![0.0; m.cfg.context_len * s];
                let off = (m.cfg.context_len - l) * s;
                for (i, o) in norm_obs.iter().enumerate() {
                    flat[off + i * s..off + (i + 1) * s].copy_from_slice(o);
                }
                host_bc(m, &flat)
            }
            ModelVariant::Dt => {
                if let Some(mt) = m.cfg.max_timestep {
                    if let Some(&t) = ctx.timesteps.iter().max() {
                        if t >= mt {
                            return Err(ModelError::Kernel(KernelError::TimestepOutOfRange {
                                index: t,
                                table: mt,
                            }));
                        }
                    }
                }
                host_dt(m, &scaled_rtg, &norm_obs, &ctx.actions, &ctx.timesteps)
            }
            ModelVariant::Dlstm => host_dlstm(m, &scaled_rtg, &norm_obs, &ctx.actions),
        }
    }
}

fn host_linear(m: &Model, x: &Array, name: &str) -> Result<Array, ModelError> {
    let w = m.p(&format!("{name}.w"))?;
    let b = m.p(&format!("{name}.b"))?;
    let (rows, i) = (x.rows(), x.last_dim());
    let o = w.shape()[1];
    let mut y = matmul(x, w, rows, i, o);
    for row in y.data_mut().chunks_mut(o) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

fn host_layer_norm(m: &Model, x: &mut Array, name: &str) -> Result<(), ModelError> {
    const LN_EPS: f64 = 1e-5;
    let gain = m.p(&format!("{name}.g"))?.data().to_vec();
    let bias = m.p(&format!("{name}.b"))?.data().to_vec();
    let n = x.last_dim();
    for row in x.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(())
}

fn host_head(m: &Model, hrow: &Array) -> Result<Vec<f64>, ModelError> {
    let y = host_linear(m, hrow, "head")?;
    Ok(y.data()
        .iter()
        .map(|v| v.tanh() * m.cfg.action_bound)
        .collect())
}

/// Interleaved token embedding on the host: returns [3L, H].
fn host_embed(
    m: &Model,
    rtgs: &[f64],
    obs: &[Vec<f64>],
    acts: &[Vec<f64>],
) -> Result<Array, ModelError> {
    let l = rtgs.len();
    let (s, a, h) = (m.cfg.state_dim, m.cfg.action_dim, m.cfg.hidden);
    let r_in = Array::new(vec![l, 1], rtgs.to_vec());
    let s_in = Array::new(vec![l, s], obs.concat());
    let a_in = Array::new(vec![l, a], acts.concat());
    let r_emb = host_linear(m, &r_in, "embed.rtg")?;
    let s_emb = host_linear(m, &s_in, "embed.state")?;
    let a_emb = host_linear(m, &a_in, "embed.action")?;
    let mut seq = Vec::with_capacity(3 * l * h);
    for t in 0..l {
        seq.extend_from_slice(&r_emb.data()[t * h..(t + 1) * h]);
        seq.extend_from_slice(&s_emb.data()[t * h..(t + 1) * h]);
        seq.extend_from_slice(&a_emb.data()[t * h..(t + 1) * h]);
    }
    Ok(Array::new(vec![3 * l, h], seq))
}

fn host_dt(
    m: &Model,
    rtgs: &[f64],
    obs: &[Vec<f64>],
    acts: &[Vec<f64>],
    timesteps: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let l = rtgs.len();
    let h = m.cfg.hidden;
    let heads = m.cfg.n_heads.unwrap();
    let dh = h / heads;
    let t3 = 3 * l;

    let mut x = host_embed(m, rtgs, obs, acts)?;
    let pos = m.p("pos.table")?;
    for (t, &ts) in timesteps.iter().enumerate() {
        for tok in 0..3 {
            let row = (3 * t + tok) * h;
            for j in 0..h {
                x.data_mut()[row + j] += pos.data()[ts * h + j];
            }
        }
    }
    host_layer_norm(m, &mut x, "embed.ln")?;

    for i in 0..m.cfg.n_layers {
        let mut pre = x.clone();
        host_layer_norm(m, &mut pre, &format!("blk{i}.ln1"))?;
        let q = host_linear(m, &pre, &format!("blk{i}.attn.q"))?;
        let k = host_linear(m, &pre, &format!("blk{i}.attn.k"))?;
        let v = host_linear(m, &pre, &format!("blk{i}.attn.v"))?;
        let mut att_out = vec![0.0; t3 * h];
        for hd in 0..heads {
            let wp = m.p(&format!("blk{i}.attn.proj{hd}.w"))?;
            // Causal softmax(q kᵀ/√dh) v, head slice [.., hd*dh..).
            for ti in 0..t3 {
                let qrow = &q.data()[ti * h + hd * dh..ti * h + (hd + 1) * dh];
                let mut weights = Vec::with_capacity(ti + 1);
                let mut mx = f64::NEG_INFINITY;
                for tj in 0..=ti {
                    let krow = &k.data()[tj * h + hd * dh..tj * h + (hd + 1) * dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    let sc = dot / (dh as f64).sqrt();
                    mx = mx.max(sc);
                    weights.push(sc);
                }
                let mut denom = 0.0;
                for w in &mut weights {
                    *w = (*w - mx).exp();
                    denom += *w;
                }
                let mut head_out = vec![0.0; dh];
                for (tj, w) in weights.iter().enumerate() {
                    let vrow = &v.data()[tj * h + hd * dh..tj * h + (hd + 1) * dh];
                    for (o, vv) in head_out.iter_mut().zip(vrow) {
                        *o += w / denom * vv;
                    }
                }
                // Project this head's output into the residual width.
                for (jj, hv) in head_out.iter().enumerate() {
                    for j in 0..h {
                        att_out[ti * h + j] += hv * wp.data()[jj * h + j];
                    }
                }
            }
        }
        let pb = m.p(&format!("blk{i}.attn.proj.b"))?;
        for row in att_out.chunks_mut(h) {
            for (v, b) in row.iter_mut().zip(pb.data()) {
                *v += b;
            }
        }
        for (xv, av) in x.data_mut().iter_mut().zip(&att_out) {
            *xv += av;
        }

        let mut pre2 = x.clone();
        host_layer_norm(m, &mut pre2, &format!("blk{i}.ln2"))?;
        let mut mid = host_linear(m, &pre2, &format!("blk{i}.mlp1"))?;
        for v in mid.data_mut() {
            *v = v.tanh();
        }
        let out = host_linear(m, &mid, &format!("blk{i}.mlp2"))?;
        for (xv, ov) in x.data_mut().iter_mut().zip(out.data()) {
            *xv += ov;
        }
    }
    host_layer_norm(m, &mut x, "final.ln")?;
    let last_state = 3 * (l - 1) + 1;
    let hrow = Array::new(vec![1, h], x.data()[last_state * h..(last_state + 1) * h].to_vec());
    host_head(m, &hrow)
}

fn host_lstm_cell(
    m: &Model,
    layer: usize,
    xt: &[f64],
    hs: &mut [f64],
    cs: &mut [f64],
) -> Result<(), ModelError> {
    let h = m.cfg.hidden;
    let wx = m.p(&format!("lstm{layer}.wx"))?;
    let wh = m.p(&format!("lstm{layer}.wh"))?;
    let b = m.p(&format!("lstm{layer}.b"))?;
    let mut gates = b.data().to_vec();
    for (j, &xv) in xt.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &wx.data()[j * 4 * h..(j + 1) * 4 * h];
        for (gv, wv) in gates.iter_mut().zip(row) {
            *gv += xv * wv;
        }
    }
    for (j, &hv) in hs.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let row = &wh.data()[j * 4 * h..(j + 1) * 4 * h];
        for (gv, wv) in gates.iter_mut().zip(row) {
            *gv += hv * wv;
        }
    }
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        cs[j] = f * cs[j] + i * g;
        hs[j] = o * cs[j].tanh();
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn host_dlstm(
    m: &Model,
    rtgs: &[f64],
    obs: &[Vec<f64>],
    acts: &[Vec<f64>],
) -> Result<Vec<f64>, ModelError> {
    // Left-pad the window with zero triples up to K so the recurrence
    // sees the same bias-only prefix tokens as padded training windows.
    let pad = m.cfg.context_len - rtgs.len();
    let mut rtgs_p = vec![0.0; pad];
    rtgs_p.extend_from_slice(rtgs);
    let mut obs_p = vec![vec![0.0; m.cfg.state_dim]; pad];
    obs_p.extend_from_slice(obs);
    let mut acts_p = vec![vec![0.0; m.cfg.action_dim]; pad];
    acts_p.extend_from_slice(acts);
    let (rtgs, obs, acts) = (&rtgs_p[..], &obs_p[..], &acts_p[..]);

    let l = rtgs.len();
    let h = m.cfg.hidden;
    let tokens = host_embed(m, rtgs, obs, acts)?;
    let stream: Vec<Vec<f64>> = if m.cfg.fused_tokens {
        (0..l)
            .map(|t| {
                let mut tok = vec![0.0; h];
                for (j, v) in tok.iter_mut().enumerate() {
                    *v = tokens.data()[3 * t * h + j] + tokens.data()[(3 * t + 1) * h + j];
                    if t > 0 {
                        *v += tokens.data()[(3 * (t - 1) + 2) * h + j];
                    }
                }
                tok
            })
            .collect()
    } else {
        // All tokens up to and including the newest state token; the
        // trailing placeholder action token cannot influence earlier
        // outputs and is skipped.
        (0..3 * l - 1)
            .map(|t| tokens.data()[t * h..(t + 1) * h].to_vec())
            .collect()
    };
    let mut layer_in = stream;
    for layer in 0..m.cfg.n_layers {
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut outs = Vec::with_capacity(layer_in.len());
        for xt in &layer_in {
            host_lstm_cell(m, layer, xt, &mut hs, &mut cs)?;
            outs.push(hs.clone());
        }
        layer_in = outs;
    }
    let last = layer_in.last().unwrap();
    host_head(m, &Array::new(vec![1, h], last.clone()))
}

fn host_bc(m: &Model, flat_window: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut x = Array::new(vec![1, flat_window.len()], flat_window.to_vec());
    for name in ["bc0", "bc1", "bc2"] {
        x = host_linear(m, &x, name)?;
        for v in x.data_mut() {
            *v = v.tanh();
        }
    }
    host_head(m, &x)
}

/// Streaming DLSTM inference: hidden/cell state carried across steps so
/// each control step processes only the new tokens. Benchmarked as an
/// alternative mode; headline evaluation re-processes the window.
pub struct DlstmStream {
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
}

impl DlstmStream {
    pub fn new(m: &Model) -> Self {
        Self {
            hs: vec![vec![0.0; m.cfg.hidden]; m.cfg.n_layers],
            cs: vec![vec![0.0; m.cfg.hidden]; m.cfg.n_layers],
        }
    }

    pub fn reset(&mut self) {
        for v in self.hs.iter_mut().chain(self.cs.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn feed(&mut self, m: &Model, token: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut x = token.to_vec();
        for layer in 0..m.cfg.n_layers {
            host_lstm_cell(m, layer, &x, &mut self.hs[layer], &mut self.cs[layer])?;
            x = self.hs[layer].clone();
        }
        Ok(x)
    }

    /// Feeds (rtg, state) tokens for the current step, reads the action
    /// from the state-token output, then feeds the chosen action token.
    pub fn step(
        &mut self,
        policy: &Policy,
        rtg: f64,
        obs: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let m = &policy.model;
        let norm = policy.normalize(obs);
        let scaled = rtg / m.cfg.rtg_scale;
        let r_in = Array::new(vec![1, 1], vec![scaled]);
        let s_in = Array::new(vec![1, m.cfg.state_dim], norm);
        let r_tok = host_linear(m, &r_in, "embed.rtg")?;
        let s_tok = host_linear(m, &s_in, "embed.state")?;
        self.feed(m, r_tok.data())?;
        let out = self.feed(m, s_tok.data())?;
        let action = host_head(m, &Array::new(vec![1, m.cfg.hidden], out))?;
        let a_in = Array::new(vec![1, m.cfg.action_dim], action.clone());
        let a_tok = host_linear(m, &a_in, "embed.action")?;
        self.feed(m, a_tok.data())?;
        Ok(action)
    }
}
