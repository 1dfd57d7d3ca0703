//! Phase 2: the causal-transformer policy. Input sequences hold a query-state
//! token, optionally a belief token, and one row per context transition; the
//! model predicts the optimal action at every context-prefix position.

use crate::datagen::{encode_transition, Corpus, EncodingSpec};
use crate::env::{Split, State, Transition};
use crate::error::{Error, Result};
use crate::nn::layers::causal_self_attention_tape;
use crate::nn::{
    optimizer_step, read_checkpoint, write_checkpoint, OptimizerConfig, ParameterStore, Tape,
    Tensor, Var,
};
use crate::seed;
use crate::vae::{infer_belief, pool_belief, BeliefPosterior, LossRow, ObsModel, Vae};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ht,
    Dpt,
    HtMo,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ht" => Ok(Self::Ht),
            "dpt" => Ok(Self::Dpt),
            "ht-mo" => Ok(Self::HtMo),
            other => Err(Error::Config(format!("unknown policy variant: {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ht => "ht",
            Self::Dpt => "dpt",
            Self::HtMo => "ht-mo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeliefMode {
    /// One belief token v₂ computed from the full record (the default).
    GlobalToken,
    /// Per-prefix beliefs appended to each transition row; no belief token.
    PrefixInjected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeliefRepr {
    /// A single latent vector: a reparameterized sample during training,
    /// the posterior mean at evaluation.
    Mean,
    /// Deterministic (mu ⧺ logvar) concatenation in both phases.
    MeanLogvar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub encoding: EncodingSpec,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_capacity: usize,
    pub variant: Variant,
    pub belief_mode: BeliefMode,
    pub belief_repr: BeliefRepr,
    /// Width of the belief vector fed to the model (0 for dpt/ht-mo).
    pub belief_dim: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    /// Reward-head loss for ht-mo: squared error or binary cross-entropy.
    pub reward_obs: ObsModel,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl PolicyConfig {
    pub fn new(encoding: EncodingSpec, variant: Variant, context_capacity: usize) -> Self {
        Self {
            encoding,
            embed_dim: 32,
            layers: 4,
            heads: 2,
            context_capacity,
            variant,
            belief_mode: BeliefMode::GlobalToken,
            belief_repr: BeliefRepr::Mean,
            belief_dim: 0,
            lambda1: 1.0,
            lambda2: 1.0,
            reward_obs: ObsModel::Bernoulli,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 40,
            batch_size: 64,
        }
    }

    /// Row width: the transition encoding, widened by the belief in
    /// prefix-injected mode.
    pub fn d_v(&self) -> usize {
        match (self.variant, self.belief_mode) {
            (Variant::Ht, BeliefMode::PrefixInjected) => {
                self.encoding.d_input() + self.belief_dim
            }
            _ => self.encoding.d_input(),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.encoding.d_a()
    }

    /// Belief-vector width implied by the latent dimension and representation.
    pub fn expected_belief_dim(&self, latent_dim: usize) -> usize {
        match self.belief_repr {
            BeliefRepr::Mean => latent_dim,
            BeliefRepr::MeanLogvar => 2 * latent_dim,
        }
    }

    /// Belief vector for training-time conditioning.
    pub fn belief_vec_train(&self, post: &BeliefPosterior, rng: &mut impl Rng) -> Vec<f32> {
        match self.belief_repr {
            BeliefRepr::Mean => post.sample_vec(rng),
            BeliefRepr::MeanLogvar => post.concat_vec(),
        }
    }

    /// Belief vector for evaluation-time conditioning (deterministic).
    pub fn belief_vec_eval(&self, post: &BeliefPosterior) -> Vec<f32> {
        match self.belief_repr {
            BeliefRepr::Mean => post.mean_vec(),
            BeliefRepr::MeanLogvar => post.concat_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.variant == Variant::Ht {
            if self.belief_dim == 0 {
                return Err(Error::Config("ht variant needs belief_dim > 0".into()));
            }
            if self.belief_mode == BeliefMode::GlobalToken && self.belief_dim > self.d_v() {
                return Err(Error::Config(
                    "belief vector wider than a sequence row".into(),
                ));
            }
        } else if self.belief_dim != 0 {
            return Err(Error::Config(format!(
                "variant {} forbids belief inputs",
                self.variant
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Belief conditioning for sequence assembly.
pub enum BeliefInput<'a> {
    None,
    /// One belief vector for the whole sequence (global-token mode).
    Global(&'a [f32]),
    /// Belief after each prefix, b_1..b_n (prefix-injected mode).
    PerPrefix(&'a [Vec<f32>]),
}

/// Assembled model input: rows plus the index of the first row whose output
/// is a prediction position.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub rows: Tensor,
    pub prediction_start: usize,
}

impl InputSequence {
    /// Number of prediction positions (n + 1).
    pub fn num_predictions(&self) -> usize {
        self.rows.rows() - self.prediction_start
    }
}

/// Build the model input for a context and query. Row layout:
/// ht global-token:   [v₁ = (query ⧺ 0); v₂ = (belief ⧺ 0); V₁..V_n]
/// dpt / ht-mo:       [v₁; V₁..V_n]
/// ht prefix-injected:[v₁ ⧺ 0; V₁ ⧺ b₁; ...; V_n ⧺ b_n]
/// No positional encoding is applied anywhere.
pub fn assemble_sequence(
    transitions: &[Transition],
    belief: BeliefInput<'_>,
    query: &State,
    config: &PolicyConfig,
) -> Result<InputSequence> {
    let n = transitions.len();
    if n > config.context_capacity {
        return Err(Error::Config(format!(
            "context of {n} transitions exceeds capacity {}",
            config.context_capacity
        )));
    }
    let d_v = config.d_v();
    let enc = &config.encoding;
    let query_vec = enc.encode_query_state(query)?;

    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n + 2);
    let pad = |mut v: Vec<f32>| -> Vec<f32> {
        v.resize(d_v, 0.0);
        v
    };
    rows.push(pad(query_vec));

    let prediction_start = match (config.variant, &belief) {
        (Variant::Ht, BeliefInput::Global(b)) => {
            if config.belief_mode != BeliefMode::GlobalToken {
                return Err(Error::Config(
                    "global belief supplied in prefix-injected mode".into(),
                ));
            }
            if b.len() != config.belief_dim {
                return Err(Error::ShapeMismatch {
                    op: "assemble_sequence belief",
                    axis: 0,
                    expected: config.belief_dim,
                    got: b.len(),
                });
            }
            rows.push(pad(b.to_vec()));
            for t in transitions {
                rows.push(encode_transition(t, enc)?);
            }
            1
        }
        (Variant::Ht, BeliefInput::PerPrefix(bs)) => {
            if config.belief_mode != BeliefMode::PrefixInjected {
                return Err(Error::Config(
                    "per-prefix beliefs supplied in global-token mode".into(),
                ));
            }
            if bs.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "assemble_sequence beliefs",
                    axis: 0,
                    expected: n,
                    got: bs.len(),
                });
            }
            for (t, b) in transitions.iter().zip(*bs) {
                let mut row = encode_transition(t, enc)?;
                row.extend_from_slice(b);
                if row.len() != d_v {
                    return Err(Error::ShapeMismatch {
                        op: "assemble_sequence belief width",
                        axis: 1,
                        expected: d_v,
                        got: row.len(),
                    });
                }
                rows.push(row);
            }
            0
        }
        (Variant::Dpt | Variant::HtMo, BeliefInput::None) => {
            for t in transitions {
                rows.push(encode_transition(t, enc)?);
            }
            0
        }
        (Variant::Dpt | Variant::HtMo, _) => {
            return Err(Error::Config(format!(
                "variant {} forbids belief inputs",
                config.variant
            )))
        }
        (Variant::Ht, BeliefInput::None) => {
            return Err(Error::Config("ht variant requires a belief".into()))
        }
    };

    Ok(InputSequence {
        rows: Tensor::from_rows(&rows),
        prediction_start,
    })
}

#[derive(Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParameterStore,
    /// Checksum of the paired belief model (ht variants).
    pub vae_ref: Option<u64>,
}

impl Policy {
    pub fn new(config: PolicyConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, "policy-init", 0);
        let mut p = ParameterStore::new();
        let e = config.embed_dim;
        let lin = |p: &mut ParameterStore, name: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            p.insert(&format!("{name}.w"), Tensor::randn(vec![rows, cols], 0.02, rng));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![cols]));
        };
        lin(&mut p, "embed", config.d_v(), e, &mut rng);
        for i in 0..config.layers {
            p.insert(&format!("block{i}.ln1.g"), Tensor::new(vec![e], vec![1.0; e]));
            p.insert(&format!("block{i}.ln1.b"), Tensor::zeros(vec![e]));
            lin(&mut p, &format!("block{i}.attn.qkv"), e, 3 * e, &mut rng);
            lin(&mut p, &format!("block{i}.attn.proj"), e, e, &mut rng);
            p.insert(&format!("block{i}.ln2.g"), Tensor::new(vec![e], vec![1.0; e]));
            p.insert(&format!("block{i}.ln2.b"), Tensor::zeros(vec![e]));
            lin(&mut p, &format!("block{i}.mlp.fc1"), e, 4 * e, &mut rng);
            lin(&mut p, &format!("block{i}.mlp.fc2"), 4 * e, e, &mut rng);
        }
        p.insert("ln_f.g", Tensor::new(vec![e], vec![1.0; e]));
        p.insert("ln_f.b", Tensor::zeros(vec![e]));
        lin(&mut p, "head", e, config.num_actions(), &mut rng);
        if config.variant == Variant::HtMo {
            lin(&mut p, "rhead", e, 1, &mut rng);
        }
        Ok(Self {
            config,
            params: p,
            vae_ref: None,
        })
    }

    /// Transformer trunk: embedding, pre-norm residual blocks, final norm.
    fn trunk_tape(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let embed_w = tape.param(&self.params, "embed.w");
        let embed_b = tape.param(&self.params, "embed.b");
        let mut x = tape.linear(rows, embed_w, embed_b);
        for i in 0..self.config.layers {
            let ln1_g = tape.param(&self.params, &format!("block{i}.ln1.g"));
            let ln1_b = tape.param(&self.params, &format!("block{i}.ln1.b"));
            let qkv_w = tape.param(&self.params, &format!("block{i}.attn.qkv.w"));
            let qkv_b = tape.param(&self.params, &format!("block{i}.attn.qkv.b"));
            let proj_w = tape.param(&self.params, &format!("block{i}.attn.proj.w"));
            let proj_b = tape.param(&self.params, &format!("block{i}.attn.proj.b"));
            let normed = tape.layer_norm_rows(x, ln1_g, ln1_b);
            let attn = causal_self_attention_tape(
                tape,
                normed,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                self.config.heads,
            )?;
            x = tape.add(x, attn);

            let ln2_g = tape.param(&self.params, &format!("block{i}.ln2.g"));
            let ln2_b = tape.param(&self.params, &format!("block{i}.ln2.b"));
            let fc1_w = tape.param(&self.params, &format!("block{i}.mlp.fc1.w"));
            let fc1_b = tape.param(&self.params, &format!("block{i}.mlp.fc1.b"));
            let fc2_w = tape.param(&self.params, &format!("block{i}.mlp.fc2.w"));
            let fc2_b = tape.param(&self.params, &format!("block{i}.mlp.fc2.b"));
            let normed2 = tape.layer_norm_rows(x, ln2_g, ln2_b);
            let h = tape.linear(normed2, fc1_w, fc1_b);
            let h = tape.gelu(h);
            let mlp = tape.linear(h, fc2_w, fc2_b);
            x = tape.add(x, mlp);
        }
        let lnf_g = tape.param(&self.params, "ln_f.g");
        let lnf_b = tape.param(&self.params, "ln_f.b");
        Ok(tape.layer_norm_rows(x, lnf_g, lnf_b))
    }

    /// Action logits at every prediction position.
    fn forward_tape(&self, tape: &mut Tape, seq: &InputSequence) -> Result<Var> {
        let rows = tape.input(seq.rows.clone());
        let x = self.trunk_tape(tape, rows)?;
        let sel = tape.select_rows(x, seq.prediction_start, seq.num_predictions());
        let head_w = tape.param(&self.params, "head.w");
        let head_b = tape.param(&self.params, "head.b");
        Ok(tape.linear(sel, head_w, head_b))
    }

    /// Logits per prediction position, [n+1 × K].
    pub fn forward(&self, seq: &InputSequence) -> Result<Tensor> {
        if seq.rows.cols() != self.config.d_v() {
            return Err(Error::ShapeMismatch {
                op: "policy_forward",
                axis: 1,
                expected: self.config.d_v(),
                got: seq.rows.cols(),
            });
        }
        let mut tape = Tape::new();
        let logits = self.forward_tape(&mut tape, seq)?;
        Ok(tape.value(logits).clone())
    }

    /// Negative log-likelihood of the label summed over all prediction
    /// positions, on the tape.
    fn loss_tape(&self, tape: &mut Tape, seq: &InputSequence, label: usize) -> Result<Var> {
        let logits = self.forward_tape(tape, seq)?;
        tape.cross_entropy_sum(logits, label)
    }

    /// Multi-objective loss (ht-mo): λ₁ · action cross-entropy + λ₂ · reward
    /// prediction at each position j against r_{j+1}.
    fn mo_loss_tape(
        &self,
        tape: &mut Tape,
        seq: &InputSequence,
        label: usize,
        rewards: &[f32],
    ) -> Result<Var> {
        let rows = tape.input(seq.rows.clone());
        let x = self.trunk_tape(tape, rows)?;
        let sel = tape.select_rows(x, seq.prediction_start, seq.num_predictions());
        let head_w = tape.param(&self.params, "head.w");
        let head_b = tape.param(&self.params, "head.b");
        let logits = tape.linear(sel, head_w, head_b);
        let ce = tape.cross_entropy_sum(logits, label)?;

        let n = rewards.len();
        let mut terms = vec![(ce, self.config.lambda1)];
        if n > 0 {
            // position j (query row for j=0, transition row j thereafter)
            // predicts the next reward r_{j+1}
            let rsel = tape.select_rows(x, 0, n);
            let rhead_w = tape.param(&self.params, "rhead.w");
            let rhead_b = tape.param(&self.params, "rhead.b");
            let rpred = tape.linear(rsel, rhead_w, rhead_b);
            let targets = Tensor::new(vec![n, 1], rewards.to_vec());
            let rl = match self.config.reward_obs {
                ObsModel::Bernoulli => tape.bce_with_logits_sum(rpred, targets),
                ObsModel::Gaussian => tape.mse_sum(rpred, targets),
            };
            terms.push((rl, self.config.lambda2));
        }
        Ok(tape.weighted_sum(&terms))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metas = vec![
            ("component".to_string(), "policy".to_string()),
            ("variant".to_string(), self.config.variant.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config)
                    .map_err(|e| Error::Config(format!("config serialization: {e}")))?,
            ),
        ];
        if let Some(r) = self.vae_ref {
            metas.push(("vae_ref".to_string(), format!("{r:016x}")));
        }
        write_checkpoint(&self.params, &metas, true, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, metas) = read_checkpoint(path)?;
        match metas.get("component").map(String::as_str) {
            Some("policy") => {}
            other => {
                return Err(Error::Format(format!(
                    "checkpoint is not a policy (component={other:?})"
                )))
            }
        }
        let config: PolicyConfig = serde_json::from_str(
            metas
                .get("config")
                .ok_or_else(|| Error::Format("policy checkpoint missing config".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad policy config: {e}")))?;
        let vae_ref = metas
            .get("vae_ref")
            .map(|s| {
                u64::from_str_radix(s, 16)
                    .map_err(|_| Error::Format(format!("bad vae_ref: {s}")))
            })
            .transpose()?;
        Ok(Self {
            config,
            params,
            vae_ref,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Argmax,
    Sample,
}

/// Forward pass, then read the final prediction position: argmax with
/// lowest-index tie-break, or a categorical sample. Never mutates parameters.
pub fn predict_action(
    policy: &Policy,
    transitions: &[Transition],
    belief: BeliefInput<'_>,
    query: &State,
    mode: PredictMode,
    rng: &mut impl Rng,
) -> Result<usize> {
    let seq = assemble_sequence(transitions, belief, query, &policy.config)?;
    let logits = policy.forward(&seq)?;
    let last = logits.row(logits.rows() - 1);
    Ok(match mode {
        PredictMode::Argmax => crate::nn::tensor::argmax(last),
        PredictMode::Sample => {
            let probs = crate::nn::tensor::softmax(last);
            crate::datagen::sample_categorical(&probs, rng)
        }
    })
}

/// Cached belief inputs for training: pooled posterior per record
/// (global-token) or per-transition latents (prefix-injected).
enum BeliefCache {
    None,
    Global(Vec<BeliefPosterior>),
    PerTransition(Vec<Vec<(Vec<f32>, Vec<f32>)>>),
}

fn belief_rows_for(
    cache: &BeliefCache,
    idx: usize,
    config: &PolicyConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Option<Vec<f32>>, Option<Vec<Vec<f32>>>)> {
    match cache {
        BeliefCache::None => Ok((None, None)),
        BeliefCache::Global(posteriors) => {
            Ok((Some(config.belief_vec_train(&posteriors[idx], rng)), None))
        }
        BeliefCache::PerTransition(latents) => {
            let lat = &latents[idx];
            let beliefs: Vec<Vec<f32>> = (1..=n).map(|j| pool_belief(lat, j).mu).collect();
            Ok((None, Some(beliefs)))
        }
    }
}

/// Accumulate gradients for one batch and return its mean loss.
fn batch_loss(
    policy: &mut Policy,
    corpus: &Corpus,
    indices: &[usize],
    cache: &BeliefCache,
    rng: &mut impl Rng,
    train: bool,
) -> Result<f32> {
    let scale = 1.0 / indices.len() as f32;
    let mut total = 0.0f64;
    for &idx in indices {
        let rec = &corpus.records[idx];
        let n = rec.transitions.len();
        let (global, per_prefix) = belief_rows_for(cache, idx, &policy.config, n, rng)?;
        let belief = match (&global, &per_prefix) {
            (Some(g), _) => BeliefInput::Global(g),
            (_, Some(p)) => BeliefInput::PerPrefix(p),
            _ => BeliefInput::None,
        };
        let seq = assemble_sequence(&rec.transitions, belief, &rec.query_state, &policy.config)?;
        let mut tape = Tape::new();
        let loss = match policy.config.variant {
            Variant::HtMo => {
                let rewards: Vec<f32> = rec.transitions.iter().map(|t| t.reward).collect();
                policy.mo_loss_tape(&mut tape, &seq, rec.optimal_action, &rewards)?
            }
            _ => policy.loss_tape(&mut tape, &seq, rec.optimal_action)?,
        };
        total += tape.scalar(loss) as f64;
        if train {
            tape.backward(loss);
            tape.accumulate_param_grads(&mut policy.params, scale);
        }
    }
    Ok((total / indices.len() as f64) as f32)
}

/// Mean action cross-entropy over a batch, accumulating gradients scaled by
/// 1/batch (ht and dpt variants).
pub fn policy_loss(
    policy: &mut Policy,
    corpus: &Corpus,
    indices: &[usize],
    beliefs: Option<&[BeliefPosterior]>,
    rng: &mut impl Rng,
) -> Result<f32> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let cache = match beliefs {
        Some(b) => BeliefCache::Global(b.to_vec()),
        None => BeliefCache::None,
    };
    batch_loss(policy, corpus, indices, &cache, rng, true)
}

/// Multi-objective batch loss (ht-mo).
pub fn mo_loss(
    policy: &mut Policy,
    corpus: &Corpus,
    indices: &[usize],
    rng: &mut impl Rng,
) -> Result<f32> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if policy.config.variant != Variant::HtMo {
        return Err(Error::Config("mo_loss requires the ht-mo variant".into()));
    }
    batch_loss(policy, corpus, indices, &BeliefCache::None, rng, true)
}

fn build_belief_cache(policy: &Policy, corpus: &Corpus, vae: Option<&Vae>) -> Result<BeliefCache> {
    if let (Variant::Ht, Some(v)) = (policy.config.variant, vae) {
        let expected = policy.config.expected_belief_dim(v.config.latent_dim);
        let needed = match policy.config.belief_mode {
            BeliefMode::GlobalToken => expected,
            // injected rows carry the posterior mean only
            BeliefMode::PrefixInjected => v.config.latent_dim,
        };
        if policy.config.belief_dim != needed {
            return Err(Error::Config(format!(
                "belief_dim {} does not match the belief model (expected {needed})",
                policy.config.belief_dim
            )));
        }
    }
    match (policy.config.variant, vae) {
        (Variant::Ht, Some(v)) => match policy.config.belief_mode {
            BeliefMode::GlobalToken => {
                let posteriors: Vec<BeliefPosterior> = corpus
                    .records
                    .iter()
                    .map(|rec| infer_belief(v, &rec.transitions, rec.transitions.len()))
                    .collect::<Result<_>>()?;
                Ok(BeliefCache::Global(posteriors))
            }
            BeliefMode::PrefixInjected => {
                let latents: Vec<Vec<(Vec<f32>, Vec<f32>)>> = corpus
                    .records
                    .iter()
                    .map(|rec| v.encode_transitions(&rec.transitions))
                    .collect::<Result<_>>()?;
                Ok(BeliefCache::PerTransition(latents))
            }
        },
        (Variant::Ht, None) => Err(Error::Config(
            "ht variant requires a belief-model checkpoint".into(),
        )),
        _ => Ok(BeliefCache::None),
    }
}

/// Train the policy with AdamW. The belief model (ht) is frozen: per-record
/// posteriors are computed once up front and sampled fresh at each visit.
/// `on_epoch` fires after every epoch (checkpoint sweeps hook in here).
pub fn train_policy(
    corpus: &Corpus,
    vae: Option<&Vae>,
    config: PolicyConfig,
    train_seed: u64,
    mut on_epoch: impl FnMut(usize, &Policy) -> Result<()>,
) -> Result<(Policy, Vec<LossRow>)> {
    if corpus.manifest.encoding() != config.encoding {
        return Err(Error::Config(
            "corpus encoding does not match the policy config".into(),
        ));
    }
    let mut policy = Policy::new(config, train_seed)?;
    policy.vae_ref = vae.map(|v| v.checksum());
    let optim = OptimizerConfig::adamw(policy.config.learning_rate, policy.config.weight_decay);
    let cache = build_belief_cache(&policy, corpus, vae)?;

    let train_idx = corpus.split_indices(Split::Train);
    let val_idx = corpus.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::Config("corpus has no training records".into()));
    }

    let mut order = train_idx.clone();
    let mut log = Vec::new();
    for epoch in 0..policy.config.epochs {
        let mut rng = seed::rng(train_seed, "policy-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(policy.config.batch_size) {
            let loss = batch_loss(&mut policy, corpus, chunk, &cache, &mut rng, true)?;
            optimizer_step(&mut policy.params, &optim)?;
            epoch_loss += loss as f64;
            batches += 1;
        }
        log.push(LossRow {
            epoch,
            split: Split::Train,
            loss: (epoch_loss / batches.max(1) as f64) as f32,
        });
        if !val_idx.is_empty() {
            let mut vrng = seed::rng(train_seed, "policy-val", epoch as u64);
            let val_loss = batch_loss(&mut policy, corpus, &val_idx, &cache, &mut vrng, false)?;
            log.push(LossRow {
                epoch,
                split: Split::Test,
                loss: val_loss,
            });
        }
        on_epoch(epoch, &policy)?;
    }
    Ok((policy, log))
}
