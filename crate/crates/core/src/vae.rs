//! Phase 1: a per-transition encoder pooled into a diagonal-Gaussian
//! posterior over a latent reward embedding, a reward decoder, and the
//! ELBO training loop. The pooled posterior is the belief handed to the
//! policy model and refreshed online at evaluation time.

use crate::datagen::{encode_transition, Corpus, EncodingSpec, PretrainExample};
use crate::env::{Split, Transition};
use crate::error::{Error, Result};
use crate::nn::{
    optimizer_step, read_checkpoint, write_checkpoint, OptimizerConfig, ParameterStore, Tape,
    Tensor, Var,
};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Keep log-variances inside a sane range; outside it the reparameterized
/// scale under- or overflows f32 long before the bound binds.
const LOGVAR_CLAMP: (f32, f32) = (-10.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsModel {
    /// Squared-error reconstruction (continuous rewards).
    Gaussian,
    /// Binary cross-entropy on a logit head (binary rewards).
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub encoding: EncodingSpec,
    pub hidden_sizes: [usize; 2],
    pub latent_dim: usize,
    pub obs_model: ObsModel,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight on the KL term.
    pub beta: f32,
    /// Chain per-prefix KL terms against the previous posterior instead of a
    /// single KL against N(0, I).
    pub recursive_prior: bool,
}

impl VaeConfig {
    pub fn new(encoding: EncodingSpec, latent_dim: usize) -> Self {
        Self {
            encoding,
            hidden_sizes: [64, 32],
            latent_dim,
            obs_model: ObsModel::Bernoulli,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            beta: 1.0,
            recursive_prior: false,
        }
    }

    pub fn d_input(&self) -> usize {
        self.encoding.d_input()
    }

    /// Decoder consumes (m, s, a, s'): the transition vector minus its reward.
    pub fn d_decoder_input(&self) -> usize {
        self.latent_dim + self.d_input() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagonal-Gaussian posterior over the latent reward embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPosterior {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

impl BeliefPosterior {
    /// The N(0, I) prior: the belief before any context.
    pub fn prior(latent_dim: usize) -> Self {
        Self {
            mu: vec![0.0; latent_dim],
            logvar: vec![0.0; latent_dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean_vec(&self) -> Vec<f32> {
        self.mu.clone()
    }

    pub fn sample_vec(&self, rng: &mut impl Rng) -> Vec<f32> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| {
                let e: f32 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * e
            })
            .collect()
    }

    pub fn concat_vec(&self) -> Vec<f32> {
        let mut v = self.mu.clone();
        v.extend_from_slice(&self.logvar);
        v
    }
}

/// Arithmetic-mean pooling of per-transition posterior parameters over the
/// first `j` entries; `j = 0` returns the prior.
pub fn pool_belief(latents: &[(Vec<f32>, Vec<f32>)], j: usize) -> BeliefPosterior {
    assert!(j <= latents.len(), "prefix length exceeds latent count");
    if j == 0 {
        let dim = latents.first().map_or(0, |(m, _)| m.len());
        return BeliefPosterior::prior(dim);
    }
    let dim = latents[0].0.len();
    let mut mu = vec![0.0f64; dim];
    let mut lv = vec![0.0f64; dim];
    for (m, l) in &latents[..j] {
        for i in 0..dim {
            mu[i] += m[i] as f64;
            lv[i] += l[i] as f64;
        }
    }
    BeliefPosterior {
        mu: mu.iter().map(|v| (*v / j as f64) as f32).collect(),
        logvar: lv.iter().map(|v| (*v / j as f64) as f32).collect(),
    }
}

pub struct Vae {
    pub config: VaeConfig,
    pub params: ParameterStore,
}

impl Vae {
    pub fn new(config: VaeConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, "vae-init", 0);
        let mut p = ParameterStore::new();
        let [h1, h2] = config.hidden_sizes;
        let d_in = config.d_input();
        let d_dec = config.d_decoder_input();
        let l = config.latent_dim;
        let lin = |p: &mut ParameterStore, name: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            p.insert(&format!("{name}.w"), Tensor::randn(vec![rows, cols], 0.02, rng));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![cols]));
        };
        lin(&mut p, "enc.fc1", d_in, h1, &mut rng);
        lin(&mut p, "enc.fc2", h1, h2, &mut rng);
        lin(&mut p, "enc.mu", h2, l, &mut rng);
        lin(&mut p, "enc.logvar", h2, l, &mut rng);
        lin(&mut p, "dec.fc1", d_dec, h1, &mut rng);
        lin(&mut p, "dec.fc2", h1, h2, &mut rng);
        lin(&mut p, "dec.out", h2, 1, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Encoder stack on the tape: rows of per-transition (mu, logvar).
    fn encode_tape(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let fc1_w = tape.param(&self.params, "enc.fc1.w");
        let fc1_b = tape.param(&self.params, "enc.fc1.b");
        let fc2_w = tape.param(&self.params, "enc.fc2.w");
        let fc2_b = tape.param(&self.params, "enc.fc2.b");
        let mu_w = tape.param(&self.params, "enc.mu.w");
        let mu_b = tape.param(&self.params, "enc.mu.b");
        let lv_w = tape.param(&self.params, "enc.logvar.w");
        let lv_b = tape.param(&self.params, "enc.logvar.b");
        let h1 = tape.linear(x, fc1_w, fc1_b);
        let h1 = tape.gelu(h1);
        let h2 = tape.linear(h1, fc2_w, fc2_b);
        let h2 = tape.gelu(h2);
        let mu = tape.linear(h2, mu_w, mu_b);
        let lv_raw = tape.linear(h2, lv_w, lv_b);
        let lv = tape.clamp(lv_raw, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
        (mu, lv)
    }

    /// Decoder stack: per-row reward statistic from (m ⧺ s,a,s') rows.
    fn decode_tape(&self, tape: &mut Tape, m: Var, sas_rows: Var, n: usize) -> Var {
        let fc1_w = tape.param(&self.params, "dec.fc1.w");
        let fc1_b = tape.param(&self.params, "dec.fc1.b");
        let fc2_w = tape.param(&self.params, "dec.fc2.w");
        let fc2_b = tape.param(&self.params, "dec.fc2.b");
        let out_w = tape.param(&self.params, "dec.out.w");
        let out_b = tape.param(&self.params, "dec.out.b");
        let m_rows = tape.repeat_row(m, n);
        let dec_in = tape.concat_cols(&[m_rows, sas_rows]);
        let h1 = tape.linear(dec_in, fc1_w, fc1_b);
        let h1 = tape.gelu(h1);
        let h2 = tape.linear(h1, fc2_w, fc2_b);
        let h2 = tape.gelu(h2);
        tape.linear(h2, out_w, out_b)
    }

    /// Per-transition posterior parameters for a batch of encoded rows.
    pub fn encode(&self, encoded: &Tensor) -> Result<(Tensor, Tensor)> {
        if encoded.cols() != self.config.d_input() {
            return Err(Error::ShapeMismatch {
                op: "vae encode",
                axis: 1,
                expected: self.config.d_input(),
                got: encoded.cols(),
            });
        }
        let mut tape = Tape::new();
        let x = tape.input(encoded.clone());
        let (mu, lv) = self.encode_tape(&mut tape, x);
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Per-transition latent parameters as vectors, ready for pooling.
    pub fn encode_transitions(
        &self,
        transitions: &[Transition],
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        if transitions.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f32>> = transitions
            .iter()
            .map(|t| encode_transition(t, &self.config.encoding))
            .collect::<Result<_>>()?;
        let x = Tensor::from_rows(&rows);
        let (mu, lv) = self.encode(&x)?;
        Ok((0..transitions.len())
            .map(|i| (mu.row(i).to_vec(), lv.row(i).to_vec()))
            .collect())
    }

    /// Decoder reward statistic (logit under Bernoulli, mean under Gaussian)
    /// for each transition given a latent sample.
    pub fn decode_reward(&self, m: &[f32], transitions: &[Transition]) -> Result<Vec<f32>> {
        if m.len() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "vae decode",
                axis: 0,
                expected: self.config.latent_dim,
                got: m.len(),
            });
        }
        let sas = self.sas_rows(transitions)?;
        let mut tape = Tape::new();
        let m_leaf = tape.input(Tensor::new(vec![m.len()], m.to_vec()));
        let sas_leaf = tape.input(sas);
        let out = self.decode_tape(&mut tape, m_leaf, sas_leaf, transitions.len());
        Ok(tape.value(out).data.clone())
    }

    /// Encoded (s, a, s') rows: the transition vector with its reward removed.
    fn sas_rows(&self, transitions: &[Transition]) -> Result<Tensor> {
        let enc = &self.config.encoding;
        let (d_s, d_a) = (enc.d_s(), enc.d_a());
        let rows: Vec<Vec<f32>> = transitions
            .iter()
            .map(|t| {
                let full = encode_transition(t, enc)?;
                let mut v = Vec::with_capacity(full.len() - 1);
                v.extend_from_slice(&full[..d_s + d_a]);
                v.extend_from_slice(&full[d_s + d_a + 1..]);
                Ok(v)
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::from_rows(&rows))
    }

    /// Record-level training loss on the tape: reconstruction of every reward
    /// from one pooled latent sample, plus β-weighted KL.
    pub fn elbo_record_tape(
        &self,
        tape: &mut Tape,
        record: &PretrainExample,
        noise: Tensor,
    ) -> Result<Var> {
        let n = record.transitions.len();
        if n == 0 {
            return Err(Error::Config("record with empty context".into()));
        }
        let rows: Vec<Vec<f32>> = record
            .transitions
            .iter()
            .map(|t| encode_transition(t, &self.config.encoding))
            .collect::<Result<_>>()?;
        let x = tape.input(Tensor::from_rows(&rows));
        let (mu_rows, lv_rows) = self.encode_tape(tape, x);
        let mu = tape.mean_rows(mu_rows);
        let lv = tape.mean_rows(lv_rows);
        let m = tape.reparameterize(mu, lv, noise);

        let sas = self.sas_rows(&record.transitions)?;
        let sas_leaf = tape.input(sas);
        let out = self.decode_tape(tape, m, sas_leaf, n);
        let rewards = Tensor::new(
            vec![n, 1],
            record.transitions.iter().map(|t| t.reward).collect(),
        );
        let recon = match self.config.obs_model {
            ObsModel::Bernoulli => tape.bce_with_logits_sum(out, rewards),
            ObsModel::Gaussian => tape.mse_sum(out, rewards),
        };

        let kl = if self.config.recursive_prior {
            // chain each prefix posterior against the (detached) previous one
            let l = self.config.latent_dim;
            let mut prev_mu = Tensor::zeros(vec![l]);
            let mut prev_lv = Tensor::zeros(vec![l]);
            let mut terms = Vec::with_capacity(n);
            for j in 1..=n {
                let mu_pref_rows = tape.select_rows(mu_rows, 0, j);
                let lv_pref_rows = tape.select_rows(lv_rows, 0, j);
                let mu_j = tape.mean_rows(mu_pref_rows);
                let lv_j = tape.mean_rows(lv_pref_rows);
                let kl_j =
                    tape.gaussian_kl_detached_prior(mu_j, lv_j, prev_mu.clone(), prev_lv.clone());
                prev_mu = tape.value(mu_j).clone();
                prev_lv = tape.value(lv_j).clone();
                terms.push((kl_j, 1.0));
            }
            tape.weighted_sum(&terms)
        } else {
            tape.gaussian_kl(mu, lv)
        };

        Ok(tape.weighted_sum(&[(recon, 1.0), (kl, self.config.beta)]))
    }

    /// Mean loss over a batch; gradients accumulate into the store scaled by
    /// 1/batch, ready for one optimizer step.
    pub fn elbo_loss(&mut self, batch: &[&PretrainExample], rng: &mut impl Rng) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0f64;
        for record in batch {
            let noise = Tensor::randn(vec![self.config.latent_dim], 1.0, rng);
            let mut tape = Tape::new();
            let loss = self.elbo_record_tape(&mut tape, record, noise)?;
            tape.backward(loss);
            total += tape.scalar(loss) as f64;
            tape.accumulate_param_grads(&mut self.params, scale);
        }
        Ok((total / batch.len() as f64) as f32)
    }

    /// Validation loss: same objective, no gradient accumulation.
    pub fn eval_loss(&self, batch: &[&PretrainExample], rng: &mut impl Rng) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut total = 0.0f64;
        for record in batch {
            let noise = Tensor::randn(vec![self.config.latent_dim], 1.0, rng);
            let mut tape = Tape::new();
            let loss = self.elbo_record_tape(&mut tape, record, noise)?;
            total += tape.scalar(loss) as f64;
        }
        Ok((total / batch.len() as f64) as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let metas = vec![
            ("component".to_string(), "vae".to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config)
                    .map_err(|e| Error::Config(format!("config serialization: {e}")))?,
            ),
        ];
        write_checkpoint(&self.params, &metas, true, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, metas) = read_checkpoint(path)?;
        match metas.get("component").map(String::as_str) {
            Some("vae") => {}
            other => {
                return Err(Error::Format(format!(
                    "checkpoint is not a vae (component={other:?})"
                )))
            }
        }
        let config: VaeConfig = serde_json::from_str(
            metas
                .get("config")
                .ok_or_else(|| Error::Format("vae checkpoint missing config".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad vae config: {e}")))?;
        Ok(Self { config, params })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// Posterior belief for the first `prefix` transitions; the prior when empty.
/// Read-only: never touches parameters.
pub fn infer_belief(
    vae: &Vae,
    transitions: &[Transition],
    prefix: usize,
) -> Result<BeliefPosterior> {
    assert!(prefix <= transitions.len(), "prefix exceeds context length");
    if prefix == 0 {
        return Ok(BeliefPosterior::prior(vae.config.latent_dim));
    }
    let latents = vae.encode_transitions(&transitions[..prefix])?;
    Ok(pool_belief(&latents, prefix))
}

/// One row of the epoch-indexed loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f32,
}

/// Write a loss log as CSV (epoch, split, loss).
pub fn write_loss_csv(log: &[LossRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,split,loss")?;
    for row in log {
        let split = match row.split {
            Split::Train => "train",
            Split::Test => "val",
        };
        writeln!(w, "{},{},{}", row.epoch, split, row.loss)?;
    }
    Ok(())
}

/// Train the belief VAE on the corpus's training records with Adam,
/// validating on its held-out records each epoch. Deterministic per seed.
pub fn train_belief(
    corpus: &Corpus,
    config: VaeConfig,
    train_seed: u64,
) -> Result<(Vae, Vec<LossRow>)> {
    if corpus.manifest.encoding() != config.encoding {
        return Err(Error::Config(
            "corpus encoding does not match the vae config".into(),
        ));
    }
    let mut vae = Vae::new(config, train_seed)?;
    let optim = OptimizerConfig::adam(vae.config.learning_rate);
    let train_idx = corpus.split_indices(Split::Train);
    let val_idx = corpus.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::Config("corpus has no training records".into()));
    }

    let mut order = train_idx.clone();
    let mut log = Vec::new();
    for epoch in 0..vae.config.epochs {
        let mut rng = seed::rng(train_seed, "vae-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(vae.config.batch_size) {
            let batch: Vec<&PretrainExample> = chunk.iter().map(|&i| &corpus.records[i]).collect();
            let loss = vae.elbo_loss(&batch, &mut rng)?;
            optimizer_step(&mut vae.params, &optim)?;
            epoch_loss += loss as f64;
            batches += 1;
        }
        let train_loss = (epoch_loss / batches.max(1) as f64) as f32;
        log.push(LossRow {
            epoch,
            split: Split::Train,
            loss: train_loss,
        });
        if !val_idx.is_empty() {
            let mut vrng = seed::rng(train_seed, "vae-val", epoch as u64);
            let batch: Vec<&PretrainExample> =
                val_idx.iter().map(|&i| &corpus.records[i]).collect();
            let val_loss = vae.eval_loss(&batch, &mut vrng)?;
            log.push(LossRow {
                epoch,
                split: Split::Test,
                loss: val_loss,
            });
        }
    }
    Ok((vae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_darkroom_corpus, Scheme};
    use crate::env::{EnvSpec, GridPos, State, TaskFamily};
    use crate::nn::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoding() -> EncodingSpec {
        EncodingSpec {
            scheme: Scheme::Onehot,
            width: 3,
            height: 3,
            num_actions: 5,
        }
    }

    fn tiny_config() -> VaeConfig {
        let mut c = VaeConfig::new(tiny_encoding(), 4);
        c.hidden_sizes = [16, 8];
        c
    }

    fn sample_transitions(n: usize, seed: u64) -> Vec<Transition> {
        let task = crate::env::DarkroomTask::new(3, 3, GridPos::new(2, 2), 0.0, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::datagen::collect_random_rollout(&task, n, &mut rng).unwrap()
    }

    fn sample_record(n: usize, seed: u64) -> PretrainExample {
        let task = crate::env::DarkroomTask::new(3, 3, GridPos::new(2, 2), 0.0, n);
        PretrainExample {
            transitions: sample_transitions(n, seed),
            optimal_action: crate::env::darkroom_optimal_action(&task, GridPos::new(0, 0)),
            query_state: State::Cell(GridPos::new(0, 0)),
            task: crate::env::Task::Darkroom(task),
            split: Split::Train,
        }
    }

    #[test]
    fn encode_is_deterministic_with_contract_shapes() {
        let vae = Vae::new(tiny_config(), 0).unwrap();
        let ts = sample_transitions(6, 1);
        let a = vae.encode_transitions(&ts).unwrap();
        let b = vae.encode_transitions(&ts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].0.len(), 4);
        assert_eq!(a[0].1.len(), 4);
    }

    #[test]
    fn encode_rejects_bad_width() {
        let vae = Vae::new(tiny_config(), 0).unwrap();
        let x = Tensor::zeros(vec![2, 7]);
        assert!(vae.encode(&x).is_err());
    }

    #[test]
    fn pool_belief_prior_singleton_and_permutation() {
        let latents = vec![
            (vec![1.0, 2.0], vec![0.5, 0.0]),
            (vec![3.0, 0.0], vec![0.1, 0.2]),
            (vec![-1.0, 1.0], vec![0.0, -0.4]),
        ];
        let prior = pool_belief(&latents, 0);
        assert_eq!(prior.mu, vec![0.0, 0.0]);
        assert_eq!(prior.logvar, vec![0.0, 0.0]);

        let single = pool_belief(&latents, 1);
        assert_eq!(single.mu, vec![1.0, 2.0]);

        let full = pool_belief(&latents, 3);
        let mut permuted = latents.clone();
        permuted.swap(0, 2);
        let full_p = pool_belief(&permuted, 3);
        for (a, b) in full.mu.iter().zip(&full_p.mu) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn incremental_running_mean_matches_batch_pool() {
        let vae = Vae::new(tiny_config(), 3).unwrap();
        let ts = sample_transitions(12, 5);
        let latents = vae.encode_transitions(&ts).unwrap();
        let mut mu = vec![0.0f32; 4];
        for j in 1..=12 {
            // running-mean update with latent j
            for i in 0..4 {
                mu[i] += (latents[j - 1].0[i] - mu[i]) / j as f32;
            }
            let pooled = pool_belief(&latents, j);
            for i in 0..4 {
                assert!(
                    (mu[i] - pooled.mu[i]).abs() < 1e-5,
                    "prefix {j} coord {i}: {} vs {}",
                    mu[i],
                    pooled.mu[i]
                );
            }
        }
    }

    #[test]
    fn infer_belief_prior_on_empty_prefix() {
        let vae = Vae::new(tiny_config(), 0).unwrap();
        let ts = sample_transitions(4, 2);
        let b = infer_belief(&vae, &ts, 0).unwrap();
        assert_eq!(b, BeliefPosterior::prior(4));
    }

    #[test]
    fn decoder_output_finite_and_probability_in_unit_interval() {
        let vae = Vae::new(tiny_config(), 7).unwrap();
        let ts = sample_transitions(5, 3);
        let m = vec![0.3, -0.2, 0.1, 0.9];
        let out = vae.decode_reward(&m, &ts).unwrap();
        assert_eq!(out.len(), 5);
        for logit in out {
            assert!(logit.is_finite());
            let p = crate::nn::tensor::sigmoid(logit);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn encode_kl_gradcheck() {
        let vae = Vae::new(tiny_config(), 11).unwrap();
        let ts = sample_transitions(3, 4);
        let rows: Vec<Vec<f32>> = ts
            .iter()
            .map(|t| encode_transition(t, &vae.config.encoding).unwrap())
            .collect();
        let x = Tensor::from_rows(&rows);
        for probe in ["enc.fc1.w", "enc.mu.w", "enc.logvar.b"] {
            let report = gradcheck(&vae.params, probe, 1e-2, |s, tape| {
                let this = Vae {
                    config: vae.config.clone(),
                    params: s.clone(),
                };
                let xv = tape.leaf(x.clone());
                let (mu_rows, lv_rows) = this.encode_tape(tape, xv);
                let mu = tape.mean_rows(mu_rows);
                let lv = tape.mean_rows(lv_rows);
                Ok(tape.gaussian_kl(mu, lv))
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn elbo_micro_batch_gradcheck() {
        let vae = Vae::new(tiny_config(), 13).unwrap();
        let records: Vec<PretrainExample> = (0..3).map(|i| sample_record(3, 20 + i)).collect();
        let noises: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                Tensor::randn(vec![4], 1.0, &mut rng)
            })
            .collect();
        for probe in ["enc.fc2.w", "dec.fc1.w", "dec.out.b", "enc.logvar.w"] {
            let report = gradcheck(&vae.params, probe, 1e-2, |s, tape| {
                let this = Vae {
                    config: vae.config.clone(),
                    params: s.clone(),
                };
                let mut terms = Vec::new();
                for (rec, noise) in records.iter().zip(&noises) {
                    let l = this.elbo_record_tape(tape, rec, noise.clone())?;
                    terms.push((l, 1.0 / 3.0));
                }
                Ok(tape.weighted_sum(&terms))
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn recursive_prior_mode_trains_and_chains() {
        let mut cfg = tiny_config();
        cfg.recursive_prior = true;
        let vae = Vae::new(cfg, 17).unwrap();
        let rec = sample_record(5, 30);
        let mut tape = Tape::new();
        let noise = Tensor::zeros(vec![4]);
        let loss = vae.elbo_record_tape(&mut tape, &rec, noise).unwrap();
        assert!(tape.scalar(loss).is_finite());
        tape.backward(loss);
        let mut grads = vae.params.clone();
        grads.zero_grads();
        tape.accumulate_param_grads(&mut grads, 1.0);
        let g: f32 = grads.grad("enc.fc1.w").data.iter().map(|v| v.abs()).sum();
        assert!(g > 0.0, "no gradient reached the encoder");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut vae = Vae::new(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(vae.elbo_loss(&[], &mut rng).is_err());
    }

    #[test]
    fn single_record_overfit_reaches_reconstruction_floor() {
        let mut cfg = tiny_config();
        cfg.beta = 0.1;
        let mut vae = Vae::new(cfg, 23).unwrap();
        let rec = sample_record(8, 40);
        let optim = OptimizerConfig::adam(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..200 {
            vae.elbo_loss(&[&rec], &mut rng).unwrap();
            optimizer_step(&mut vae.params, &optim).unwrap();
        }
        // reconstruction with the posterior mean should be nearly perfect
        let belief = infer_belief(&vae, &rec.transitions, rec.transitions.len()).unwrap();
        let logits = vae.decode_reward(&belief.mu, &rec.transitions).unwrap();
        let mut bce = 0.0f64;
        for (logit, t) in logits.iter().zip(&rec.transitions) {
            let p = crate::nn::tensor::sigmoid(*logit) as f64;
            bce += -(if t.reward > 0.5 { p } else { 1.0 - p }).max(1e-9).ln();
        }
        bce /= logits.len() as f64;
        assert!(bce < 0.1, "mean reconstruction BCE {bce} after overfit");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let spec = EnvSpec {
            width: 3,
            height: 3,
            horizon: 8,
            ..EnvSpec::for_family(TaskFamily::Darkroom)
        };
        let corpus = make_darkroom_corpus(&spec, 18, 5).unwrap();
        let mut cfg = VaeConfig::new(corpus.manifest.encoding(), 4);
        cfg.hidden_sizes = [16, 8];
        cfg.epochs = 2;
        cfg.batch_size = 6;
        let (a, log_a) = train_belief(&corpus, cfg.clone(), 9).unwrap();
        let (b, log_b) = train_belief(&corpus, cfg, 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let vae = Vae::new(tiny_config(), 31).unwrap();
        let dir = std::env::temp_dir().join("icrl_vae_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vae.ckpt");
        vae.save(&path).unwrap();
        let loaded = Vae::load(&path).unwrap();
        assert_eq!(loaded.checksum(), vae.checksum());
        assert_eq!(loaded.config, vae.config);
    }
}
