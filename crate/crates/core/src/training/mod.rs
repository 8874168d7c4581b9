//! Joint optimization of the structural posterior and the S² network.

mod checkpoint;
mod gcn;
mod optim;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{CsrMatrix, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphcore::{GraphDataset, LabelSplit};
use crate::posterior::{
    draw_gumbel, edge_logits, edge_posterior, encode, encoder_input, harden, kl_term, prior_table, recon_term,
    relaxed_sample, EdgeEnds, EdgePosterior, PosteriorDims, PosteriorParams, SignedPrior,
};
use crate::s2net::{forward, predict_mc, EdgeWeights, NetworkConfig, NetworkParams, Prediction, SlotIndex};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gcn::{gcn_evaluate, gcn_predict, gcn_train, GcnModel, GcnOutcome};
pub use optim::Adam;

/// Lower clamp on predictive probabilities inside the classification log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Every training hyperparameter. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub depth: usize,
    pub hidden: usize,
    pub k_train: usize,
    pub k_eval: usize,
    pub lambda: f64,
    pub lambda_sp: f64,
    pub lambda_st: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_period: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub gamma: f64,
    pub coder_steps: usize,
    pub self_term: bool,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay: f64,
    pub eps: f64,
    pub prior: SignedPrior,
    pub label_prior: Option<f64>,
    pub posterior_hidden: usize,
    pub posterior_embed: usize,
    pub decoder_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            k_train: 5,
            k_eval: 8,
            lambda: 0.1,
            lambda_sp: 0.01,
            lambda_st: 0.1,
            lr: 0.01,
            lr_decay: 0.5,
            lr_decay_period: 200,
            weight_decay: 5e-4,
            grad_clip: Some(5.0),
            max_epochs: 500,
            patience: 100,
            dropout: 0.5,
            seed: 0,
            gamma: 1.0,
            coder_steps: 3,
            self_term: true,
            tau_start: 1.0,
            tau_end: 0.1,
            tau_decay: 0.99,
            eps: 0.05,
            prior: SignedPrior::uniform(),
            label_prior: None,
            posterior_hidden: 64,
            posterior_embed: 32,
            decoder_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.k_train == 0 || self.k_eval == 0 {
            return bad("k_train/k_eval", "need at least one sample");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if !(self.lambda_sp >= 0.0) || !(self.lambda_st >= 0.0) {
            return bad("lambda_sp/lambda_st", "must be non-negative");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr/weight_decay", "must be non-negative");
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_period == 0 {
            return bad("lr_decay", "factor must be positive and period at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", "must be positive");
            }
        }
        if !(self.tau_end > 0.0) || !(self.tau_start >= self.tau_end) || !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return bad("tau", "need tau_start ≥ tau_end > 0 and decay in (0, 1]");
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad("eps", "flip rate must lie in (0, 0.5)");
        }
        if let Some(c) = self.label_prior {
            if !(c > 0.0 && c < 1.0) {
                return bad("label_prior", "confidence must lie in (0, 1)");
            }
        }
        if self.posterior_hidden == 0 || self.posterior_embed == 0 || self.decoder_hidden == 0 {
            return bad("posterior widths", "must be at least 1");
        }
        self.prior.validate().map_err(|e| Error::Config(format!("prior: {e}")))?;
        self.network().validate()
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            depth: self.depth,
            hidden: self.hidden,
            gamma: self.gamma,
            lambda: self.lambda,
            steps: self.coder_steps,
            self_term: self.self_term,
            dropout: self.dropout,
        }
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        (self.tau_start * self.tau_decay.powi(epoch as i32)).max(self.tau_end)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_period) as i32)
    }
}

/// Posterior and network parameters sharing one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub net: NetworkParams,
    pub post: PosteriorParams,
}

impl Model {
    pub fn init(g: &GraphDataset, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = PosteriorDims {
            input: g.feature_dim() + g.num_classes(),
            hidden: cfg.posterior_hidden,
            embed: cfg.posterior_embed,
            dec_hidden: cfg.decoder_hidden,
        };
        let post = PosteriorParams::init(&mut store, dims, &mut rng);
        let net = NetworkParams::init(&mut store, g.feature_dim(), g.num_classes(), &cfg.network(), &mut rng)?;
        Ok(Self { store, net, post })
    }

    pub fn posterior(&self, g: &GraphDataset, train: &[usize]) -> Result<EdgePosterior> {
        edge_posterior(g, train, &self.store, &self.post)
    }

    pub fn predict(&self, g: &GraphDataset, train: &[usize], k: usize, seed: u64) -> Result<Prediction> {
        predict_mc(g, &self.posterior(g, train)?, &self.store, &self.net, k, seed)
    }
}

/// Precomputed graph-side inputs of the loss.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub slots: SlotIndex,
    pub ends: EdgeEnds,
    pub ahat: Arc<CsrMatrix>,
    pub enc_input: Tensor,
    pub log_prior: Tensor,
    pub targets: Arc<Vec<(usize, usize)>>,
    pub features: Tensor,
    pub n: usize,
}

impl LossContext {
    pub fn new(g: &GraphDataset, train: &[usize], cfg: &TrainConfig) -> Result<Self> {
        let targets: Vec<(usize, usize)> = train.iter().filter_map(|&i| g.label(i).map(|y| (i, y))).collect();
        if targets.is_empty() {
            return Err(Error::Config("the training split has no labeled node".into()));
        }
        Ok(Self {
            slots: SlotIndex::new(g),
            ends: EdgeEnds::new(g),
            ahat: Arc::new(g.normalized_adjacency()),
            enc_input: encoder_input(g, train),
            log_prior: prior_table(g, train, &cfg.prior, cfg.label_prior)?,
            targets: Arc::new(targets),
            features: g.features().clone(),
            n: g.n(),
        })
    }
}

/// How sampled edge states enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Hard argmax forward, relaxed gradient backward.
    StraightThrough,
    /// The relaxed simplex itself.
    Soft,
}

/// Recorded loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub sparse: Var,
    pub structural: Var,
    pub total: Var,
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub sparse: f64,
    pub structural: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            cls: tape.item(self.cls),
            sparse: tape.item(self.sparse),
            structural: tape.item(self.structural),
            total: tape.item(self.total),
        }
    }
}

/// Records the full objective with one Gumbel table per Monte-Carlo sample.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    tape: &mut Tape,
    ctx: &LossContext,
    model: &Model,
    cfg: &TrainConfig,
    noise: &[Tensor],
    tau: f64,
    mode: SampleMode,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossVars> {
    if noise.is_empty() {
        return Err(Error::Parameter("need at least one noise table".into()));
    }
    let store = &model.store;
    let input = tape.constant(ctx.enc_input.clone());
    let h = encode(tape, store, &model.post, &ctx.ahat, input)?;
    let logits = edge_logits(tape, store, &model.post, h, &ctx.ends)?;
    let log_pi = tape.log_softmax_rows(logits)?;
    let pi = tape.softmax_rows(logits)?;
    let x = tape.constant(ctx.features.clone());

    let k = noise.len();
    let mut prob_sum: Option<Var> = None;
    let mut l1_sum: Option<Var> = None;
    for table in noise {
        let soft = relaxed_sample(tape, log_pi, table, tau)?;
        let sample = match mode {
            SampleMode::StraightThrough => {
                let (_, onehot) = harden(tape.value(soft));
                tape.straight_through(soft, onehot)?
            }
            SampleMode::Soft => soft,
        };
        let w = EdgeWeights::from_sample(tape, sample)?;
        let out = forward(tape, store, &model.net, x, &ctx.slots, &w, dropout.as_deref_mut())?;
        prob_sum = Some(match prob_sum {
            Some(s) => tape.add(s, out.probs)?,
            None => out.probs,
        });
        for a in out.alphas {
            let abs = tape.abs(a);
            let s = tape.sum(abs);
            l1_sum = Some(match l1_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let mean = tape.scale(prob_sum.expect("k ≥ 1"), 1.0 / k as f64);
    let picked = tape.pick(mean, Arc::clone(&ctx.targets))?;
    let logp = tape.clamp_log(picked, PROB_FLOOR);
    let cls = tape.mean(logp);
    let cls = tape.scale(cls, -1.0);
    let sparse = tape.scale(l1_sum.expect("depth ≥ 1"), 1.0 / (ctx.n * k) as f64);
    let kl = kl_term(tape, pi, log_pi, &ctx.log_prior)?;
    let recon = recon_term(tape, pi, cfg.eps)?;
    let structural = tape.sub(kl, recon)?;
    let wsp = tape.scale(sparse, cfg.lambda_sp);
    let wst = tape.scale(structural, cfg.lambda_st);
    let total = tape.add(cls, wsp)?;
    let total = tape.add(total, wst)?;
    Ok(LossVars {
        cls,
        sparse,
        structural,
        total,
    })
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls_loss: f64,
    pub sparse_loss: f64,
    pub struct_loss: f64,
    pub total_loss: f64,
    pub val_acc: f64,
}

/// Best parameters seen plus the full history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Fraction of `nodes` whose argmax prediction equals their label.
pub fn accuracy(pred: &Prediction, g: &GraphDataset, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Parameter("accuracy over an empty node set".into()));
    }
    let mut hits = 0usize;
    for &i in nodes {
        let y = g
            .label(i)
            .ok_or_else(|| Error::Parameter(format!("node {i} has no label to evaluate against")))?;
        hits += usize::from(pred.argmax(i) == y);
    }
    Ok(hits as f64 / nodes.len() as f64)
}

/// Accuracy of the Monte-Carlo predictive on `nodes`.
pub fn evaluate(g: &GraphDataset, train: &[usize], nodes: &[usize], model: &Model, k: usize, seed: u64) -> Result<f64> {
    accuracy(&model.predict(g, train, k, seed)?, g, nodes)
}

/// Seed of the fixed validation stream, distinct from the training stream.
pub(crate) fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Tracks the best validation score and decides when to stop.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStop {
    pub best: f64,
    pub best_epoch: usize,
    patience: usize,
    waited: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            patience,
            waited: 0,
        }
    }

    /// Returns whether `score` is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.waited = 0;
            true
        } else {
            self.waited += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }
}

/// Full training run: `K` relaxed samples per epoch, one optimizer step on
/// all parameters, validation-based early stopping.
pub fn train(g: &GraphDataset, split: &LabelSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.val.is_empty() {
        return Err(Error::Config("early stopping needs a non-empty validation split".into()));
    }
    let ctx = LossContext::new(g, &split.train, cfg)?;
    let mut model = Model::init(g, cfg, cfg.seed)?;
    let mut opt = Adam::new(&model.store, cfg.weight_decay, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best = model.store.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let tau = cfg.tau_at(epoch);
        let noise: Vec<Tensor> = (0..cfg.k_train).map(|_| draw_gumbel(g.num_edges(), &mut rng)).collect();
        let mut tape = Tape::new();
        let loss = loss_total(&mut tape, &ctx, &model, cfg, &noise, tau, SampleMode::StraightThrough, Some(&mut rng))?;
        let parts = loss.values(&tape);
        if !parts.total.is_finite() {
            let origin = tape.first_non_finite().map_or("unknown".to_string(), |(i, op)| format!("node {i} ({op})"));
            log::error!("epoch {epoch}: loss parts {parts:?}; first non-finite value at {origin}");
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss parts {parts:?}, first non-finite value at {origin}"),
            });
        }
        model.store.zero_grads();
        tape.backward_into(loss.total, &mut model.store)?;
        opt.step(&mut model.store, cfg.lr_at(epoch));
        let val_acc = evaluate(g, &split.train, &split.val, &model, cfg.k_eval, eval_seed(cfg.seed))?;
        history.push(EpochRecord {
            epoch,
            cls_loss: parts.cls,
            sparse_loss: parts.sparse,
            struct_loss: parts.structural,
            total_loss: parts.total,
            val_acc,
        });
        log::debug!("epoch {epoch}: total {:.5} val {:.4}", parts.total, val_acc);
        if stop.observe(epoch, val_acc) {
            best.clone_from(&model.store);
        } else if stop.should_stop() {
            break;
        }
    }
    model.store = best;
    model.store.zero_grads();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stop.best_epoch,
        best_val: stop.best,
    })
}
