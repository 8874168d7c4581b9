use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{accuracy, Adam, EarlyStop, EpochRecord, TrainConfig};
use crate::diffmath::{dropout_mask, CsrMatrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graphcore::{GraphDataset, LabelSplit};
use crate::s2net::Prediction;

/// Stacked graph convolutions `H ← Â·H·W + b`, ReLU and dropout between
/// layers, softmax on the last.
#[derive(Clone, Debug)]
pub struct GcnModel {
    pub store: ParamStore,
    /// `(W, b)` per layer, input side first.
    pub layers: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct GcnOutcome {
    pub model: GcnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl GcnModel {
    pub fn init(input: usize, hidden: usize, classes: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 || hidden == 0 {
            return Err(Error::Config("the baseline needs depth and hidden width of at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = (0..depth)
            .map(|l| {
                let d_in = if l == 0 { input } else { hidden };
                let d_out = if l + 1 == depth { classes } else { hidden };
                let w = store.add_glorot(format!("gcn.{l}.w"), d_in, d_out, &mut rng);
                let b = store.add_zeros(format!("gcn.{l}.b"), &[d_out]);
                (w, b)
            })
            .collect();
        Ok(Self { store, layers })
    }

    fn logits(&self, tape: &mut Tape, ahat: &Arc<CsrMatrix>, x: Var, mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tape.relu(h);
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let mask = dropout_mask(tape.value(h).len(), *rate, *rng);
                        h = tape.mask_mul(h, mask)?;
                    }
                }
            }
            let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
            let hw = tape.matmul(h, w)?;
            let agg = tape.spmm(Arc::clone(ahat), hw)?;
            h = tape.add_row(agg, b)?;
        }
        Ok(h)
    }
}

/// Class probabilities in evaluation mode.
pub fn gcn_predict(g: &GraphDataset, model: &GcnModel) -> Result<Prediction> {
    let mut tape = Tape::new();
    let ahat = Arc::new(g.normalized_adjacency());
    let x = tape.constant(g.features().clone());
    let logits = model.logits(&mut tape, &ahat, x, None)?;
    let p = tape.softmax_rows(logits)?;
    Ok(Prediction {
        probs: tape.value(p).clone(),
    })
}

pub fn gcn_evaluate(g: &GraphDataset, nodes: &[usize], model: &GcnModel) -> Result<f64> {
    accuracy(&gcn_predict(g, model)?, g, nodes)
}

/// Trains the baseline, `cfg.depth` layers deep, with the same optimizer, schedule and stopping rule
/// as the main model. Only the classification loss applies.
pub fn gcn_train(g: &GraphDataset, split: &LabelSplit, cfg: &TrainConfig) -> Result<GcnOutcome> {
    cfg.validate()?;
    let targets: Vec<(usize, usize)> = split.train.iter().filter_map(|&i| g.label(i).map(|y| (i, y))).collect();
    if targets.is_empty() {
        return Err(Error::Config("the training split has no labeled node".into()));
    }
    if split.val.is_empty() {
        return Err(Error::Config("early stopping needs a non-empty validation split".into()));
    }
    let targets = Arc::new(targets);
    let ahat = Arc::new(g.normalized_adjacency());
    let mut model = GcnModel::init(g.feature_dim(), cfg.hidden, g.num_classes(), cfg.depth, cfg.seed)?;
    let mut opt = Adam::new(&model.store, cfg.weight_decay, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best = model.store.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let x = tape.constant(g.features().clone());
        let logits = model.logits(&mut tape, &ahat, x, Some((cfg.dropout, &mut rng)))?;
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.pick(logp, Arc::clone(&targets))?;
        let mean = tape.mean(picked);
        let loss = tape.scale(mean, -1.0);
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("baseline loss {value}"),
            });
        }
        model.store.zero_grads();
        tape.backward_into(loss, &mut model.store)?;
        opt.step(&mut model.store, cfg.lr_at(epoch));
        let val_acc = gcn_evaluate(g, &split.val, &model)?;
        history.push(EpochRecord {
            epoch,
            cls_loss: value,
            sparse_loss: 0.0,
            struct_loss: 0.0,
            total_loss: value,
            val_acc,
        });
        if stop.observe(epoch, val_acc) {
            best.clone_from(&model.store);
        } else if stop.should_stop() {
            break;
        }
    }
    model.store = best;
    model.store.zero_grads();
    Ok(GcnOutcome {
        model,
        history,
        best_epoch: stop.best_epoch,
        best_val: stop.best,
    })
}
