//! Optimization of the trainable parameter set.

use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Window, WindowBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, ParamId, RngState, Tensor, Var};
use crate::scalar::Scalar;
use crate::tscc::kl_divergence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub kl_weight: f64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Capacity of the batch queue between the producer and the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            clip_norm: 1.0,
            seed: 0,
            kl_weight: 0.0,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "train.learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "train.clip_norm = {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.queue_depth == 0 {
            return Err(Error::Config(
                "train.batch_size, train.max_epochs and train.queue_depth must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adaptive-moment coefficients out of range".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("train.kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// MSE between forecast and target, plus `kl_weight·KL(N(μ,σ²)‖N(0,I))`
/// when latent statistics are supplied.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    output: Var,
    target: Var,
    latent: Option<(Var, Var)>,
    kl_weight: f64,
) -> Result<Var> {
    let mse = g.mse(output, target)?;
    match latent {
        Some((mu, logvar)) if kl_weight != 0.0 => {
            let kl = kl_divergence(g, mu, logvar)?;
            let kl = g.scale(kl, T::lit(kl_weight))?;
            g.add(mse, kl)
        }
        _ => Ok(mse),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch training losses.
    pub train_loss: f64,
    /// Deterministic validation loss.
    pub val_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterCounts {
    pub trainable_tensors: usize,
    pub frozen_tensors: usize,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Deterministic training loss before the first step.
    pub initial_train_loss: f64,
    /// Deterministic training loss of the retained parameters.
    pub final_train_loss: f64,
    pub steps: usize,
    pub counts: ParameterCounts,
    /// Digest of every mini-batch in the order it was consumed.
    pub batch_digests: Vec<String>,
    pub frozen_digest: String,
    pub trainable_digest_before: String,
    pub trainable_digest_after: String,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// SHA-256 over everything except wall-clock time.
    pub fn fingerprint(&self) -> String {
        let mut copy = self.clone();
        copy.wall_clock_secs = 0.0;
        let text = serde_json::to_string(&copy).expect("report serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        crate::numerics::hex(&h.finalize())
    }

    /// SHA-256 over the ordered batch digests.
    pub fn batch_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.batch_digests {
            h.update(d.as_bytes());
        }
        crate::numerics::hex(&h.finalize())
    }
}

/// Deterministic mean loss over `windows`, weighting each window equally.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, windows: &[Window<T>], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window<T>> = chunk.iter().collect();
        let batch = WindowBatch::from_windows(&refs)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.context, None)?;
        let target = g.constant(batch.target.clone())?;
        let l = g.mse(out.output, target)?;
        total += g.value(l).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

struct Adam<T> {
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(model: &Model<T>) -> Self {
        let ids = model.store.trainable_ids();
        let zeros: Vec<Tensor<T>> = ids
            .iter()
            .map(|&id| Tensor::zeros(model.store.tensor(id).shape().to_vec()))
            .collect();
        Self {
            ids,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<T>, cfg: &TrainConfig) {
        let norm = self
            .ids
            .iter()
            .flat_map(|&id| model.store.get(id).grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = model.store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, g)) in p.tensor.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.as_f64() * clip;
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
    }
}

fn counts<T: Scalar>(model: &Model<T>) -> ParameterCounts {
    let (trainable_scalars, frozen_scalars) = model.store.counts();
    ParameterCounts {
        trainable_tensors: model.store.trainable_ids().len(),
        frozen_tensors: model.store.frozen_ids().len(),
        trainable_scalars,
        frozen_scalars,
    }
}

fn batch_order(n: usize, batch: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Trains `model` in place. The best-validation parameters are retained;
/// on divergence the last good parameters are restored and an error returned.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &[Window<T>],
    val: &[Window<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty streams ({} train, {} validation windows)",
            train.len(),
            val.len()
        )));
    }
    model.partition()?;
    let started = Instant::now();
    let frozen = model.store.frozen_ids();
    let trainable = model.store.trainable_ids();
    let frozen_digest = model.store.digest(&frozen);
    let trainable_digest_before = model.store.digest(&trainable);
    let root = RngState::new(cfg.seed);
    let mut order_rng = root.derive("batch-order");
    let mut noise_rng = root.derive("latent-noise");
    let mut adam = Adam::new(model);
    let initial_train_loss = evaluate_loss(model, train, cfg.batch_size)?;

    let mut epochs = Vec::new();
    let mut batch_digests = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut since_best = 0;
    let mut steps = 0;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = batch_order(train.len(), cfg.batch_size, &mut order_rng);
        let mut losses = Vec::with_capacity(order.len());
        let outcome: Result<bool> = std::thread::scope(|scope| {
            let (tx, rx) = sync_channel::<Result<WindowBatch<T>>>(cfg.queue_depth);
            scope.spawn(move || {
                for ids in order {
                    let refs: Vec<&Window<T>> = ids.iter().map(|&i| &train[i]).collect();
                    if tx.send(WindowBatch::from_windows(&refs)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                batch_digests.push(batch.digest());
                model.store.zero_grad();
                let mut g = Graph::new();
                let step_loss = (|| -> Result<(f64, Var)> {
                    let out = model.forward(&mut g, &batch.context, Some(&mut noise_rng))?;
                    let target = g.constant(batch.target.clone())?;
                    let latent = out.tscc.decomposition.map(|d| (d.mu, d.logvar));
                    let l = loss(&mut g, out.output, target, latent, cfg.kl_weight)?;
                    Ok((g.value(l).data()[0].as_f64(), l))
                })();
                let (value, l) = match step_loss {
                    Ok(v) if v.0.is_finite() => v,
                    Ok(_) | Err(Error::NonFinite { .. }) => {
                        return Err(Error::Divergence { epoch, step: steps });
                    }
                    Err(e) => return Err(e),
                };
                let grads = g.backward(l)?;
                grads.accumulate_into(&mut model.store)?;
                adam.step(model, cfg);
                steps += 1;
                losses.push(value);
                if cfg.max_steps.is_some_and(|m| steps >= m) {
                    return Ok(true);
                }
            }
            Ok(false)
        });
        let stop = match outcome {
            Ok(stop) => stop,
            Err(e @ Error::Divergence { .. }) => {
                model.store.load_values(&best.2)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if model.store.digest(&frozen) != frozen_digest {
            return Err(Error::Parameter("a frozen parameter changed during training".into()));
        }
        let val_loss = match evaluate_loss(model, val, cfg.batch_size) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                model.store.load_values(&best.2)?;
                return Err(Error::Divergence { epoch, step: steps });
            }
            Err(e) => return Err(e),
        };
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            steps: losses.len(),
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if stop || since_best >= cfg.patience {
            break 'epochs;
        }
    }
    model.store.load_values(&best.2)?;
    model.set_trained(true);
    let final_train_loss = evaluate_loss(model, train, cfg.batch_size)?;
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        best_val_loss: best.0,
        initial_train_loss,
        final_train_loss,
        steps,
        counts: counts(model),
        batch_digests,
        frozen_digest,
        trainable_digest_before,
        trainable_digest_after: model.store.digest(&trainable),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
