//! Whole-model gradient verification.

use serde::Serialize;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::numerics::{check_parameters, failing_ops, OpKind, ParamCheckReport, ParamStore, RngState, Tensor};

/// Settings of the whole-model finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch: usize,
    pub step: f64,
    pub tol: f64,
    /// Weights are redrawn as `N(0, (weight_scale)² / fan_in)`.
    pub weight_scale: f64,
    /// Standard deviation of the target around the model's own prediction.
    pub residual: f64,
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 1,
            batch: 2,
            step: 1e-4,
            tol: 1e-4,
            weight_scale: 0.7,
            residual: 0.3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckOutcome {
    pub report: ParamCheckReport,
    pub parameters: usize,
    pub coordinates: usize,
    /// Operations whose isolated backward rule fails; filled only on failure.
    pub failing_ops: Vec<&'static str>,
}

impl GradcheckOutcome {
    pub fn pass(&self) -> bool {
        self.report.pass
    }
}

/// Redraws every parameter except the vocabulary table so that no gradient
/// vanishes structurally (the zero-initialized adapter output, for instance).
pub fn randomize_parameters(store: &mut ParamStore<f64>, weight_scale: f64, rng: &mut RngState) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.name.starts_with("vocabulary") {
            continue;
        }
        let shape = p.tensor.shape().to_vec();
        let offset = if p.name.ends_with(".gain") { 1.0 } else { 0.0 };
        let sd = if shape.len() >= 2 {
            weight_scale / (shape[0] as f64).sqrt()
        } else {
            0.1
        };
        for v in p.tensor.data_mut() {
            *v = offset + sd * rng.normal::<f64>();
        }
    }
}

/// Finite-difference check of the full forward pass and MSE loss with respect
/// to every parameter, frozen ones included, in double precision.
pub fn model_gradient_check(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = RngState::new(cfg.seed).derive("gradcheck");
    randomize_parameters(&mut model.store, cfg.weight_scale, &mut rng);
    let l = cfg.model.context_len;
    let context = Tensor::new(
        [cfg.batch, l],
        (0..cfg.batch * l).map(|_| rng.normal::<f64>()).collect(),
    )?;
    let base = model.predict(&context)?;
    let target = Tensor::new(
        base.shape().to_vec(),
        base.data()
            .iter()
            .map(|v| v + cfg.residual * rng.normal::<f64>())
            .collect(),
    )?;
    let noise = rng.derive("latent");
    let ids: Vec<_> = model.store.ids().collect();
    let report = check_parameters(&model.store, &ids, cfg.step, cfg.tol, |store, g| {
        if let Some(k) = cfg.fault {
            g.inject_fault(k);
        }
        let mut eps = noise.clone();
        let out = model.forward_with(store, g, &context, Some(&mut eps))?;
        let t = g.constant(target.clone())?;
        g.mse(out.output, t)
    })?;
    let failing = if report.pass {
        Vec::new()
    } else {
        failing_ops::<f64>(cfg.fault, cfg.seed)?
            .into_iter()
            .map(OpKind::name)
            .collect()
    };
    Ok(GradcheckOutcome {
        parameters: ids.len(),
        coordinates: ids.iter().map(|&id| model.store.tensor(id).len()).sum(),
        report,
        failing_ops: failing,
    })
}
