//! Central finite-difference verification of hand-written gradients.
//!
//! Runs at 64-bit precision only: at 32 bits the difference quotient is
//! dominated by rounding for any useful step size.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{bce_loss, squared_error, LossResult};
use crate::error::{Error, Result};
use crate::layers::TrainMode;
use crate::model::SequentialModel;
use crate::tensor::Tensor;

/// Scalar objective the gradients are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Binary cross entropy; outputs must be probabilities, targets one-hot.
    BinaryCrossEntropy,
    /// `0.5 * sum((y - t)^2)`; works for any output shape.
    SquaredError,
}

impl Objective {
    fn eval(self, y: &Tensor<f64>, targets: &Tensor<f64>) -> Result<LossResult<f64>> {
        match self {
            Objective::BinaryCrossEntropy => bce_loss(y, targets),
            Objective::SquaredError => squared_error(y, targets),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Step for a coordinate `v` is `epsilon * max(1, |v|)`, so unit-scale
    /// parameters move by exactly `epsilon` while raw pixel inputs move by a
    /// step proportional to their magnitude.
    pub epsilon: f64,
    /// At most this many entries of each tensor are compared, chosen at random.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
    /// Mode the model runs in. In training mode the dropout mask is held
    /// fixed across every evaluation.
    pub mode: TrainMode,
    pub check_input: bool,
    /// Discard entries whose `±epsilon` evaluations switch a ReLU sign or a
    /// pooling winner, and draw another entry instead. Across such a switch
    /// the loss is not differentiable and the difference quotient measures
    /// the jump rather than the gradient.
    pub skip_branch_changes: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            max_entries_per_tensor: 25,
            seed: 0,
            mode: TrainMode::Training,
            check_input: true,
            skip_branch_changes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    /// Layer name, or `input` for the gradient w.r.t. the model input.
    pub layer: String,
    /// `W`, `b` or `input`.
    pub tensor: String,
    pub checked: usize,
    /// Entries discarded because the perturbation changed branch.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

struct Probe<'a> {
    model: &'a mut SequentialModel<f64>,
    targets: &'a Tensor<f64>,
    objective: Objective,
    rng: ChaCha8Rng,
    base_signature: u64,
    skip_branch_changes: bool,
}

impl Probe<'_> {
    /// Loss at `x`, or `None` when the pass left the reference branch.
    fn loss(&mut self, x: &Tensor<f64>) -> Result<Option<f64>> {
        self.model.set_dropout_rng(self.rng.clone());
        let y = self.model.forward(x)?;
        let value = self.objective.eval(&y, self.targets)?.value;
        if !value.is_finite() {
            return Err(Error::Numeric("loss is not finite during gradient check".into()));
        }
        if self.skip_branch_changes && self.model.branch_signature() != self.base_signature {
            return Ok(None);
        }
        Ok(Some(value))
    }

    /// Central difference of the loss along one coordinate; `set(probe, delta)`
    /// moves that coordinate to its original value plus `delta`.
    fn central_difference(
        &mut self,
        x: &Tensor<f64>,
        h: f64,
        set: &mut dyn FnMut(&mut Self, f64),
    ) -> Result<Option<f64>> {
        set(self, h);
        let plus = self.loss(x);
        set(self, -h);
        let minus = self.loss(x);
        set(self, 0.0);
        Ok(match (plus?, minus?) {
            (Some(p), Some(m)) => Some((p - m) / (2.0 * h)),
            _ => None,
        })
    }
}

fn step(eps: f64, v: f64) -> f64 {
    eps * v.abs().max(1.0)
}

/// Compares entries in a seeded random order until `max` have been checked
/// or the tensor is exhausted.
fn compare(
    probe: &mut Probe<'_>,
    analytic: &[f64],
    max: usize,
    pick_rng: &mut ChaCha8Rng,
    numeric_at: &mut dyn FnMut(&mut Probe<'_>, usize) -> Result<Option<f64>>,
) -> Result<(usize, usize, f64)> {
    let order = sample(pick_rng, analytic.len(), analytic.len());
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for k in order.iter() {
        if checked == max {
            break;
        }
        match numeric_at(probe, k)? {
            Some(numeric) => {
                checked += 1;
                worst = worst.max(relative_error(analytic[k], numeric));
            }
            None => skipped += 1,
        }
    }
    Ok((checked, skipped, worst))
}

/// Compares backpropagated gradients with `(L(θ+ε) - L(θ-ε)) / 2ε` for a
/// sample of every parameter tensor (and optionally the input).
///
/// The model's parameters are restored before returning.
pub fn finite_difference_check(
    model: &mut SequentialModel<f64>,
    input: &Tensor<f64>,
    targets: &Tensor<f64>,
    objective: Objective,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let eps = cfg.epsilon;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Numeric(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let saved_mode = model.mode();
    model.set_mode(cfg.mode);
    let rng_state = model.dropout_rng_state().clone();
    let result = run(model, input, targets, objective, cfg, rng_state.clone());
    model.set_mode(saved_mode);
    model.set_dropout_rng(rng_state);
    result
}

fn run(
    model: &mut SequentialModel<f64>,
    input: &Tensor<f64>,
    targets: &Tensor<f64>,
    objective: Objective,
    cfg: &GradCheckConfig,
    rng_state: ChaCha8Rng,
) -> Result<GradCheckReport> {
    let eps = cfg.epsilon;
    let names = model.layer_names().to_vec();

    // analytic pass
    model.zero_grad();
    model.set_dropout_rng(rng_state.clone());
    let y = model.forward(input)?;
    let loss = objective.eval(&y, targets)?;
    if !loss.value.is_finite() {
        return Err(Error::Numeric("loss is not finite during gradient check".into()));
    }
    let base_signature = model.branch_signature();
    let input_grad = model.backward(&loss.grad)?;
    let analytic: Vec<Vec<(&'static str, Vec<f64>)>> = model
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| (p.name, p.grad.data().to_vec())).collect())
        .collect();

    let mut probe = Probe {
        model,
        targets,
        objective,
        rng: rng_state,
        base_signature,
        skip_branch_changes: cfg.skip_branch_changes,
    };
    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();

    for (li, layer_grads) in analytic.iter().enumerate() {
        for (pi, (pname, grads)) in layer_grads.iter().enumerate() {
            let (checked, skipped, worst) = compare(
                &mut probe,
                grads,
                cfg.max_entries_per_tensor,
                &mut pick_rng,
                &mut |probe, k| {
                    let original = probe.model.layers()[li].params()[pi].value.data()[k];
                    probe.central_difference(input, step(eps, original), &mut |p, delta| {
                        p.model.layers_mut()[li].params_mut()[pi].value.data_mut()[k] = original + delta;
                    })
                },
            )?;
            report.entries.push(GradCheckEntry {
                layer: names[li].clone(),
                tensor: pname.to_string(),
                checked,
                skipped,
                max_rel_error: worst,
            });
        }
    }

    if cfg.check_input {
        let mut x = input.clone();
        let (checked, skipped, worst) = compare(
            &mut probe,
            input_grad.data(),
            cfg.max_entries_per_tensor,
            &mut pick_rng,
            &mut |probe, k| {
                let original = x.data()[k];
                let h = step(eps, original);
                x.data_mut()[k] = original + h;
                let plus = probe.loss(&x);
                x.data_mut()[k] = original - h;
                let minus = probe.loss(&x);
                x.data_mut()[k] = original;
                Ok(match (plus?, minus?) {
                    (Some(p), Some(m)) => Some((p - m) / (2.0 * h)),
                    _ => None,
                })
            },
        )?;
        report.entries.push(GradCheckEntry {
            layer: "input".into(),
            tensor: "input".into(),
            checked,
            skipped,
            max_rel_error: worst,
        });
    }
    Ok(report)
}
