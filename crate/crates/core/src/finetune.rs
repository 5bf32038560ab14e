//! Toy distillation: fit an SLA layer to a dense softmax teacher.
//!
//! The layer maps inputs `X` (`N x d_model`) to `Q = X Wq`, `K = X Wk`,
//! `V = X Wv` and returns `O_s + O_l W`. The teacher is dense attention on
//! the initial projections, and `W` starts at zero, so training only has to
//! close the gap left by dropping and linearizing blocks. The loss is
//! `½‖O - T‖²` averaged over the inputs, minimized by plain gradient
//! descent. Training runs in f64.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::sla_backward_with_projection;
use crate::config::SlaConfig;
use crate::error::{Result, SlaError};
use crate::forward::{combine_outputs, sla_forward, sla_forward_with_mask, OutputProjection, SlaForwardState};
use crate::layout::{make_block_layout, BlockLayout};
use crate::mask::CompressedMask;
use crate::oracle::dense_attention_forward;
use crate::rng::{derive_seed, gaussian_tensor, SplitMix64};
use crate::tensor::Tensor;

/// Loss above this multiple of the initial loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Learning-rate halvings allowed in frozen-mask mode.
pub const MAX_HALVINGS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub n: usize,
    pub d: usize,
    pub d_model: usize,
    pub block: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of synthetic input sequences.
    pub batch: usize,
    /// Std of the input entries; projections start at `1/√d_model`.
    pub input_std: f64,
    /// Keep each input's step-0 mask for the whole run.
    pub freeze_mask: bool,
    pub sla: SlaConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            n: 128,
            d: 16,
            d_model: 32,
            block: 16,
            steps: 200,
            lr: 0.01,
            seed: 0,
            batch: 4,
            input_std: 1.0,
            freeze_mask: false,
            sla: SlaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    pub wq: Tensor<f64>,
    pub wk: Tensor<f64>,
    pub wv: Tensor<f64>,
    pub w: Tensor<f64>,
}

impl ToyParams {
    fn tensors(&self) -> [&Tensor<f64>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.w]
    }

    fn axpy(&self, alpha: f64, dir: &ToyParams) -> Result<ToyParams> {
        let step = |p: &Tensor<f64>, g: &Tensor<f64>| p.add(&g.scale(alpha));
        Ok(ToyParams {
            wq: step(&self.wq, &dir.wq)?,
            wk: step(&self.wk, &dir.wk)?,
            wv: step(&self.wv, &dir.wv)?,
            w: step(&self.w, &dir.w)?,
        })
    }

    fn dot(&self, other: &ToyParams) -> Result<f64> {
        let mut acc = 0.0;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }
}

#[derive(Clone, Debug)]
pub struct ToyLayer {
    pub params: ToyParams,
    pub layout: BlockLayout,
    pub cfg: SlaConfig,
}

impl ToyLayer {
    pub fn new(cfg: &FinetuneConfig) -> Result<ToyLayer> {
        cfg.sla.validate()?;
        let layout = make_block_layout(cfg.n, cfg.d, cfg.block, cfg.block)?;
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, 1));
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        Ok(ToyLayer {
            params: ToyParams {
                wq: gaussian_tensor(&mut rng, cfg.d_model, cfg.d, std),
                wk: gaussian_tensor(&mut rng, cfg.d_model, cfg.d, std),
                wv: gaussian_tensor(&mut rng, cfg.d_model, cfg.d, std),
                w: Tensor::zeros(cfg.d, cfg.d),
            },
            layout,
            cfg: cfg.sla.clone(),
        })
    }

    fn project(params: &ToyParams, x: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        Ok((x.matmul(&params.wq)?, x.matmul(&params.wk)?, x.matmul(&params.wv)?))
    }

    /// Dense full attention on the current projections.
    pub fn teacher(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (q, k, v) = Self::project(&self.params, x)?;
        Ok(dense_attention_forward(&q, &k, &v)?.o)
    }

    fn forward_one(
        &self,
        params: &ToyParams,
        x: &Tensor<f64>,
        mask: Option<&CompressedMask>,
    ) -> Result<SlaForwardState<f64>> {
        let (q, k, v) = Self::project(params, x)?;
        match mask {
            Some(m) => sla_forward_with_mask(&q, &k, &v, m, &self.cfg, &self.layout),
            None => sla_forward(&q, &k, &v, &self.cfg, &self.layout),
        }
    }

    /// Mean loss over the batch, optionally with fixed masks.
    pub fn loss(
        &self,
        params: &ToyParams,
        inputs: &[Tensor<f64>],
        teachers: &[Tensor<f64>],
        masks: Option<&[CompressedMask]>,
    ) -> Result<f64> {
        let per: Vec<f64> = (0..inputs.len())
            .into_par_iter()
            .map(|b| -> Result<f64> {
                let st = self.forward_one(params, &inputs[b], masks.map(|m| &m[b]))?;
                let o = combine_outputs(&st, &OutputProjection { w: params.w.clone() })?;
                Ok(0.5 * o.sub(&teachers[b])?.frobenius_sq())
            })
            .collect::<Result<_>>()?;
        Ok(per.iter().sum::<f64>() / inputs.len() as f64)
    }

    /// Loss, gradient and the masks that were used.
    pub fn loss_and_grad(
        &self,
        params: &ToyParams,
        inputs: &[Tensor<f64>],
        teachers: &[Tensor<f64>],
        masks: Option<&[CompressedMask]>,
    ) -> Result<(f64, ToyParams, Vec<CompressedMask>)> {
        let scale = 1.0 / inputs.len() as f64;
        let proj = OutputProjection { w: params.w.clone() };
        let per: Vec<(f64, ToyParams, CompressedMask)> = (0..inputs.len())
            .into_par_iter()
            .map(|b| -> Result<_> {
                let x = &inputs[b];
                let st = self.forward_one(params, x, masks.map(|m| &m[b]))?;
                let resid = combine_outputs(&st, &proj)?.sub(&teachers[b])?;
                let loss = 0.5 * resid.frobenius_sq();
                let g = sla_backward_with_projection(&st, &proj, &resid, &self.cfg)?;
                let grads = ToyParams {
                    wq: x.t_matmul(&g.dq_total)?,
                    wk: x.t_matmul(&g.dk_total)?,
                    wv: x.t_matmul(&g.dv)?,
                    w: g.dw.expect("projection backward sets dW"),
                };
                Ok((loss, grads, st.mask))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grad: Option<ToyParams> = None;
        let mut used = Vec::with_capacity(per.len());
        for (loss, g, mask) in per {
            total += loss;
            grad = Some(match grad {
                None => g,
                Some(acc) => acc.axpy(1.0, &g)?,
            });
            used.push(mask);
        }
        let grad = grad.ok_or_else(|| SlaError::Config("toy_finetune needs at least one input".into()))?;
        let zero = ToyParams {
            wq: Tensor::zeros(grad.wq.rows(), grad.wq.cols()),
            wk: Tensor::zeros(grad.wk.rows(), grad.wk.cols()),
            wv: Tensor::zeros(grad.wv.rows(), grad.wv.cols()),
            w: Tensor::zeros(grad.w.rows(), grad.w.cols()),
        };
        Ok((total * scale, zero.axpy(scale, &grad)?, used))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Loss before the first step, then after each step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Worst relative error of directional finite differences against the
    /// step-0 gradient, one direction per parameter tensor.
    pub grad_check_error: f64,
    pub final_lr: f64,
    pub halvings: usize,
}

/// Step size and tolerance of the step-0 gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-5;

pub fn toy_inputs(cfg: &FinetuneConfig) -> Vec<Tensor<f64>> {
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 2));
    (0..cfg.batch).map(|_| gaussian_tensor(&mut rng, cfg.n, cfg.d_model, cfg.input_std)).collect()
}

fn check_gradient(
    layer: &ToyLayer,
    inputs: &[Tensor<f64>],
    teachers: &[Tensor<f64>],
    masks: &[CompressedMask],
    grad: &ToyParams,
    seed: u64,
) -> Result<f64> {
    let p = &layer.params;
    let mut rng = SplitMix64::new(derive_seed(seed, 3));
    let mut worst: f64 = 0.0;
    for which in 0..4 {
        let mut dir = ToyParams {
            wq: Tensor::zeros(p.wq.rows(), p.wq.cols()),
            wk: Tensor::zeros(p.wk.rows(), p.wk.cols()),
            wv: Tensor::zeros(p.wv.rows(), p.wv.cols()),
            w: Tensor::zeros(p.w.rows(), p.w.cols()),
        };
        let slot = [&mut dir.wq, &mut dir.wk, &mut dir.wv, &mut dir.w][which].data_mut();
        slot.iter_mut().for_each(|x| *x = rng.next_normal());
        let h = GRAD_CHECK_STEP;
        let lp = layer.loss(&p.axpy(h, &dir)?, inputs, teachers, Some(masks))?;
        let lm = layer.loss(&p.axpy(-h, &dir)?, inputs, teachers, Some(masks))?;
        let fd = (lp - lm) / (2.0 * h);
        let analytic = grad.dot(&dir)?;
        let err = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Distills an SLA layer into the dense teacher of its own initial weights.
pub fn toy_finetune(cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    toy_finetune_on(cfg, &toy_inputs(cfg))
}

pub fn toy_finetune_on(cfg: &FinetuneConfig, inputs: &[Tensor<f64>]) -> Result<FinetuneReport> {
    if cfg.steps == 0 {
        return Err(SlaError::Config("steps must be at least 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(SlaError::Config(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    if inputs.is_empty() || inputs.iter().any(|x| x.shape() != (cfg.n, cfg.d_model)) {
        return Err(SlaError::Shape(format!("inputs must be a non-empty set of {}x{} tensors", cfg.n, cfg.d_model)));
    }
    let mut layer = ToyLayer::new(cfg)?;
    let teachers: Vec<Tensor<f64>> = inputs.iter().map(|x| layer.teacher(x)).collect::<Result<_>>()?;

    let (initial, mut grad, step0_masks) = layer.loss_and_grad(&layer.params, inputs, &teachers, None)?;
    let grad_check_error = check_gradient(&layer, inputs, &teachers, &step0_masks, &grad, cfg.seed)?;
    let frozen = cfg.freeze_mask.then_some(step0_masks);
    let mut losses = vec![initial];
    let mut loss = initial;
    let mut lr = cfg.lr;
    let mut halvings = 0;
    for step in 1..=cfg.steps {
        let mut next = layer.params.axpy(-lr, &grad)?;
        if let Some(masks) = &frozen {
            while halvings < MAX_HALVINGS && layer.loss(&next, inputs, &teachers, Some(masks))? > loss {
                lr *= 0.5;
                halvings += 1;
                log::info!("step {step}: loss increased, halving lr to {lr:e}");
                next = layer.params.axpy(-lr, &grad)?;
            }
        }
        if next.tensors().iter().any(|t| !t.is_finite()) {
            return Err(SlaError::Diverged { step, loss: f64::INFINITY, initial });
        }
        layer.params = next;
        let (l, g, _) = layer.loss_and_grad(&layer.params, inputs, &teachers, frozen.as_deref())?;
        if l > DIVERGENCE_FACTOR * initial || !l.is_finite() {
            return Err(SlaError::Diverged { step, loss: l, initial });
        }
        loss = l;
        grad = g;
        losses.push(l);
    }
    Ok(FinetuneReport {
        final_loss: loss,
        initial_loss: initial,
        losses,
        grad_check_error,
        final_lr: lr,
        halvings,
    })
}
