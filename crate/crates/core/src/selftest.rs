//! Fast invariant suite behind `stpr selftest`.

use std::time::Instant;

use rand::Rng;

use crate::backbone::{AdapterStack, FrozenBackbone};
use crate::config::ModelConfig;
use crate::datagen::{generate_stream, StreamConfig, SyntheticVideo};
use crate::error::Result;
use crate::expert::ExpertParams;
use crate::fssd::{fssd_loss, monte_carlo_fisher, uniform_distill_loss};
use crate::gradcheck::{grad_check, Difference, GradCheckOptions, GradCheckReport};
use crate::losses::{label_mask, t2v_loss, v2t_loss, LossConfig};
use crate::objective::{batch_loss, batch_loss_grad, video_spatial_mean, Batch, DistillTarget, Terms, Trainables};
use crate::param::Parameterized;
use crate::rng::SeedStream;
use crate::tdmoe::{spatial_mean, temporal_component, weighted_frame_sum};
use crate::tensor::{softmax_rows, Matrix};

/// Deliberate defects used to confirm that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales every analytic gradient by 1.1 before the gradient check.
    WrongGradient,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Initial finite-difference steps. The adapter path has ReLU kinks and is checked with a
/// step ladder; the expert is smooth and uses Ridders' extrapolation.
pub const ADAPTER_STEP: f64 = 1e-4;
pub const EXPERT_STEP: f64 = 1e-2;

/// Tiny two-task stream, perturbed current and previous adapters and a fresh expert:
/// enough to exercise every term of the objective.
pub struct ObjectiveFixture {
    pub backbone: FrozenBackbone,
    pub params: Trainables,
    pub prev_adapters: AdapterStack,
    pub videos: Vec<SyntheticVideo>,
    pub texts: std::collections::BTreeMap<usize, Vec<f64>>,
    pub weights: Vec<f64>,
    pub loss: LossConfig,
}

impl ObjectiveFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let model = ModelConfig::default();
        let stream_cfg = StreamConfig {
            tasks: 2,
            train_per_class: 2,
            eval_per_class: 1,
            ..Default::default()
        };
        let stream = generate_stream(seed, &stream_cfg, &model)?;
        let root = SeedStream::new(seed).split("objective_fixture");
        let backbone = FrozenBackbone::new(&model);
        let mut rng = root.split("perturb").rng();
        let mut adapters = AdapterStack::new(&model, root.split("adapters"));
        for a in &mut adapters.layers {
            a.up.value = Matrix::random_normal(model.d_h, model.d, 0.05, &mut rng);
        }
        let mut prev_adapters = adapters.clone();
        for a in &mut prev_adapters.layers {
            a.up.value.add_assign(&Matrix::random_normal(model.d_h, model.d, 0.05, &mut rng));
        }
        let weights: Vec<f64> = (0..model.d_vt).map(|_| rng.random_range(0.2..2.0)).collect();
        let expert = ExpertParams::new(&model, 1, root.split("expert"));
        Ok(Self {
            backbone,
            params: Trainables {
                adapters,
                expert: Some(expert),
            },
            prev_adapters,
            videos: stream.tasks[1].train.clone(),
            texts: stream.texts,
            weights,
            loss: LossConfig {
                w: 10.0,
                ..Default::default()
            },
        })
    }

    /// Finite-difference check of `L_st + L_s + w · L_fssd` over every
    /// trainable group: adapters, expert layers and the expert [CLS] token.
    pub fn grad_check(&mut self, coords_per_param: Option<usize>, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
        let prev: Vec<Vec<f64>> = self
            .videos
            .iter()
            .map(|v| video_spatial_mean(v, &self.backbone, &self.prev_adapters))
            .collect::<Result<_>>()?;
        let prev_refs: Vec<&[f64]> = prev.iter().map(|p| p.as_slice()).collect();
        let refs: Vec<&SyntheticVideo> = self.videos.iter().collect();
        let batch = Batch {
            videos: &refs,
            texts: &self.texts,
        };
        let target = DistillTarget {
            prev_features: &prev_refs,
            weights: &self.weights,
        };
        let terms = Terms {
            spatiotemporal: true,
            spatial: true,
        };
        self.params.zero_grad();
        batch_loss_grad(&self.backbone, &mut self.params, &batch, Some(target), terms, &self.loss)?;
        if fault == Some(Fault::WrongGradient) {
            self.params.visit_mut(&mut |_, p| p.grad_mut().scale(1.1));
        }
        let (backbone, loss_cfg) = (&self.backbone, &self.loss);
        let total = |p: &Trainables| batch_loss(backbone, p, &batch, Some(target), terms, loss_cfg).map(|l| l.total);
        let opts = |eps, method| GradCheckOptions {
            eps,
            method,
            coords_per_param,
            seed,
        };

        let expert = self.params.expert.clone();
        let adapters = grad_check(&mut self.params.adapters, &opts(ADAPTER_STEP, Difference::Ladder), |a| {
            total(&Trainables {
                adapters: a.clone(),
                expert: expert.clone(),
            })
        })?;
        let frozen_adapters = self.params.adapters.clone();
        let expert = match self.params.expert.as_mut() {
            Some(e) => grad_check(e, &opts(EXPERT_STEP, Difference::Ridders), |e| {
                total(&Trainables {
                    adapters: frozen_adapters.clone(),
                    expert: Some(e.clone()),
                })
            })?,
            None => GradCheckReport::default(),
        };
        let worst = if expert.max_rel_error > adapters.max_rel_error { &expert } else { &adapters };
        Ok(GradCheckReport {
            checked: adapters.checked + expert.checked,
            max_rel_error: worst.max_rel_error,
            worst: worst.worst.clone(),
        })
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn decomposition() -> Result<(bool, String)> {
    let mut rng = SeedStream::new(11).split("decomposition").rng();
    let (d, nf) = (16, 8);
    let vbar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut eps: Vec<Vec<f64>> = (0..nf).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    for j in 0..d {
        let m = eps.iter().map(|e| e[j]).sum::<f64>() / nf as f64;
        eps.iter_mut().for_each(|e| e[j] -= m);
    }
    let frames: Vec<Vec<f64>> = eps
        .iter()
        .map(|e| e.iter().zip(&vbar).map(|(a, b)| a + b).collect())
        .collect();
    let raw: Vec<f64> = (0..nf).map(|_| rng.random_range(0.1..1.0)).collect();
    let a: Vec<f64> = raw.iter().map(|r| r / raw.iter().sum::<f64>()).collect();
    let vst = weighted_frame_sum(&frames, &a)?;
    let mean = spatial_mean(&frames)?;
    let tem = temporal_component(&vst, &mean)?;
    let mut worst = 0.0f64;
    for j in 0..d {
        let expected: f64 = (0..nf).map(|i| (a[i] - 1.0 / nf as f64) * eps[i][j]).sum();
        worst = worst.max((tem[j] - expected).abs());
    }
    let rebuilt = tem
        .iter()
        .zip(&mean)
        .zip(&vst)
        .all(|((t, m), v)| (t + m - v).abs() <= f64::EPSILON * v.abs().max(m.abs()));
    Ok((
        worst < 1e-10 && rebuilt,
        format!("max deviation {worst:.2e}, reconstruction within rounding: {rebuilt}"),
    ))
}

fn fisher() -> Result<(bool, String)> {
    let mut rng = SeedStream::new(12).split("fisher").rng();
    let mut parts = Vec::new();
    let mut ok = true;
    for var in [0.25, 1.0, 4.0] {
        let mc = monte_carlo_fisher(0.3, var, 100_000, &mut rng)?;
        let rel = (mc - 1.0 / var).abs() * var;
        ok &= rel < 0.05;
        parts.push(format!("var {var}: rel {rel:.3}"));
    }
    Ok((ok, parts.join(", ")))
}

fn gradients(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut fixture = ObjectiveFixture::new(3)?;
    let r = fixture.grad_check(GradCheckOptions::default().coords_per_param, 0, fault)?;
    let worst = r.worst.as_ref().map_or(String::new(), |w| format!(" at {}[{}]", w.param, w.index));
    Ok((
        r.checked > 0 && r.max_rel_error < GRAD_TOLERANCE,
        format!("{} coordinates, max relative error {:.2e}{worst}", r.checked, r.max_rel_error),
    ))
}

fn softmax_contracts() -> Result<(bool, String)> {
    let mut rng = SeedStream::new(13).split("softmax").rng();
    let s = Matrix::random_normal(5, 5, 3.0, &mut rng);
    let p = softmax_rows(&s);
    let rows_ok = (0..5).all(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.row(i).iter().all(|&v| v > 0.0));
    let shifted = softmax_rows(&s.map(|v| v + 100.0));
    let shift = p.max_abs_diff(&shifted);
    let m = label_mask(&[0, 1, 0, 2, 1]);
    let cfg = LossConfig::default();
    let duality = (t2v_loss(&s, &m, &cfg)? - v2t_loss(&s.transpose(), &m.transpose(), &cfg)?).abs();
    Ok((
        rows_ok && shift < 1e-12 && duality == 0.0,
        format!("rows stochastic: {rows_ok}, shift deviation {shift:.1e}, transpose duality gap {duality:.1e}"),
    ))
}

fn distillation() -> Result<(bool, String)> {
    let mut rng = SeedStream::new(14).split("distill").rng();
    let prev: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let cur: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let uniform_gap = (fssd_loss(&prev, &cur, &[1.0; 6])? - uniform_distill_loss(&prev, &cur)?).abs();
    let self_loss = fssd_loss(&prev, &prev, &[0.7; 6])?;
    Ok((
        uniform_gap == 0.0 && self_loss == 0.0,
        format!("uniform gap {uniform_gap:.1e}, self distance {self_loss:.1e}"),
    ))
}

/// Runs every check in a fixed order.
pub fn run_selftest(fault: Option<Fault>) -> Vec<CheckOutcome> {
    vec![
        timed("decomposition-identity", decomposition),
        timed("fisher-closed-form", fisher),
        timed("objective-gradients", || gradients(fault)),
        timed("softmax-contracts", softmax_contracts),
        timed("distillation-reductions", distillation),
    ]
}
