//! Task-specific spatiotemporal encoder: self-attention over
//! `[cls; V_1^s; ...; V_Nf^s]`, returning the transformed [CLS] row.

use serde::{Deserialize, Serialize};

use crate::backbone::FrameFeature;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{AttentionCache, FeedForward, FeedForwardCache, SelfAttention};
use crate::param::{Parameter, Parameterized};
use crate::rng::SeedStream;
use crate::tensor::Matrix;

/// `d_vt`-channel [CLS] output of an expert.
pub type ExpertOutput = Vec<f64>;

pub const CLS_INIT_STD: f64 = 0.02;
pub const OUTPUT_DAMPING: f64 = 0.1;

/// Per-layer, per-head attention maps over the `N_f + 1` tokens.
pub type AttentionWeights = Vec<Vec<Matrix>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLayer {
    pub attn: SelfAttention,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub task_id: usize,
    /// Learnable video [CLS] token, `1 x d_vt`.
    pub cls: Parameter,
    pub layers: Vec<ExpertLayer>,
}

impl ExpertParams {
    /// Fresh expert for `task_id`. Query/key and FFN input weights use a
    /// `1/sqrt(width)` scale. Value and output projections start at the identity
    /// plus noise damped by `OUTPUT_DAMPING`, as does the FFN output, so a fresh
    /// expert pools its input frame features and training learns a correction.
    pub fn new(cfg: &ModelConfig, task_id: usize, stream: SeedStream) -> Self {
        let w = cfg.d_vt;
        let mut rng = stream.rng();
        let std = 1.0 / (w as f64).sqrt();
        let cls = Parameter::trainable(Matrix::random_normal(1, w, CLS_INIT_STD, &mut rng));
        let layers = (0..cfg.expert_layers)
            .map(|_| {
                let mut attn = SelfAttention::random(w, cfg.expert_heads, std, true, &mut rng);
                for p in [&mut attn.wv, &mut attn.wo] {
                    p.value.scale(OUTPUT_DAMPING);
                    p.value.add_assign(&Matrix::identity(w));
                }
                ExpertLayer {
                    attn,
                    ffn: FeedForward::random(w, std, OUTPUT_DAMPING * std, true, &mut rng),
                }
            })
            .collect();
        Self {
            task_id,
            cls,
            layers,
        }
    }

    pub fn width(&self) -> usize {
        self.cls.value.cols()
    }

    /// Closed-form parameter count: `d_vt + L · (4 d_vt² + 8 d_vt²)`.
    pub fn expected_count(cfg: &ModelConfig) -> usize {
        cfg.d_vt + cfg.expert_layers * 12 * cfg.d_vt * cfg.d_vt
    }
}

impl Parameterized for ExpertParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("expert.cls", &self.cls);
        for l in &self.layers {
            l.attn.visit(f);
            l.ffn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("expert.cls", &mut self.cls);
        for l in &mut self.layers {
            l.attn.visit_mut(f);
            l.ffn.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertCache {
    layers: Vec<(AttentionCache, FeedForwardCache)>,
    n_frames: usize,
}

impl ExpertCache {
    pub fn attention(&self) -> AttentionWeights {
        self.layers.iter().map(|(a, _)| a.probs.clone()).collect()
    }
}

fn input_tokens(frames: &[FrameFeature], expert: &ExpertParams) -> Result<Matrix> {
    if frames.is_empty() {
        return Err(Error::input("encode_spatiotemporal", "empty frame list"));
    }
    let w = expert.width();
    if let Some(bad) = frames.iter().find(|f| f.len() != w) {
        return Err(Error::dim(
            "encode_spatiotemporal",
            format!("frame feature width {} vs expert width {w}", bad.len()),
        ));
    }
    let mut x = Matrix::zeros(frames.len() + 1, w);
    x.row_mut(0).copy_from_slice(expert.cls.value.data());
    for (i, f) in frames.iter().enumerate() {
        x.row_mut(i + 1).copy_from_slice(f);
    }
    Ok(x)
}

/// Runs the expert and keeps everything needed for [`backward_spatiotemporal`].
pub fn encode_spatiotemporal_cached(frames: &[FrameFeature], expert: &ExpertParams) -> Result<(ExpertOutput, ExpertCache)> {
    let mut x = input_tokens(frames, expert)?;
    let mut layers = Vec::with_capacity(expert.layers.len());
    for layer in &expert.layers {
        let (a, ac) = layer.attn.forward(&x);
        x.add_assign(&a);
        let (f, fc) = layer.ffn.forward(&x);
        x.add_assign(&f);
        layers.push((ac, fc));
    }
    Ok((
        x.row(0).to_vec(),
        ExpertCache {
            layers,
            n_frames: frames.len(),
        },
    ))
}

/// `V^st` and the attention maps of every layer and head.
pub fn encode_spatiotemporal(frames: &[FrameFeature], expert: &ExpertParams) -> Result<(ExpertOutput, AttentionWeights)> {
    let (out, cache) = encode_spatiotemporal_cached(frames, expert)?;
    Ok((out, cache.attention()))
}

/// Accumulates expert gradients (if trainable) and returns `dL/dV_i^s` per frame.
pub fn backward_spatiotemporal(expert: &mut ExpertParams, cache: &ExpertCache, doutput: &[f64]) -> Vec<Vec<f64>> {
    let w = expert.width();
    let mut dx = Matrix::zeros(cache.n_frames + 1, w);
    dx.row_mut(0).copy_from_slice(doutput);
    for (layer, (ac, fc)) in expert.layers.iter_mut().zip(&cache.layers).rev() {
        let d = layer.ffn.backward(fc, &dx);
        dx.add_assign(&d);
        let d = layer.attn.backward(ac, &dx);
        dx.add_assign(&d);
    }
    expert.cls.accumulate(&Matrix::row_vector(dx.row(0)));
    (1..=cache.n_frames).map(|i| dx.row(i).to_vec()).collect()
}

/// Deep copy with every parameter frozen.
pub fn clone_and_freeze(expert: &ExpertParams) -> ExpertParams {
    let mut c = expert.clone();
    c.freeze_all();
    c
}
