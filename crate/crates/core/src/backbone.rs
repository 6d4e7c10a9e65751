//! Frozen mini-transformer spatial encoder with residual bottleneck adapters.
//!
//! Each layer applies, per token,
//! `v' = v + MHSA(v)`, `v'' = v' + ReLU(v' W_down) W_up`, `v''' = v'' + FFN(v'')`,
//! and the frame feature is the final frame-[CLS] row projected by `W_proj`.
//! No layer normalization is applied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{AttentionCache, FeedForward, FeedForwardCache, SelfAttention};
use crate::param::{Parameter, Parameterized};
use crate::rng::SeedStream;
use crate::tensor::{mm, mm_nt, mm_tn, vm, Matrix};

/// Projected frame-level [CLS] output, `d_vt` channels.
pub type FrameFeature = Vec<f64>;

pub const BACKBONE_INIT_STD: f64 = 0.02;
pub const ADAPTER_DOWN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub attn: SelfAttention,
    pub ffn: FeedForward,
}

/// Frozen stand-in for a pretrained visual encoder. Reconstructible bit-exactly
/// from `(backbone_seed, ModelConfig)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub config: ModelConfig,
    /// Token-position embedding table, `(n_patches + 1) x d`.
    pub pos_embed: Parameter,
    pub layers: Vec<BackboneLayer>,
    /// `d x d_vt` projection into the video/text space.
    pub proj: Parameter,
}

impl FrozenBackbone {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut rng = SeedStream::new(cfg.backbone_seed).split("backbone").rng();
        Self::random(cfg, BACKBONE_INIT_STD, &mut rng)
    }

    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let pos_embed = Parameter::frozen(Matrix::random_normal(cfg.tokens_per_frame(), cfg.d, std, rng));
        let layers = (0..cfg.backbone_layers)
            .map(|_| BackboneLayer {
                attn: SelfAttention::random(cfg.d, cfg.backbone_heads, std, false, rng),
                ffn: FeedForward::random(cfg.d, std, std, false, rng),
            })
            .collect();
        let proj = Parameter::frozen(Matrix::random_normal(cfg.d, cfg.d_vt, std, rng));
        Self {
            config: cfg.clone(),
            pos_embed,
            layers,
            proj,
        }
    }
}

impl Parameterized for FrozenBackbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("backbone.pos_embed", &self.pos_embed);
        for l in &self.layers {
            l.attn.visit(f);
            l.ffn.visit(f);
        }
        f("backbone.proj", &self.proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("backbone.pos_embed", &mut self.pos_embed);
        for l in &mut self.layers {
            l.attn.visit_mut(f);
            l.ffn.visit_mut(f);
        }
        f("backbone.proj", &mut self.proj);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `d x d_h`
    pub down: Parameter,
    /// `d_h x d`, zero at initialization
    pub up: Parameter,
}

/// The single shared adapter stack, one bottleneck per backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub layers: Vec<Adapter>,
}

impl AdapterStack {
    pub fn new(cfg: &ModelConfig, stream: SeedStream) -> Self {
        let mut rng = stream.rng();
        let layers = (0..cfg.backbone_layers)
            .map(|_| Adapter {
                down: Parameter::trainable(Matrix::random_normal(cfg.d, cfg.d_h, ADAPTER_DOWN_INIT_STD, &mut rng)),
                up: Parameter::trainable(Matrix::zeros(cfg.d_h, cfg.d)),
            })
            .collect();
        Self { layers }
    }

    /// Closed-form trainable count, `Σ_layers 2 · d · d_h`.
    pub fn expected_count(cfg: &ModelConfig) -> usize {
        cfg.backbone_layers * 2 * cfg.d * cfg.d_h
    }
}

impl Parameterized for AdapterStack {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for a in &self.layers {
            f("adapter.down", &a.down);
            f("adapter.up", &a.up);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for a in &mut self.layers {
            f("adapter.down", &mut a.down);
            f("adapter.up", &mut a.up);
        }
    }
}

/// `ReLU(x W_down) W_up` for a single d-vector.
pub fn adapter_forward(x: &[f64], layer: usize, adapters: &AdapterStack) -> Result<Vec<f64>> {
    let a = adapters
        .layers
        .get(layer)
        .ok_or_else(|| Error::input("adapter_forward", format!("no adapter at layer {layer}")))?;
    if x.len() != a.down.value.rows() {
        return Err(Error::dim(
            "adapter_forward",
            format!("input width {} vs adapter width {}", x.len(), a.down.value.rows()),
        ));
    }
    let hidden: Vec<f64> = vm(x, &a.down.value).into_iter().map(|v| v.max(0.0)).collect();
    Ok(vm(&hidden, &a.up.value))
}

#[derive(Debug, Clone)]
struct LayerCache {
    attn: AttentionCache,
    /// residual stream after attention, input to the adapter
    post_attn: Matrix,
    /// pre-ReLU adapter activations
    adapter_pre: Matrix,
    ffn: FeedForwardCache,
}

#[derive(Debug, Clone)]
pub struct FrameCache {
    layers: Vec<LayerCache>,
}

fn check_tokens(tokens: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if tokens.rows() != cfg.tokens_per_frame() || tokens.cols() != cfg.d {
        return Err(Error::dim(
            "encode_frame",
            format!(
                "token matrix {}x{}, expected {}x{}",
                tokens.rows(),
                tokens.cols(),
                cfg.tokens_per_frame(),
                cfg.d
            ),
        ));
    }
    Ok(())
}

fn forward_impl(tokens: &Matrix, backbone: &FrozenBackbone, adapters: &AdapterStack, keep: bool) -> (FrameFeature, Option<FrameCache>) {
    let mut z = tokens.clone();
    z.add_assign(&backbone.pos_embed.value);
    let mut caches = Vec::with_capacity(if keep { backbone.layers.len() } else { 0 });
    for (layer, adapter) in backbone.layers.iter().zip(&adapters.layers) {
        let (attn_out, attn_cache) = layer.attn.forward(&z);
        z.add_assign(&attn_out);
        let adapter_pre = mm(&z, &adapter.down.value);
        let hidden = adapter_pre.map(|v| v.max(0.0));
        let post_attn = if keep { Some(z.clone()) } else { None };
        z.add_assign(&mm(&hidden, &adapter.up.value));
        let (ffn_out, ffn_cache) = layer.ffn.forward(&z);
        z.add_assign(&ffn_out);
        if let Some(post_attn) = post_attn {
            caches.push(LayerCache {
                attn: attn_cache,
                post_attn,
                adapter_pre,
                ffn: ffn_cache,
            });
        }
    }
    let feature = vm(z.row(0), &backbone.proj.value);
    let cache = keep.then_some(FrameCache { layers: caches });
    (feature, cache)
}

/// Encodes one frame's `(n_patches + 1) x d` token matrix (frame [CLS] first).
pub fn encode_frame(tokens: &Matrix, backbone: &FrozenBackbone, adapters: &AdapterStack) -> Result<FrameFeature> {
    check_tokens(tokens, &backbone.config)?;
    Ok(forward_impl(tokens, backbone, adapters, false).0)
}

pub fn encode_frame_cached(
    tokens: &Matrix,
    backbone: &FrozenBackbone,
    adapters: &AdapterStack,
) -> Result<(FrameFeature, FrameCache)> {
    check_tokens(tokens, &backbone.config)?;
    let (f, c) = forward_impl(tokens, backbone, adapters, true);
    Ok((f, c.expect("cache requested")))
}

/// Backpropagates `dL/dfeature` through one frame, accumulating adapter gradients.
pub fn backward_frame(backbone: &FrozenBackbone, adapters: &mut AdapterStack, cache: &FrameCache, dfeature: &[f64]) {
    let cfg = &backbone.config;
    let mut dz = Matrix::zeros(cfg.tokens_per_frame(), cfg.d);
    dz.row_mut(0).copy_from_slice(&mm_nt(&Matrix::row_vector(dfeature), &backbone.proj.value).into_data());
    for ((layer, adapter), lc) in backbone.layers.iter().zip(adapters.layers.iter_mut()).zip(&cache.layers).rev() {
        // FFN residual
        let dffn_in = layer.ffn.backward_input(&lc.ffn, &dz);
        dz.add_assign(&dffn_in);
        // adapter residual: z'' = z' + ReLU(z' Wd) Wu
        let hidden = lc.adapter_pre.map(|v| v.max(0.0));
        if adapter.up.is_trainable() {
            adapter.up.accumulate(&mm_tn(&hidden, &dz));
        }
        let mut dpre = mm_nt(&dz, &adapter.up.value);
        for (d, &p) in dpre.data_mut().iter_mut().zip(lc.adapter_pre.data()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        if adapter.down.is_trainable() {
            adapter.down.accumulate(&mm_tn(&lc.post_attn, &dpre));
        }
        dz.add_assign(&mm_nt(&dpre, &adapter.down.value));
        // attention residual
        let dattn_in = layer.attn.backward_input(&lc.attn, &dz);
        dz.add_assign(&dattn_in);
    }
}

/// Encodes every frame of a video independently, preserving frame order.
pub fn encode_video_spatial(frames: &[Matrix], backbone: &FrozenBackbone, adapters: &AdapterStack) -> Result<Vec<FrameFeature>> {
    if frames.len() != backbone.config.n_frames {
        return Err(Error::dim(
            "encode_video_spatial",
            format!("{} frames, expected {}", frames.len(), backbone.config.n_frames),
        ));
    }
    frames.iter().map(|f| encode_frame(f, backbone, adapters)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::tensor::dot;

    fn single(down: f64, up: f64) -> AdapterStack {
        AdapterStack {
            layers: vec![Adapter {
                down: Parameter::trainable(Matrix::from_vec(1, 1, vec![down]).unwrap()),
                up: Parameter::trainable(Matrix::from_vec(1, 1, vec![up]).unwrap()),
            }],
        }
    }

    #[test]
    fn scalar_adapter_passes_and_kills() {
        let a = single(1.0, 1.0);
        assert_eq!(adapter_forward(&[2.0], 0, &a).unwrap(), vec![2.0]);
        assert_eq!(adapter_forward(&[-3.0], 0, &a).unwrap(), vec![0.0]);
        assert!(adapter_forward(&[1.0, 2.0], 0, &a).is_err());
        assert!(adapter_forward(&[1.0], 1, &a).is_err());
    }

    #[test]
    fn adapter_matches_two_matmul_oracle() {
        let mut rng = SeedStream::new(3).rng();
        let down = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let up = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let x = [0.3, -1.2, 0.8, 2.0];
        let mut hidden = [0.0; 2];
        for (j, h) in hidden.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *h += xi * down.get(i, j);
            }
            *h = h.max(0.0);
        }
        let mut want = [0.0; 4];
        for (k, w) in want.iter_mut().enumerate() {
            for (j, h) in hidden.iter().enumerate() {
                *w += h * up.get(j, k);
            }
        }
        let a = AdapterStack {
            layers: vec![Adapter {
                down: Parameter::trainable(down),
                up: Parameter::trainable(up),
            }],
        };
        let got = adapter_forward(&x, 0, &a).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    fn frames(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = SeedStream::new(seed).rng();
        (0..n)
            .map(|_| Matrix::random_normal(cfg.tokens_per_frame(), cfg.d, 1.0, &mut rng))
            .collect()
    }

    fn bare(cfg: &ModelConfig, backbone: &FrozenBackbone, tokens: &Matrix) -> Vec<f64> {
        let mut z = tokens.clone();
        z.add_assign(&backbone.pos_embed.value);
        for layer in &backbone.layers {
            z.add_assign(&layer.attn.forward(&z).0);
            z.add_assign(&layer.ffn.forward(&z).0);
        }
        let mut out = vec![0.0; cfg.d_vt];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..cfg.d).map(|i| z.get(0, i) * backbone.proj.value.get(i, c)).sum();
        }
        out
    }

    #[test]
    fn zero_up_projection_leaves_backbone_unchanged() {
        let cfg = ModelConfig::default();
        let backbone = FrozenBackbone::new(&cfg);
        let adapters = AdapterStack::new(&cfg, SeedStream::new(5));
        for f in frames(&cfg, 3, 11) {
            let got = encode_frame(&f, &backbone, &adapters).unwrap();
            assert_eq!(got.len(), cfg.d_vt);
            assert_eq!(got, bare(&cfg, &backbone, &f));
        }
    }

    fn tanh_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn tiny_forward_matches_manual_computation() {
        let cfg = ModelConfig {
            d: 2,
            d_h: 1,
            d_vt: 2,
            n_frames: 1,
            n_patches: 1,
            backbone_layers: 1,
            backbone_heads: 1,
            ..Default::default()
        };
        let mut rng = SeedStream::new(9).rng();
        let backbone = FrozenBackbone::random(&cfg, 0.5, &mut rng);
        let adapters = AdapterStack {
            layers: vec![Adapter {
                down: Parameter::trainable(Matrix::from_vec(2, 1, vec![0.7, -0.4]).unwrap()),
                up: Parameter::trainable(Matrix::from_vec(1, 2, vec![0.3, 0.9]).unwrap()),
            }],
        };
        let tokens = Matrix::from_vec(2, 2, vec![0.5, -1.0, 1.5, 0.25]).unwrap();
        let l = &backbone.layers[0];
        let w = |p: &Parameter, i: usize, j: usize| p.value.get(i, j);
        let mut z = [[0.0; 2]; 2];
        for t in 0..2 {
            for j in 0..2 {
                z[t][j] = tokens.get(t, j) + w(&backbone.pos_embed, t, j);
            }
        }
        let proj = |z: &[[f64; 2]; 2], p: &Parameter| {
            let mut o = [[0.0; 2]; 2];
            for t in 0..2 {
                for j in 0..2 {
                    o[t][j] = z[t][0] * w(p, 0, j) + z[t][1] * w(p, 1, j);
                }
            }
            o
        };
        let (q, k, v) = (proj(&z, &l.attn.wq), proj(&z, &l.attn.wk), proj(&z, &l.attn.wv));
        let mut mixed = [[0.0; 2]; 2];
        for t in 0..2 {
            let s: Vec<f64> = (0..2).map(|u| (q[t][0] * k[u][0] + q[t][1] * k[u][1]) / 2f64.sqrt()).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let a: Vec<f64> = e.iter().map(|x| x / (e[0] + e[1])).collect();
            for j in 0..2 {
                mixed[t][j] = a[0] * v[0][j] + a[1] * v[1][j];
            }
        }
        let attn = proj(&mixed, &l.attn.wo);
        for t in 0..2 {
            for j in 0..2 {
                z[t][j] += attn[t][j];
            }
            let h = (z[t][0] * 0.7 - z[t][1] * 0.4).max(0.0);
            z[t][0] += h * 0.3;
            z[t][1] += h * 0.9;
            let hidden: Vec<f64> = (0..8)
                .map(|m| tanh_gelu(z[t][0] * w(&l.ffn.w1, 0, m) + z[t][1] * w(&l.ffn.w1, 1, m)))
                .collect();
            let ffn: Vec<f64> = (0..2)
                .map(|j| (0..8).map(|m| hidden[m] * w(&l.ffn.w2, m, j)).sum())
                .collect();
            z[t][0] += ffn[0];
            z[t][1] += ffn[1];
        }
        let want: Vec<f64> = (0..2)
            .map(|c| z[0][0] * w(&backbone.proj, 0, c) + z[0][1] * w(&backbone.proj, 1, c))
            .collect();
        let got = encode_frame(&tokens, &backbone, &adapters).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn wrong_token_count_is_a_shape_error() {
        let cfg = ModelConfig::default();
        let backbone = FrozenBackbone::new(&cfg);
        let adapters = AdapterStack::new(&cfg, SeedStream::new(0));
        let bad = Matrix::zeros(cfg.tokens_per_frame() + 1, cfg.d);
        assert!(matches!(encode_frame(&bad, &backbone, &adapters), Err(Error::Dimension { .. })));
        let few = frames(&cfg, cfg.n_frames - 1, 1);
        assert!(encode_video_spatial(&few, &backbone, &adapters).is_err());
    }

    #[test]
    fn construction_is_reproducible() {
        let cfg = ModelConfig::default();
        assert_eq!(FrozenBackbone::new(&cfg), FrozenBackbone::new(&cfg));
        let other = ModelConfig {
            backbone_seed: cfg.backbone_seed + 1,
            ..cfg.clone()
        };
        assert_ne!(FrozenBackbone::new(&cfg), FrozenBackbone::new(&other));
        let b = FrozenBackbone::new(&cfg);
        assert_eq!(b.count_trainable(), 0);
        let a = AdapterStack::new(&cfg, SeedStream::new(2));
        assert_eq!(a.count_trainable(), AdapterStack::expected_count(&cfg));
        assert!(a.layers.iter().all(|l| l.up.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn video_encoding_is_per_frame() {
        let cfg = ModelConfig::default();
        let backbone = FrozenBackbone::new(&cfg);
        let adapters = AdapterStack::new(&cfg, SeedStream::new(4));
        let fs = frames(&cfg, cfg.n_frames, 21);
        let out = encode_video_spatial(&fs, &backbone, &adapters).unwrap();
        assert_eq!(out.len(), cfg.n_frames);
        let same = vec![fs[0].clone(); cfg.n_frames];
        let rep = encode_video_spatial(&same, &backbone, &adapters).unwrap();
        assert!(rep.iter().all(|f| f == &rep[0]));
        let mut rev = fs.clone();
        rev.reverse();
        let mut out_rev = encode_video_spatial(&rev, &backbone, &adapters).unwrap();
        out_rev.reverse();
        assert_eq!(out, out_rev);
    }

    #[test]
    fn adapter_gradients_pass_grad_check() {
        let cfg = ModelConfig::default();
        let backbone = FrozenBackbone::new(&cfg);
        let mut adapters = AdapterStack::new(&cfg, SeedStream::new(6));
        let mut rng = SeedStream::new(7).rng();
        for a in &mut adapters.layers {
            a.up.value = Matrix::random_normal(cfg.d_h, cfg.d, 0.5, &mut rng);
            a.down.value = Matrix::random_normal(cfg.d, cfg.d_h, 0.5, &mut rng);
        }
        let fs = frames(&cfg, 2, 8);
        let r: Vec<f64> = (0..cfg.d_vt).map(|i| (i as f64 * 0.37).sin()).collect();
        for f in &fs {
            let (_, cache) = encode_frame_cached(f, &backbone, &adapters).unwrap();
            backward_frame(&backbone, &mut adapters, &cache, &r);
        }
        let loss = |a: &AdapterStack| -> Result<f64> {
            fs.iter()
                .map(|f| encode_frame(f, &backbone, a).map(|o| dot(&o, &r)))
                .sum()
        };
        let report = grad_check(&mut adapters, &GradCheckOptions::default(), loss).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
