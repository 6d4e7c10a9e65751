//! Mini-batch objective `L_st + L_s + w · L_fssd` with gradients for the
//! shared adapter stack and the current task's expert.

use std::collections::BTreeMap;

use crate::backbone::{backward_frame, encode_frame, encode_frame_cached, AdapterStack, FrameCache, FrameFeature, FrozenBackbone};
use crate::datagen::SyntheticVideo;
use crate::error::{Error, Result};
use crate::expert::{backward_spatiotemporal, encode_spatiotemporal_cached, ExpertCache, ExpertParams};
use crate::fssd::{fssd_loss, fssd_loss_grad};
use crate::losses::{total_loss, video_text_contrastive, LossBreakdown, LossConfig};
use crate::param::{Parameter, Parameterized};
use crate::tdmoe::spatial_mean;

/// Everything the optimizer may update during one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainables {
    pub adapters: AdapterStack,
    pub expert: Option<ExpertParams>,
}

impl Parameterized for Trainables {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.adapters.visit(f);
        if let Some(e) = &self.expert {
            e.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.adapters.visit_mut(f);
        if let Some(e) = &mut self.expert {
            e.visit_mut(f);
        }
    }
}

/// Spatial means of the batch videos under the frozen previous adapters, one
/// per batch video in batch order, and the per-channel weights `Ī`.
#[derive(Debug, Clone, Copy)]
pub struct DistillTarget<'a> {
    pub prev_features: &'a [&'a [f64]],
    pub weights: &'a [f64],
}

impl DistillTarget<'_> {
    fn prev(&self, batch_len: usize) -> Result<Vec<Vec<f64>>> {
        if self.prev_features.len() != batch_len {
            return Err(Error::dim(
                "objective",
                format!("{} previous features for a batch of {batch_len}", self.prev_features.len()),
            ));
        }
        Ok(self.prev_features.iter().map(|f| f.to_vec()).collect())
    }
}

/// Which contrastive terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub spatiotemporal: bool,
    pub spatial: bool,
}

pub struct Batch<'a> {
    pub videos: &'a [&'a SyntheticVideo],
    pub texts: &'a BTreeMap<usize, Vec<f64>>,
}

impl Batch<'_> {
    fn labels(&self) -> Vec<usize> {
        self.videos.iter().map(|v| v.label).collect()
    }

    fn label_texts(&self) -> Result<Vec<Vec<f64>>> {
        self.videos
            .iter()
            .map(|v| {
                self.texts
                    .get(&v.label)
                    .cloned()
                    .ok_or_else(|| Error::input("objective", format!("no text embedding for class {}", v.label)))
            })
            .collect()
    }
}

/// Spatial mean of a video's frame features under the given adapters.
pub fn video_spatial_mean(video: &SyntheticVideo, backbone: &FrozenBackbone, adapters: &AdapterStack) -> Result<Vec<f64>> {
    let feats = video
        .frames
        .iter()
        .map(|f| encode_frame(f, backbone, adapters))
        .collect::<Result<Vec<_>>>()?;
    spatial_mean(&feats)
}

struct SampleForward {
    frame_caches: Vec<FrameCache>,
    vbar: Vec<f64>,
    expert: Option<(Vec<f64>, ExpertCache)>,
}

fn forward_sample(video: &SyntheticVideo, backbone: &FrozenBackbone, params: &Trainables) -> Result<SampleForward> {
    let mut feats: Vec<FrameFeature> = Vec::with_capacity(video.frames.len());
    let mut frame_caches = Vec::with_capacity(video.frames.len());
    for f in &video.frames {
        let (feat, cache) = encode_frame_cached(f, backbone, &params.adapters)?;
        feats.push(feat);
        frame_caches.push(cache);
    }
    let vbar = spatial_mean(&feats)?;
    let expert = match &params.expert {
        Some(e) => Some(encode_spatiotemporal_cached(&feats, e)?),
        None => None,
    };
    Ok(SampleForward {
        frame_caches,
        vbar,
        expert,
    })
}

fn check_terms(params: &Trainables, terms: Terms) -> Result<()> {
    if terms.spatiotemporal && params.expert.is_none() {
        return Err(Error::input("objective", "spatiotemporal term requested without an expert"));
    }
    Ok(())
}

/// Forward pass; also returns per-sample gradients of the loss with respect
/// to the spatial means and expert outputs.
#[allow(clippy::type_complexity)]
fn evaluate(
    backbone: &FrozenBackbone,
    params: &Trainables,
    batch: &Batch<'_>,
    distill: Option<DistillTarget<'_>>,
    terms: Terms,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<SampleForward>, Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    check_terms(params, terms)?;
    if batch.videos.is_empty() {
        return Err(Error::input("objective", "empty batch"));
    }
    let labels = batch.labels();
    let texts = batch.label_texts()?;
    let fwd = batch
        .videos
        .iter()
        .map(|v| forward_sample(v, backbone, params))
        .collect::<Result<Vec<_>>>()?;
    let vbars: Vec<Vec<f64>> = fwd.iter().map(|s| s.vbar.clone()).collect();
    let width = vbars[0].len();

    let mut out = LossBreakdown::default();
    let mut dvbar = vec![vec![0.0; width]; fwd.len()];
    if terms.spatial {
        let (l, g) = video_text_contrastive(&vbars, &texts, &labels, cfg)?;
        out.spatial = l;
        dvbar = g;
    }
    let mut dvst = None;
    if terms.spatiotemporal {
        let vsts: Vec<Vec<f64>> = fwd
            .iter()
            .map(|s| s.expert.as_ref().expect("checked").0.clone())
            .collect();
        let (l, g) = video_text_contrastive(&vsts, &texts, &labels, cfg)?;
        out.spatiotemporal = l;
        dvst = Some(g);
    }
    if let Some(target) = distill {
        let prev = target.prev(batch.videos.len())?;
        let (l, g) = fssd_loss_grad(&prev, &vbars, target.weights)?;
        out.distill = Some(l);
        for (d, gi) in dvbar.iter_mut().zip(g) {
            d.iter_mut().zip(gi).for_each(|(a, b)| *a += cfg.w * b);
        }
    }
    out.total = total_loss(out.spatiotemporal, out.spatial, out.distill, cfg);
    Ok((out, fwd, dvbar, dvst))
}

/// Objective value only.
pub fn batch_loss(
    backbone: &FrozenBackbone,
    params: &Trainables,
    batch: &Batch<'_>,
    distill: Option<DistillTarget<'_>>,
    terms: Terms,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_terms(params, terms)?;
    let labels = batch.labels();
    let texts = batch.label_texts()?;
    let mut out = LossBreakdown::default();
    let mut vbars = Vec::with_capacity(batch.videos.len());
    let mut vsts = Vec::with_capacity(batch.videos.len());
    for v in batch.videos {
        let feats = v
            .frames
            .iter()
            .map(|f| encode_frame(f, backbone, &params.adapters))
            .collect::<Result<Vec<_>>>()?;
        vbars.push(spatial_mean(&feats)?);
        if terms.spatiotemporal {
            let e = params.expert.as_ref().expect("checked");
            vsts.push(encode_spatiotemporal_cached(&feats, e)?.0);
        }
    }
    if terms.spatial {
        out.spatial = video_text_contrastive(&vbars, &texts, &labels, cfg)?.0;
    }
    if terms.spatiotemporal {
        out.spatiotemporal = video_text_contrastive(&vsts, &texts, &labels, cfg)?.0;
    }
    if let Some(target) = distill {
        let prev = target.prev(batch.videos.len())?;
        out.distill = Some(fssd_loss(&prev, &vbars, target.weights)?);
    }
    out.total = total_loss(out.spatiotemporal, out.spatial, out.distill, cfg);
    Ok(out)
}

/// Objective value, with gradients accumulated into every trainable parameter.
pub fn batch_loss_grad(
    backbone: &FrozenBackbone,
    params: &mut Trainables,
    batch: &Batch<'_>,
    distill: Option<DistillTarget<'_>>,
    terms: Terms,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (out, fwd, dvbar, dvst) = evaluate(backbone, params, batch, distill, terms, cfg)?;
    let adapters_trainable = params.adapters.count_trainable() > 0;
    for (n, sample) in fwd.iter().enumerate() {
        let n_frames = sample.frame_caches.len();
        let mut dframes = match (&mut params.expert, &dvst, &sample.expert) {
            (Some(expert), Some(g), Some((_, cache))) => backward_spatiotemporal(expert, cache, &g[n]),
            _ => vec![vec![0.0; dvbar[n].len()]; n_frames],
        };
        if !adapters_trainable {
            continue;
        }
        for (df, cache) in dframes.iter_mut().zip(&sample.frame_caches) {
            df.iter_mut().zip(&dvbar[n]).for_each(|(a, b)| *a += b / n_frames as f64);
            backward_frame(backbone, &mut params.adapters, cache, df);
        }
    }
    Ok(out)
}
