//! Temporal decomposition, anchor pools, cosine routing and residual fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::FrameFeature;
use crate::error::{Error, Result};
use crate::expert::{encode_spatiotemporal, ExpertParams};
use crate::tensor::{cosine, norm};

/// Elementwise mean over frames.
pub fn spatial_mean(frames: &[FrameFeature]) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::input("spatial_mean", "no frames"))?;
    let mut mean = vec![0.0; first.len()];
    for f in frames {
        if f.len() != mean.len() {
            return Err(Error::dim(
                "spatial_mean",
                format!("frame widths {} and {}", mean.len(), f.len()),
            ));
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    let n = frames.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `vst − vbar`.
pub fn temporal_component(vst: &[f64], vbar: &[f64]) -> Result<Vec<f64>> {
    if vst.len() != vbar.len() {
        return Err(Error::dim(
            "temporal_component",
            format!("{} vs {}", vst.len(), vbar.len()),
        ));
    }
    Ok(vst.iter().zip(vbar).map(|(a, b)| a - b).collect())
}

/// `Σ_i a_i V_i`, a single linear attention read-out over frames.
pub fn weighted_frame_sum(frames: &[FrameFeature], weights: &[f64]) -> Result<Vec<f64>> {
    if frames.len() != weights.len() || frames.is_empty() {
        return Err(Error::dim(
            "weighted_frame_sum",
            format!("{} frames, {} weights", frames.len(), weights.len()),
        ));
    }
    let mut out = vec![0.0; frames[0].len()];
    for (f, a) in frames.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Per-class reference vectors, each owned by the task that introduced the class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorPool {
    pub anchors: BTreeMap<usize, Vec<f64>>,
    pub owner: BTreeMap<usize, usize>,
}

impl AnchorPool {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Adds anchors for a finished task. Existing classes cannot be overwritten.
    pub fn insert_task(&mut self, task: usize, anchors: BTreeMap<usize, Vec<f64>>) -> Result<()> {
        if let Some(c) = anchors.keys().find(|c| self.anchors.contains_key(c)) {
            return Err(Error::input("AnchorPool::insert_task", format!("class {c} already has an anchor")));
        }
        for (c, a) in anchors {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "AnchorPool::insert_task" });
            }
            self.owner.insert(c, task);
            self.anchors.insert(c, a);
        }
        Ok(())
    }

    pub fn classes_of(&self, task: usize) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.owner
            .iter()
            .filter(move |(_, &t)| t == task)
            .map(|(&c, _)| (c, self.anchors[&c].as_slice()))
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.owner.values().copied().collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// `max_c cos(v, anchor_c)` over the classes owned by `task`; a zero vector scores 0.
    pub fn max_cosine(&self, task: usize, v: &[f64]) -> Result<f64> {
        if norm(v) == 0.0 {
            return Ok(0.0);
        }
        let mut best: Option<f64> = None;
        for (_, anchor) in self.classes_of(task) {
            let s = if norm(anchor) == 0.0 { 0.0 } else { cosine(v, anchor)? };
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
        best.ok_or_else(|| Error::input("route", format!("no anchors for task {task}")))
    }
}

/// Per-class mean of the temporal component computed with `expert`.
/// `samples` pairs each label with the video's frame features.
pub fn build_anchors(samples: &[(usize, Vec<FrameFeature>)], classes: &[usize], expert: &ExpertParams) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, frames) in samples {
        let vbar = spatial_mean(frames)?;
        let (vst, _) = encode_spatiotemporal(frames, expert)?;
        let tem = temporal_component(&vst, &vbar)?;
        let entry = sums.entry(*label).or_insert_with(|| (vec![0.0; tem.len()], 0));
        entry.0.iter_mut().zip(&tem).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    classes
        .iter()
        .map(|c| match sums.get(c) {
            Some((sum, n)) => Ok((*c, sum.iter().map(|s| s / *n as f64).collect())),
            None => Err(Error::input("build_anchors", format!("class {c} has no samples"))),
        })
        .collect()
}

/// Per-class mean of the spatial mean, used by the spatial-feature routing baseline.
pub fn build_spatial_anchors(samples: &[(usize, Vec<FrameFeature>)], classes: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, frames) in samples {
        let vbar = spatial_mean(frames)?;
        let entry = sums.entry(*label).or_insert_with(|| (vec![0.0; vbar.len()], 0));
        entry.0.iter_mut().zip(&vbar).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    classes
        .iter()
        .map(|c| match sums.get(c) {
            Some((sum, n)) => Ok((*c, sum.iter().map(|s| s / *n as f64).collect())),
            None => Err(Error::input("build_spatial_anchors", format!("class {c} has no samples"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingStrategy {
    #[default]
    Td,
    Avg,
    Spatial,
}

impl fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Td => "td",
            Self::Avg => "avg",
            Self::Spatial => "spatial",
        })
    }
}

impl FromStr for RoutingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td" => Ok(Self::Td),
            "avg" => Ok(Self::Avg),
            "spatial" => Ok(Self::Spatial),
            other => Err(Error::Config(format!("unknown routing strategy '{other}' (expected td, avg or spatial)"))),
        }
    }
}

/// Scores for each expert given its output on one video.
/// `task_ids[k]` names the task of `outputs[k]`.
pub fn route_scores(
    strategy: RoutingStrategy,
    vbar: &[f64],
    outputs: &[Vec<f64>],
    task_ids: &[usize],
    temporal: &AnchorPool,
    spatial: &AnchorPool,
) -> Result<Vec<f64>> {
    if outputs.len() != task_ids.len() {
        return Err(Error::dim(
            "route",
            format!("{} outputs for {} experts", outputs.len(), task_ids.len()),
        ));
    }
    if outputs.is_empty() {
        return Err(Error::input("route", "empty expert bank"));
    }
    match strategy {
        RoutingStrategy::Td => outputs
            .iter()
            .zip(task_ids)
            .map(|(vst, &t)| temporal.max_cosine(t, &temporal_component(vst, vbar)?))
            .collect(),
        RoutingStrategy::Avg => Ok(vec![1.0 / outputs.len() as f64; outputs.len()]),
        RoutingStrategy::Spatial => task_ids.iter().map(|&t| spatial.max_cosine(t, vbar)).collect(),
    }
}

/// Temporal-decomposition routing for one video against the whole bank.
pub fn route(frames: &[FrameFeature], bank: &[ExpertParams], anchors: &AnchorPool) -> Result<Vec<f64>> {
    let vbar = spatial_mean(frames)?;
    let outputs = bank
        .iter()
        .map(|e| encode_spatiotemporal(frames, e).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<usize> = bank.iter().map(|e| e.task_id).collect();
    route_scores(RoutingStrategy::Td, &vbar, &outputs, &tasks, anchors, &AnchorPool::default())
}

/// `V = vbar + Σ_k r_k V_k`.
pub fn fuse(vbar: &[f64], outputs: &[Vec<f64>], scores: &[f64]) -> Result<Vec<f64>> {
    if outputs.len() != scores.len() {
        return Err(Error::dim(
            "fuse",
            format!("{} outputs, {} scores", outputs.len(), scores.len()),
        ));
    }
    let mut v = vbar.to_vec();
    for (out, r) in outputs.iter().zip(scores) {
        if out.len() != v.len() {
            return Err(Error::dim("fuse", format!("output width {} vs {}", out.len(), v.len())));
        }
        for (a, b) in v.iter_mut().zip(out) {
            *a += r * b;
        }
    }
    Ok(v)
}

/// Index of the highest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Class whose text embedding has the highest cosine with `v`; lowest id on ties.
pub fn classify(v: &[f64], texts: &BTreeMap<usize, Vec<f64>>) -> Result<usize> {
    if texts.is_empty() {
        return Err(Error::input("classify", "no seen classes"));
    }
    if norm(v) == 0.0 {
        return Err(Error::DegenerateVector { op: "classify" });
    }
    let mut best: Option<(usize, f64)> = None;
    for (&c, t) in texts {
        let s = cosine(v, t)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok(best.map(|(c, _)| c).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::config::ModelConfig;
    use crate::rng::SeedStream;

    fn random_frames(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = SeedStream::new(seed).rng();
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn spatial_mean_examples() {
        let v = vec![0.3, -1.2];
        assert_eq!(spatial_mean(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
        assert_eq!(spatial_mean(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
        assert!(spatial_mean(&[]).is_err());
    }

    #[test]
    fn temporal_component_examples() {
        let v = vec![1.0, 2.0];
        assert_eq!(temporal_component(&v, &v).unwrap(), vec![0.0, 0.0]);
        assert!(temporal_component(&v, &[1.0]).is_err());
        let shifted = temporal_component(&[4.0, 5.0], &[3.0, 3.0]).unwrap();
        assert_eq!(shifted, temporal_component(&[1.0, 2.0], &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn linear_attention_decomposition() {
        let mut rng = SeedStream::new(21).rng();
        let d = 6;
        let nf = 5;
        let vbar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut eps: Vec<Vec<f64>> = (0..nf).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for j in 0..d {
            let m = eps.iter().map(|e| e[j]).sum::<f64>() / nf as f64;
            eps.iter_mut().for_each(|e| e[j] -= m);
        }
        let frames: Vec<Vec<f64>> = eps.iter().map(|e| e.iter().zip(&vbar).map(|(a, b)| a + b).collect()).collect();
        let raw: Vec<f64> = (0..nf).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let vst = weighted_frame_sum(&frames, &a).unwrap();
        let tem = temporal_component(&vst, &spatial_mean(&frames).unwrap()).unwrap();
        for j in 0..d {
            let expected: f64 = (0..nf).map(|i| (a[i] - 1.0 / nf as f64) * eps[i][j]).sum();
            assert!((tem[j] - expected).abs() < 1e-10);
        }
    }

    fn pool(entries: &[(usize, usize, Vec<f64>)]) -> AnchorPool {
        let mut p = AnchorPool::default();
        for (task, class, a) in entries {
            p.insert_task(*task, BTreeMap::from([(*class, a.clone())])).unwrap();
        }
        p
    }

    #[test]
    fn routing_examples() {
        let p = pool(&[(0, 0, vec![1.0, 0.0]), (1, 1, vec![0.0, 1.0])]);
        let vbar = vec![0.0, 0.0];
        let s = route_scores(RoutingStrategy::Td, &vbar, &[vec![1.0, 0.0]], &[0], &p, &p).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let s = route_scores(RoutingStrategy::Td, &vbar, &[vec![0.0, 3.0]], &[0], &p, &p).unwrap();
        assert_eq!(s[0], 0.0);
        let dir = vec![0.9, 0.1];
        let s = route_scores(RoutingStrategy::Td, &vbar, &[dir.clone(), dir], &[0, 1], &p, &p).unwrap();
        assert_eq!(argmax(&s), Some(0));
        let s = route_scores(RoutingStrategy::Td, &[1.0, 1.0], &[vec![1.0, 1.0]], &[0], &p, &p).unwrap();
        assert_eq!(s, vec![0.0]);
        let s = route_scores(RoutingStrategy::Avg, &vbar, &vec![vec![1.0, 0.0]; 3], &[0, 1, 0], &p, &p).unwrap();
        assert_eq!(s, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn anchor_pool_rejects_duplicates() {
        let mut p = pool(&[(0, 3, vec![1.0])]);
        assert!(p.insert_task(1, BTreeMap::from([(3, vec![2.0])])).is_err());
        assert_eq!(p.anchors[&3], vec![1.0]);
        assert!(p.max_cosine(7, &[1.0]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let vbar = vec![1.0, -1.0];
        let outs = vec![vec![0.5, 0.5], vec![2.0, 0.0]];
        assert_eq!(fuse(&vbar, &outs, &[0.0, 0.0]).unwrap(), vbar);
        assert_eq!(fuse(&vbar, &outs[..1], &[1.0]).unwrap(), vec![1.5, -0.5]);
        let r = [0.3, -0.7];
        let once = fuse(&vbar, &outs, &r).unwrap();
        let twice = fuse(&vbar, &outs, &[0.6, -1.4]).unwrap();
        for j in 0..2 {
            assert!((twice[j] - (vbar[j] + 2.0 * (once[j] - vbar[j]))).abs() < 1e-12);
        }
        assert!(fuse(&vbar, &outs, &[1.0]).is_err());
    }

    #[test]
    fn classify_examples() {
        let texts = BTreeMap::from([(4, vec![1.0, 0.0]), (9, vec![0.6, 0.8])]);
        assert_eq!(classify(&[0.6, 0.8], &texts).unwrap(), 9);
        assert_eq!(classify(&[1.0, 0.0], &texts).unwrap(), 4);
        assert!(matches!(classify(&[0.0, 0.0], &texts), Err(Error::DegenerateVector { .. })));
        let tied = BTreeMap::from([(2, vec![1.0, 0.0]), (5, vec![1.0, 0.0])]);
        assert_eq!(classify(&[1.0, 0.2], &tied).unwrap(), 2);
    }

    #[test]
    fn anchors_from_single_samples() {
        let cfg = ModelConfig {
            d_vt: 4,
            ..Default::default()
        };
        let expert = ExpertParams::new(&cfg, 0, SeedStream::new(2));
        let a = random_frames(1, 8, 4);
        let b = random_frames(2, 8, 4);
        let anchors = build_anchors(&[(0, a.clone()), (1, b)], &[0, 1], &expert).unwrap();
        let (vst, _) = encode_spatiotemporal(&a, &expert).unwrap();
        assert_eq!(anchors[&0], temporal_component(&vst, &spatial_mean(&a).unwrap()).unwrap());
        assert!(build_anchors(&[(0, a)], &[0, 1], &expert).is_err());
        let bank = [expert];
        let mut p = AnchorPool::default();
        p.insert_task(0, anchors.clone()).unwrap();
        let r = route(&random_frames(1, 8, 4), &bank, &p).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decomposition_reconstructs(seed in any::<u64>(), d in 1usize..10) {
            let f = random_frames(seed, 2, d);
            let tem = temporal_component(&f[0], &f[1]).unwrap();
            for j in 0..d {
                prop_assert_eq!(tem[j] + f[1][j], f[0][j]);
            }
        }

        #[test]
        fn mean_ignores_frame_order(seed in any::<u64>(), n in 1usize..9) {
            let f = random_frames(seed, n, 3);
            let mut r = f.clone();
            r.reverse();
            let a = spatial_mean(&f).unwrap();
            let b = spatial_mean(&r).unwrap();
            for j in 0..3 {
                prop_assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_are_bounded(seed in any::<u64>(), k in 1usize..4) {
            let anchors = random_frames(seed, k, 4);
            let mut p = AnchorPool::default();
            for (t, a) in anchors.into_iter().enumerate() {
                p.insert_task(t, BTreeMap::from([(t, a)])).unwrap();
            }
            let outs = random_frames(seed ^ 9, k, 4);
            let vbar = random_frames(seed ^ 5, 1, 4).remove(0);
            let tasks: Vec<usize> = (0..k).collect();
            for strategy in [RoutingStrategy::Td, RoutingStrategy::Spatial, RoutingStrategy::Avg] {
                let s = route_scores(strategy, &vbar, &outs, &tasks, &p, &p).unwrap();
                prop_assert_eq!(s.len(), k);
                prop_assert!(s.iter().all(|r| r.abs() <= 1.0));
            }
        }

        #[test]
        fn classify_matches_brute_force_and_scale(seed in any::<u64>(), c in 1usize..6, scale in 0.01f64..100.0) {
            let ts = random_frames(seed, c, 3);
            let texts: BTreeMap<usize, Vec<f64>> = ts.into_iter().enumerate().collect();
            let v = random_frames(seed ^ 7, 1, 3).remove(0);
            let sims: Vec<f64> = texts.values().map(|t| cosine(&v, t).unwrap()).collect();
            let brute = argmax(&sims).unwrap();
            prop_assert_eq!(classify(&v, &texts).unwrap(), brute);
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            prop_assert_eq!(classify(&scaled, &texts).unwrap(), brute);
        }
    }
}
