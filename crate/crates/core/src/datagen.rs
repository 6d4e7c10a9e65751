//! Seeded synthetic task streams.
//!
//! Every class owns a static token pattern and a zero-mean temporal signature.
//! The static frame-[CLS] row carries `σ T_c + κ T̄_b` through an orthonormal
//! lift `G` (`d x d_vt`), where `T̄_b` is the mean text embedding of the class's
//! task, so classes of one task share most of their appearance. It sits on top
//! of a shared background and a class-specific nuisance pattern; both of the
//! latter live in the orthogonal complement of `G`, so `row0 · G` recovers
//! `σ T_c + κ T̄_b` exactly.
//! `G = polar(W_proj) · Q`, where `Q = polar(I + θ Z)` is a random rotation whose
//! distance from the identity grows with `θ` (`misalignment`). At `θ = 0` the
//! untuned backbone maps text content to a mildly distorted copy of the text
//! embedding; larger `θ` weakens that zero-shot alignment.
//! Frame `i` of a video is `static + a · s_i · u + noise`, where `s` is a
//! centred sinusoid over frame index, `u` a unit direction and `a` the sample's
//! jittered amplitude.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::backbone::FrozenBackbone;
use crate::tensor::{cosine, dot, matmul, norm, Matrix};

pub const MAX_RETRIES: usize = 1000;
pub const TEXT_MAX_COSINE: f64 = 0.5;
pub const SIGNATURE_MAX_COSINE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Std of the iid Gaussian noise added to every token entry.
    pub noise_std: f64,
    /// Weight `σ` of the class text embedding in the frame-[CLS] row.
    pub semantic_scale: f64,
    /// Weight `κ` of the task's mean text embedding in the frame-[CLS] row.
    pub task_semantic_scale: f64,
    /// Norm of each class-specific nuisance row.
    pub static_scale: f64,
    /// When positive, nuisance rows of every class are drawn from one shared
    /// subspace of this dimension; `0` draws them from the whole complement.
    pub nuisance_rank: usize,
    /// Norm of each shared background row.
    pub background_scale: f64,
    /// Peak per-frame norm of the temporal residual.
    pub temporal_amp: f64,
    /// Per-sample amplitude is drawn from `[1 - j, 1 + j]`.
    pub amplitude_jitter: f64,
    /// Rotation strength between the text lift and the frozen projection.
    pub misalignment: f64,
    /// Expected cosine between text embeddings of classes in the same task.
    pub text_coherence: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            train_per_class: 24,
            eval_per_class: 8,
            noise_std: 0.25,
            semantic_scale: 0.3,
            task_semantic_scale: 2.4,
            static_scale: 1.0,
            nuisance_rank: 0,
            background_scale: 1.0,
            temporal_amp: 2.0,
            amplitude_jitter: 0.2,
            misalignment: 0.7,
            text_coherence: 0.4,
        }
    }
}

impl StreamConfig {
    pub fn num_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("stream.tasks", self.tasks),
            ("stream.classes_per_task", self.classes_per_task),
            ("stream.train_per_class", self.train_per_class),
            ("stream.eval_per_class", self.eval_per_class),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("stream.noise_std", self.noise_std),
            ("stream.semantic_scale", self.semantic_scale),
            ("stream.task_semantic_scale", self.task_semantic_scale),
            ("stream.static_scale", self.static_scale),
            ("stream.background_scale", self.background_scale),
            ("stream.temporal_amp", self.temporal_amp),
            ("stream.misalignment", self.misalignment),
            ("stream.text_coherence", self.text_coherence),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            problems.push(format!(
                "stream.amplitude_jitter must be in [0, 1) (got {})",
                self.amplitude_jitter
            ));
        }
        if !(0.0..1.0).contains(&self.text_coherence) {
            problems.push(format!(
                "stream.text_coherence must be in [0, 1) (got {})",
                self.text_coherence
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    /// `(n_patches + 1) x d`, frame [CLS] first.
    pub static_tokens: Matrix,
    /// Unit direction in token space.
    pub direction: Vec<f64>,
    /// Per-frame amplitude, zero-sum over frames.
    pub schedule: Vec<f64>,
}

impl ClassPrototype {
    /// Flattened `schedule ⊗ direction`.
    pub fn signature(&self) -> Vec<f64> {
        self.schedule
            .iter()
            .flat_map(|s| self.direction.iter().map(move |u| s * u))
            .collect()
    }

    /// Residual added to every token of frame `i`.
    pub fn residual(&self, frame: usize) -> Vec<f64> {
        self.direction.iter().map(|u| self.schedule[frame] * u).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub label: usize,
    pub frames: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<SyntheticVideo>,
    pub eval: Vec<SyntheticVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub seed: u64,
    pub config: StreamConfig,
    pub model: ModelConfig,
    /// `d x d_vt` with orthonormal columns.
    pub lift: Matrix,
    pub texts: BTreeMap<usize, Vec<f64>>,
    pub prototypes: Vec<ClassPrototype>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().find(|t| t.classes.contains(&class)).map(|t| t.id)
    }

    /// Text embeddings for the classes of tasks `0..=upto`.
    pub fn seen_texts(&self, upto: usize) -> BTreeMap<usize, Vec<f64>> {
        self.tasks[..=upto]
            .iter()
            .flat_map(|t| t.classes.iter().map(|c| (*c, self.texts[c].clone())))
            .collect()
    }

    /// Checks the structural contracts of a stream, e.g. one loaded from disk.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.model.validate()?;
        let mut seen = BTreeMap::new();
        for (b, task) in self.tasks.iter().enumerate() {
            if task.id != b {
                return Err(Error::input("TaskStream", format!("task {b} has id {}", task.id)));
            }
            for c in &task.classes {
                if seen.insert(*c, b).is_some() {
                    return Err(Error::input("TaskStream", format!("class {c} appears in two tasks")));
                }
                let t = self
                    .texts
                    .get(c)
                    .ok_or_else(|| Error::input("TaskStream", format!("class {c} has no text embedding")))?;
                if t.len() != self.model.d_vt {
                    return Err(Error::dim("TaskStream", format!("text for class {c} has width {}", t.len())));
                }
            }
            for v in task.train.iter().chain(&task.eval) {
                if !task.classes.contains(&v.label) {
                    return Err(Error::input("TaskStream", format!("task {b} holds a video of class {}", v.label)));
                }
                if v.frames.len() != self.model.n_frames {
                    return Err(Error::dim("TaskStream", format!("video with {} frames", v.frames.len())));
                }
                if v
                    .frames
                    .iter()
                    .any(|f| f.shape() != (self.model.tokens_per_frame(), self.model.d))
                {
                    return Err(Error::dim("TaskStream", "frame token matrix has the wrong shape"));
                }
            }
        }
        Ok(())
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vectors with pairwise cosine at most 0.5, drawn class by class with
/// at most [`MAX_RETRIES`] redraws each.
pub fn generate_text_embeddings(seed: u64, class_ids: &[usize], d_vt: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
    let groups: Vec<Vec<usize>> = class_ids.iter().map(|&c| vec![c]).collect();
    generate_grouped_text_embeddings(seed, &groups, 0.0, d_vt)
}

/// Like [`generate_text_embeddings`], but each group of classes shares a topic
/// direction `τ`: a draw is `sqrt(ρ) τ + sqrt(1 - ρ) ξ`, normalized, with `ξ`
/// class-specific and `ρ = coherence`. Same-group cosines then concentrate
/// near `ρ`, still subject to the global 0.5 ceiling.
pub fn generate_grouped_text_embeddings(
    seed: u64,
    groups: &[Vec<usize>],
    coherence: f64,
    d_vt: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if d_vt == 0 {
        return Err(Error::input("generate_text_embeddings", "d_vt must be positive"));
    }
    if !(0.0..1.0).contains(&coherence) {
        return Err(Error::input("generate_text_embeddings", format!("coherence must lie in [0, 1), got {coherence}")));
    }
    let root = SeedStream::new(seed).split("text");
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (g, group) in groups.iter().enumerate() {
        let topic = unit_gaussian(d_vt, &mut root.split_index("topic", g as u64).rng());
        for &c in group {
            let mut rng = root.split_index("class", c as u64).rng();
            let mut worst = f64::NAN;
            let mut accepted = None;
            for _ in 0..MAX_RETRIES {
                let mut v = unit_gaussian(d_vt, &mut rng);
                if coherence > 0.0 {
                    v.iter_mut()
                        .zip(&topic)
                        .for_each(|(x, t)| *x = (1.0 - coherence).sqrt() * *x + coherence.sqrt() * t);
                    let n = norm(&v);
                    v.iter_mut().for_each(|x| *x /= n);
                }
                worst = out.values().map(|t| dot(t, &v)).fold(f64::NEG_INFINITY, f64::max);
                if out.is_empty() || worst <= TEXT_MAX_COSINE {
                    accepted = Some(v);
                    break;
                }
            }
            let v = accepted.ok_or_else(|| {
                Error::Generation(format!(
                    "no text embedding for class {c} within cosine {TEXT_MAX_COSINE} of {} others after {MAX_RETRIES} draws (last max cosine {worst:.3}, d_vt = {d_vt})",
                    out.len()
                ))
            })?;
            out.insert(c, v);
        }
    }
    Ok(out)
}

/// Orthonormal polar factor `P (PᵀP)^{-1/2}` by Newton-Schulz iteration.
pub fn polar_factor(p: &Matrix) -> Result<Matrix> {
    if p.cols() > p.rows() || p.is_empty() {
        return Err(Error::Generation(format!(
            "cannot orthonormalize a {}x{} matrix",
            p.rows(),
            p.cols()
        )));
    }
    let fro = norm(p.data());
    if fro == 0.0 {
        return Err(Error::Generation("projection matrix is zero".into()));
    }
    let mut x = p.clone();
    x.scale(1.0 / fro);
    let k = p.cols();
    for _ in 0..200 {
        let xtx = matmul(&x.transpose(), &x)?;
        let err = xtx.max_abs_diff(&Matrix::identity(k));
        if err < 1e-14 {
            return Ok(x);
        }
        let mut step = Matrix::identity(k);
        step.scale(3.0);
        step.add_scaled(&xtx, -1.0);
        x = matmul(&x, &step)?;
        x.scale(0.5);
    }
    Err(Error::Generation("projection matrix is rank deficient".into()))
}

fn semantic_lift(root: &SeedStream, cfg: &StreamConfig, model: &ModelConfig) -> Result<Matrix> {
    let aligned = polar_factor(&FrozenBackbone::new(model).proj.value)?;
    let mut rng = root.split("misalignment").rng();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let k = model.d_vt;
    let mut q = Matrix::from_fn(k, k, |_, _| cfg.misalignment * normal.sample(&mut rng) / (k as f64).sqrt());
    q.add_assign(&Matrix::identity(k));
    let q = polar_factor(&q)?;
    matmul(&aligned, &q.transpose())
}

/// Removes the component of `v` inside the column space of `lift`.
fn project_out(v: &mut [f64], lift: &Matrix) {
    for j in 0..lift.cols() {
        let col: Vec<f64> = (0..lift.rows()).map(|i| lift.get(i, j)).collect();
        let p = dot(v, &col);
        v.iter_mut().zip(&col).for_each(|(a, b)| *a -= p * b);
    }
}

fn scaled_complement<R: Rng + ?Sized>(d: usize, lift: &Matrix, scale: f64, rng: &mut R) -> Vec<f64> {
    let mut v = unit_gaussian(d, rng);
    project_out(&mut v, lift);
    let n = norm(&v);
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x *= scale / n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

fn draw_nuisance<R: Rng + ?Sized>(basis: &[Vec<f64>], d: usize, lift: &Matrix, scale: f64, rng: &mut R) -> Vec<f64> {
    if basis.is_empty() {
        return scaled_complement(d, lift, scale, rng);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v = vec![0.0; d];
    for b in basis {
        let g = normal.sample(rng);
        v.iter_mut().zip(b).for_each(|(a, x)| *a += g * x);
    }
    let n = norm(&v);
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x *= scale / n);
    }
    v
}

fn centred_schedule(n_frames: usize, freq: f64, phase: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_frames)
        .map(|i| (2.0 * PI * freq * i as f64 / n_frames as f64 + phase).sin())
        .collect();
    let mean = raw.iter().sum::<f64>() / n_frames as f64;
    raw.into_iter().map(|v| v - mean).collect()
}

fn signature_cosine(a: &ClassPrototype, b: &ClassPrototype) -> f64 {
    let (sa, sb) = (a.signature(), b.signature());
    if norm(&sa) == 0.0 || norm(&sb) == 0.0 {
        return 0.0;
    }
    dot(&sa, &sb) / (norm(&sa) * norm(&sb))
}

fn generate_prototypes(
    root: SeedStream,
    cfg: &StreamConfig,
    model: &ModelConfig,
    lift: &Matrix,
    texts: &BTreeMap<usize, Vec<f64>>,
) -> Result<Vec<ClassPrototype>> {
    let d = model.d;
    let tokens = model.tokens_per_frame();
    let mut bg_rng = root.split("background").rng();
    let background: Vec<Vec<f64>> = (0..tokens)
        .map(|_| scaled_complement(d, lift, cfg.background_scale, &mut bg_rng))
        .collect();
    let mut out: Vec<ClassPrototype> = Vec::with_capacity(texts.len());
    let k = model.d_vt;
    let task_means: Vec<Vec<f64>> = (0..cfg.tasks)
        .map(|b| {
            let mut m = vec![0.0; k];
            for c in b * cfg.classes_per_task..(b + 1) * cfg.classes_per_task {
                m.iter_mut().zip(&texts[&c]).for_each(|(a, t)| *a += t / cfg.classes_per_task as f64);
            }
            m
        })
        .collect();
    let mut basis_rng = root.split("nuisance_basis").rng();
    let basis: Vec<Vec<f64>> = (0..cfg.nuisance_rank)
        .map(|_| scaled_complement(d, lift, 1.0, &mut basis_rng))
        .collect();
    for (&c, text) in texts {
        let mut rng = root.split_index("prototype", c as u64).rng();
        let content: Vec<f64> = text
            .iter()
            .zip(&task_means[c / cfg.classes_per_task])
            .map(|(t, m)| cfg.semantic_scale * t + cfg.task_semantic_scale * m)
            .collect();
        let mut static_tokens = Matrix::zeros(tokens, d);
        for (t, bg) in background.iter().enumerate() {
            let nuisance = draw_nuisance(&basis, d, lift, cfg.static_scale, &mut rng);
            for j in 0..d {
                static_tokens.set(t, j, bg[j] + nuisance[j]);
            }
        }
        let semantic: Vec<f64> = (0..d).map(|i| dot(lift.row(i), &content)).collect();
        static_tokens.row_mut(0).iter_mut().zip(&semantic).for_each(|(a, b)| *a += b);

        let mut accepted = None;
        let mut worst = f64::NAN;
        for _ in 0..MAX_RETRIES {
            let freq = f64::from(rng.random_range(1..=3u32));
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut schedule = centred_schedule(model.n_frames, freq, phase);
            let peak = schedule.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                schedule.iter_mut().for_each(|v| *v *= cfg.temporal_amp / peak);
            }
            let candidate = ClassPrototype {
                class_id: c,
                static_tokens: static_tokens.clone(),
                direction: unit_gaussian(d, &mut rng),
                schedule,
            };
            worst = out
                .iter()
                .map(|p| signature_cosine(p, &candidate).abs())
                .fold(0.0, f64::max);
            if worst <= SIGNATURE_MAX_COSINE {
                accepted = Some(candidate);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            Error::Generation(format!(
                "no temporal signature for class {c} within cosine {SIGNATURE_MAX_COSINE} of {} others after {MAX_RETRIES} draws (last worst {worst:.3})",
                out.len()
            ))
        })?);
    }
    Ok(out)
}

fn sample_video<R: Rng + ?Sized>(proto: &ClassPrototype, cfg: &StreamConfig, rng: &mut R) -> SyntheticVideo {
    let scale = 1.0 + cfg.amplitude_jitter * rng.random_range(-1.0..=1.0);
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise std validated");
    let (rows, cols) = proto.static_tokens.shape();
    let frames = (0..proto.schedule.len())
        .map(|i| {
            let residual = proto.residual(i);
            Matrix::from_fn(rows, cols, |r, j| {
                proto.static_tokens.get(r, j) + scale * residual[j] + noise.sample(rng)
            })
        })
        .collect();
    SyntheticVideo {
        label: proto.class_id,
        frames,
    }
}

/// Deterministic stream of `cfg.tasks` tasks with disjoint, consecutive class ids.
pub fn generate_stream(seed: u64, cfg: &StreamConfig, model: &ModelConfig) -> Result<TaskStream> {
    cfg.validate()?;
    model.validate()?;
    if model.d_vt > model.d {
        return Err(Error::Generation(format!(
            "the semantic lift needs d_vt ({}) <= d ({})",
            model.d_vt, model.d
        )));
    }
    let root = SeedStream::new(seed).split("stream");
    let class_ids: Vec<usize> = (0..cfg.num_classes()).collect();
    let groups: Vec<Vec<usize>> = class_ids.chunks(cfg.classes_per_task).map(<[usize]>::to_vec).collect();
    let texts = generate_grouped_text_embeddings(seed, &groups, cfg.text_coherence, model.d_vt)?;
    let lift = semantic_lift(&root, cfg, model)?;
    let prototypes = generate_prototypes(root, cfg, model, &lift, &texts)?;
    let tasks = (0..cfg.tasks)
        .map(|b| {
            let classes: Vec<usize> = (b * cfg.classes_per_task..(b + 1) * cfg.classes_per_task).collect();
            let mut train = Vec::new();
            let mut eval = Vec::new();
            for &c in &classes {
                let mut rng = root.split_index("samples", c as u64).rng();
                let proto = &prototypes[c];
                train.extend((0..cfg.train_per_class).map(|_| sample_video(proto, cfg, &mut rng)));
                eval.extend((0..cfg.eval_per_class).map(|_| sample_video(proto, cfg, &mut rng)));
            }
            Task {
                id: b,
                classes,
                train,
                eval,
            }
        })
        .collect();
    Ok(TaskStream {
        seed,
        config: cfg.clone(),
        model: model.clone(),
        lift,
        texts,
        prototypes,
        tasks,
    })
}

fn mean_frames(frames: &[Matrix]) -> Matrix {
    let mut m = Matrix::zeros(frames[0].rows(), frames[0].cols());
    for f in frames {
        m.add_assign(f);
    }
    m.scale(1.0 / frames.len() as f64);
    m
}

/// Frame-[CLS] rows minus their mean over frames, flattened frame-major.
pub fn temporal_residuals(video: &SyntheticVideo) -> Vec<f64> {
    let mean = mean_frames(&video.frames);
    video
        .frames
        .iter()
        .flat_map(|f| f.row(0).iter().zip(mean.row(0)).map(|(a, b)| a - b).collect::<Vec<_>>())
        .collect()
}

/// Fraction of classes whose mean training clip, read out through the lift,
/// is nearest (by cosine) to its own text embedding.
pub fn text_oracle_accuracy(stream: &TaskStream) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for task in &stream.tasks {
        for &c in &task.classes {
            let clips: Vec<Matrix> = task
                .train
                .iter()
                .filter(|v| v.label == c)
                .map(|v| mean_frames(&v.frames))
                .collect();
            let class_mean = mean_frames(&clips);
            let readout: Vec<f64> = (0..stream.lift.cols())
                .map(|j| (0..stream.lift.rows()).map(|i| class_mean.get(0, i) * stream.lift.get(i, j)).sum())
                .collect();
            let pred = nearest(&readout, &stream.texts)?;
            hits += usize::from(pred == c);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of classes whose average temporal residual is nearest (by cosine)
/// to its own signature among all class signatures.
pub fn signature_oracle_accuracy(stream: &TaskStream) -> Result<f64> {
    let signatures: BTreeMap<usize, Vec<f64>> = stream
        .prototypes
        .iter()
        .map(|p| {
            let sig: Vec<f64> = (0..p.schedule.len()).flat_map(|i| p.residual(i)).collect();
            (p.class_id, sig)
        })
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for task in &stream.tasks {
        for &c in &task.classes {
            let residuals: Vec<Vec<f64>> = task
                .train
                .iter()
                .filter(|v| v.label == c)
                .map(temporal_residuals)
                .collect();
            let mut avg = vec![0.0; residuals[0].len()];
            for r in &residuals {
                avg.iter_mut().zip(r).for_each(|(a, b)| *a += b / residuals.len() as f64);
            }
            hits += usize::from(nearest(&avg, &signatures)? == c);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn nearest(v: &[f64], refs: &BTreeMap<usize, Vec<f64>>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&c, r) in refs {
        let s = cosine(v, r)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::input("nearest", "no references"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_model() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = StreamConfig {
            train_per_class: 3,
            eval_per_class: 2,
            ..Default::default()
        };
        let a = generate_stream(7, &cfg, &small_model()).unwrap();
        let b = generate_stream(7, &cfg, &small_model()).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(8, &cfg, &small_model()).unwrap();
        assert_ne!(a.tasks[0].train[0], c.tasks[0].train[0]);
    }

    #[test]
    fn default_layout_has_disjoint_tasks() {
        let s = generate_stream(7, &StreamConfig::default(), &small_model()).unwrap();
        s.validate().unwrap();
        assert_eq!(s.tasks.len(), 5);
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert_eq!(all.len(), 10);
        all.dedup();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in &s.tasks {
            assert_eq!(t.train.len(), 48);
            assert_eq!(t.eval.len(), 16);
            assert!(t.train.iter().chain(&t.eval).all(|v| t.classes.contains(&v.label)));
        }
    }

    #[test]
    fn zero_noise_samples_differ_only_in_temporal_amplitude() {
        let cfg = StreamConfig {
            noise_std: 0.0,
            train_per_class: 4,
            eval_per_class: 1,
            tasks: 1,
            ..Default::default()
        };
        let s = generate_stream(3, &cfg, &small_model()).unwrap();
        let proto = &s.prototypes[0];
        for v in s.tasks[0].train.iter().filter(|v| v.label == 0) {
            let mean = mean_frames(&v.frames);
            assert!(mean.max_abs_diff(&proto.static_tokens) < 1e-12);
            let r = temporal_residuals(v);
            let sig: Vec<f64> = (0..proto.schedule.len()).flat_map(|i| proto.residual(i)).collect();
            let c = cosine(&r, &sig).unwrap();
            assert!((c - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prototype_contracts() {
        let s = generate_stream(7, &StreamConfig::default(), &small_model()).unwrap();
        for p in &s.prototypes {
            let total: f64 = p.schedule.iter().sum();
            assert!(total.abs() < 1e-12);
            let resid_sum: Vec<f64> = (0..s.model.d)
                .map(|j| (0..p.schedule.len()).map(|i| p.residual(i)[j]).sum())
                .collect();
            assert!(norm(&resid_sum) < 1e-12);
        }
        for (i, a) in s.prototypes.iter().enumerate() {
            for b in &s.prototypes[i + 1..] {
                assert!(signature_cosine(a, b).abs() <= SIGNATURE_MAX_COSINE);
            }
        }
        let gtg = crate::tensor::matmul(&s.lift.transpose(), &s.lift).unwrap();
        assert!(gtg.max_abs_diff(&Matrix::identity(s.model.d_vt)) < 1e-12);
    }

    #[test]
    fn stream_is_solvable_by_oracles() {
        let s = generate_stream(7, &StreamConfig::default(), &small_model()).unwrap();
        assert_eq!(text_oracle_accuracy(&s).unwrap(), 1.0);
        assert_eq!(signature_oracle_accuracy(&s).unwrap(), 1.0);
    }

    #[test]
    fn ten_texts_fit_in_sixteen_dims() {
        let ids: Vec<usize> = (0..10).collect();
        let t = generate_text_embeddings(7, &ids, 16).unwrap();
        for (i, a) in t.values().enumerate() {
            for b in t.values().skip(i + 1) {
                assert!(dot(a, b) <= TEXT_MAX_COSINE);
            }
        }
        assert_eq!(t, generate_text_embeddings(7, &ids, 16).unwrap());
    }

    #[test]
    fn impossible_separation_reports_diagnostics() {
        let ids: Vec<usize> = (0..8).collect();
        let err = generate_text_embeddings(1, &ids, 1).unwrap_err().to_string();
        assert!(err.contains("class") && err.contains("draws"), "{err}");
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let cfg = StreamConfig {
            tasks: 0,
            ..Default::default()
        };
        assert!(matches!(generate_stream(1, &cfg, &small_model()), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn text_embeddings_are_unit(seed in any::<u64>(), n in 1usize..12) {
            let ids: Vec<usize> = (0..n).collect();
            let t = generate_text_embeddings(seed, &ids, 16).unwrap();
            for v in t.values() {
                prop_assert!((norm(v) - 1.0).abs() < 1e-12);
            }
        }
    }
}
