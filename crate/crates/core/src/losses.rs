//! Masked symmetric video/text contrastive losses.
//!
//! `v2t = -(1/N) Σ_i log( Σ_j M_ij e^{S_ij/τ} / (Σ_j e^{S_ij/τ} + ε) )`, and `t2v` is
//! the same over columns. Exponentials are evaluated after subtracting the row
//! (column) maximum, with `ε` rescaled by the same factor, which leaves the value
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Division guard inside the log-ratio.
    pub eps: f64,
    /// Weight on the distillation term.
    pub w: f64,
    /// Similarities are divided by this before exponentiation; 1 gives the literal equations.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            w: 1e4,
            temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            problems.push(format!("train.eps must be > 0 (got {})", self.eps));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            problems.push(format!("train.w must be >= 0 (got {})", self.w));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("train.temperature must be > 0 (got {})", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `M_ij = 1` iff `labels[i] == labels[j]`.
pub fn label_mask(labels: &[usize]) -> Matrix {
    let n = labels.len();
    Matrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 })
}

/// `S_ij = cos(V_i, T_j)`.
pub fn similarity_matrix(videos: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Matrix> {
    let mut s = Matrix::zeros(videos.len(), texts.len());
    for (i, v) in videos.iter().enumerate() {
        for (j, t) in texts.iter().enumerate() {
            s.set(i, j, crate::tensor::cosine(v, t)?);
        }
    }
    Ok(s)
}

fn check_shapes(op: &'static str, s: &Matrix, m: &Matrix) -> Result<()> {
    if s.shape() != m.shape() {
        return Err(Error::dim(
            op,
            format!("S is {:?}, M is {:?}", s.shape(), m.shape()),
        ));
    }
    if s.rows() == 0 {
        return Err(Error::input(op, "empty batch"));
    }
    Ok(())
}

/// Row-direction loss and its gradient with respect to `S`.
fn row_loss(s: &Matrix, m: &Matrix, cfg: &LossConfig, axis: &'static str) -> Result<(f64, Matrix)> {
    let n = s.rows();
    let tau = cfg.temperature;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, s.cols());
    for i in 0..n {
        let srow = s.row(i);
        let mrow = m.row(i);
        if !mrow.iter().any(|&v| v != 0.0) {
            return Err(Error::MaskedOut { axis, index: i });
        }
        let max = srow.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let e: Vec<f64> = srow.iter().map(|&v| (v / tau - max).exp()).collect();
        let pos: f64 = e.iter().zip(mrow).map(|(a, b)| a * b).sum();
        let all: f64 = e.iter().sum();
        let denom = all + cfg.eps * (-max).exp();
        loss -= pos.ln() - denom.ln();
        // d/dS_ij of -[log pos - log denom] = -(1/τ)(M_ij e_ij / pos - e_ij / denom)
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = -(mrow[j] * e[j] / pos - e[j] / denom) / tau / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn v2t_loss(s: &Matrix, m: &Matrix, cfg: &LossConfig) -> Result<f64> {
    check_shapes("v2t_loss", s, m)?;
    Ok(row_loss(s, m, cfg, "row")?.0)
}

pub fn t2v_loss(s: &Matrix, m: &Matrix, cfg: &LossConfig) -> Result<f64> {
    check_shapes("t2v_loss", s, m)?;
    Ok(row_loss(&s.transpose(), &m.transpose(), cfg, "column")?.0)
}

pub fn symmetric_contrastive(s: &Matrix, m: &Matrix, cfg: &LossConfig) -> Result<f64> {
    Ok(0.5 * (v2t_loss(s, m, cfg)? + t2v_loss(s, m, cfg)?))
}

/// Symmetric loss and `dL/dS`.
pub fn symmetric_contrastive_grad(s: &Matrix, m: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    check_shapes("symmetric_contrastive", s, m)?;
    let (lv, mut gv) = row_loss(s, m, cfg, "row")?;
    let (lt, gt) = row_loss(&s.transpose(), &m.transpose(), cfg, "column")?;
    gv.add_assign(&gt.transpose());
    gv.scale(0.5);
    Ok((0.5 * (lv + lt), gv))
}

/// Symmetric contrastive loss between a batch of video embeddings and the text
/// embeddings of their own labels, plus `dL/dV_i` for every video.
pub fn video_text_contrastive(
    videos: &[Vec<f64>],
    texts: &[Vec<f64>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if videos.len() != texts.len() || videos.len() != labels.len() {
        return Err(Error::dim(
            "video_text_contrastive",
            format!("{} videos, {} texts, {} labels", videos.len(), texts.len(), labels.len()),
        ));
    }
    let s = similarity_matrix(videos, texts)?;
    let m = label_mask(labels);
    let (loss, ds) = symmetric_contrastive_grad(&s, &m, cfg)?;
    // dS_ij/dV_i = T_j / (|V_i||T_j|) - S_ij V_i / |V_i|²
    let grads = videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let nv = norm(v);
            let mut g = vec![0.0; v.len()];
            for (j, t) in texts.iter().enumerate() {
                let d = ds.get(i, j);
                if d == 0.0 {
                    continue;
                }
                let nt = norm(t);
                let sij = dot(v, t) / (nv * nt);
                for k in 0..v.len() {
                    g[k] += d * (t[k] / (nv * nt) - sij * v[k] / (nv * nv));
                }
            }
            g
        })
        .collect();
    Ok((loss, grads))
}

/// Components of the overall objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spatiotemporal: f64,
    pub spatial: f64,
    /// `None` on the first task, when no previous model exists.
    pub distill: Option<f64>,
    pub total: f64,
}

/// `L_st + L_s + w · L_fssd`, where the distillation term is absent on the first task.
pub fn total_loss(l_st: f64, l_s: f64, l_fssd: Option<f64>, cfg: &LossConfig) -> f64 {
    l_st + l_s + l_fssd.map_or(0.0, |d| cfg.w * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use crate::rng::SeedStream;

    fn literal() -> LossConfig {
        LossConfig {
            eps: 1e-8,
            w: 1e4,
            temperature: 1.0,
        }
    }

    /// Direct evaluation of the row loss with no max shifting.
    fn v2t_oracle(s: &[Vec<f64>], m: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
        let n = s.len() as f64;
        -s.iter()
            .zip(m)
            .map(|(sr, mr)| {
                let num: f64 = sr.iter().zip(mr).map(|(a, b)| b * (a / tau).exp()).sum();
                let den: f64 = sr.iter().map(|a| (a / tau).exp()).sum::<f64>() + eps;
                (num / den).ln()
            })
            .sum::<f64>()
            / n
    }

    #[test]
    fn single_pair_closed_form() {
        for &s in &[-0.5, 0.0, 0.9] {
            let sm = Matrix::from_vec(1, 1, vec![s]).unwrap();
            let m = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
            let l = v2t_loss(&sm, &m, &literal()).unwrap();
            let expected = -(s.exp() / (s.exp() + 1e-8)).ln();
            assert!((l - expected).abs() < 1e-10);
            assert!((l - 1e-8 * (-s).exp()).abs() < 1e-15);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn full_mask_saturates() {
        let s = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.8]]).unwrap();
        let m = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert!(v2t_loss(&s, &m, &literal()).unwrap() < 1e-7);
    }

    #[test]
    fn identity_two_by_two_hand_case() {
        let s = Matrix::identity(2);
        let m = Matrix::identity(2);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0 + 1e-8)).ln();
        assert!((v2t_loss(&s, &m, &literal()).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn asymmetric_two_by_two_t2v_hand_case() {
        let sv = vec![vec![0.9, 0.1], vec![-0.3, 0.4]];
        let s = Matrix::from_rows(&sv).unwrap();
        let m = Matrix::identity(2);
        // columns: (0.9, -0.3) with positive 0.9; (0.1, 0.4) with positive 0.4
        let c0 = -(0.9f64.exp() / (0.9f64.exp() + (-0.3f64).exp() + 1e-8)).ln();
        let c1 = -(0.4f64.exp() / (0.1f64.exp() + 0.4f64.exp() + 1e-8)).ln();
        let expected = 0.5 * (c0 + c1);
        assert!((t2v_loss(&s, &m, &literal()).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn all_zero_mask_row_is_an_error() {
        let s = Matrix::identity(2);
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            v2t_loss(&s, &m, &literal()),
            Err(Error::MaskedOut { axis: "row", index: 1 })
        ));
        assert!(matches!(
            t2v_loss(&s, &m, &literal()),
            Err(Error::MaskedOut { axis: "column", index: 1 })
        ));
    }

    #[test]
    fn total_loss_rules() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.5, 0.5, None, &cfg), 2.0);
        let zero_w = LossConfig { w: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(1.5, 0.5, Some(3.0), &zero_w), 2.0);
        let l = total_loss(0.0, 0.0, Some(2e-4), &cfg);
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn masked_negative_monotonicity() {
        let mut s = Matrix::from_rows(&[vec![0.5, 0.4, 0.1], vec![0.2, 0.6, 0.3], vec![0.0, 0.1, 0.7]]).unwrap();
        let m = label_mask(&[0, 1, 2]);
        let cfg = LossConfig::default();
        let before = symmetric_contrastive(&s, &m, &cfg).unwrap();
        s.set(0, 1, 0.1);
        let after = symmetric_contrastive(&s, &m, &cfg).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn video_gradients_match_finite_differences() {
        let mut rng = SeedStream::new(5).rng();
        let labels = [0, 1, 0, 2];
        let texts_by_class: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let texts: Vec<Vec<f64>> = labels.iter().map(|&c| texts_by_class[c].clone()).collect();
        let videos: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let cfg = LossConfig::default();
        let (_, g) = video_text_contrastive(&videos, &texts, &labels, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..5 {
                let mut p = videos.clone();
                p[i][k] += h;
                let mut q = videos.clone();
                q[i][k] -= h;
                let fd = (video_text_contrastive(&p, &texts, &labels, &cfg).unwrap().0
                    - video_text_contrastive(&q, &texts, &labels, &cfg).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - g[i][k]).abs() / fd.abs().max(g[i][k].abs()).max(1e-8);
                assert!(rel < 1e-4, "i={i} k={k} fd={fd} an={}", g[i][k]);
            }
        }
    }

    fn random_case(seed: u64, n: usize) -> (Matrix, Matrix) {
        let mut rng = SeedStream::new(seed).rng();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let s = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (s, label_mask(&labels))
    }

    proptest! {
        #[test]
        fn transpose_duality(seed in any::<u64>(), n in 1usize..7) {
            let (s, m) = random_case(seed, n);
            let cfg = LossConfig::default();
            let a = t2v_loss(&s, &m, &cfg).unwrap();
            let b = v2t_loss(&s.transpose(), &m.transpose(), &cfg).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn matches_unshifted_oracle(seed in any::<u64>(), n in 1usize..6) {
            let (s, m) = random_case(seed, n);
            let rows = |x: &Matrix| (0..x.rows()).map(|i| x.row(i).to_vec()).collect::<Vec<_>>();
            let cfg = LossConfig::default();
            let oracle = v2t_oracle(&rows(&s), &rows(&m), cfg.temperature, cfg.eps);
            prop_assert!((v2t_loss(&s, &m, &cfg).unwrap() - oracle).abs() < 1e-10);
        }

        #[test]
        fn batch_permutation_equivariance(seed in any::<u64>(), n in 2usize..7) {
            let (s, m) = random_case(seed, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut SeedStream::new(seed).split("perm").rng());
            let ps = Matrix::from_fn(n, n, |i, j| s.get(perm[i], perm[j]));
            let pm = Matrix::from_fn(n, n, |i, j| m.get(perm[i], perm[j]));
            let cfg = LossConfig::default();
            prop_assert!((v2t_loss(&s, &m, &cfg).unwrap() - v2t_loss(&ps, &pm, &cfg).unwrap()).abs() < 1e-12);
            prop_assert!((t2v_loss(&s, &m, &cfg).unwrap() - t2v_loss(&ps, &pm, &cfg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn symmetric_loss_properties(seed in any::<u64>(), n in 1usize..7) {
            let (s, m) = random_case(seed, n);
            let cfg = LossConfig::default();
            let l = symmetric_contrastive(&s, &m, &cfg).unwrap();
            let avg = 0.5 * (v2t_loss(&s, &m, &cfg).unwrap() + t2v_loss(&s, &m, &cfg).unwrap());
            prop_assert_eq!(l, avg);
            let lt = symmetric_contrastive(&s.transpose(), &m.transpose(), &cfg).unwrap();
            prop_assert!((l - lt).abs() < 1e-12);
            prop_assert!(l >= -1e-6);
        }
    }
}
