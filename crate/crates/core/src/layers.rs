//! Transformer sublayers with explicit forward caches and hand-derived backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::param::{Parameter, Parameterized};
use crate::tensor::{gelu, gelu_grad, mm, mm_nt, mm_tn, softmax_rows, Matrix};

/// Multi-head self-attention without biases: `Concat(h_1..h_H) W^O`,
/// `h = softmax(Q_h K_hᵀ / sqrt(d_head)) V_h`. Head `h` owns the column block
/// `[h * d_head, (h + 1) * d_head)` of `W^Q`, `W^K` and `W^V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head row-stochastic attention maps.
    pub probs: Vec<Matrix>,
    concat: Matrix,
}

impl SelfAttention {
    pub fn random<R: Rng + ?Sized>(width: usize, heads: usize, std: f64, trainable: bool, rng: &mut R) -> Self {
        let mk = |rng: &mut R| {
            let m = Matrix::random_normal(width, width, std, rng);
            if trainable {
                Parameter::trainable(m)
            } else {
                Parameter::frozen(m)
            }
        };
        Self {
            wq: mk(rng),
            wk: mk(rng),
            wv: mk(rng),
            wo: mk(rng),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.value.rows()
    }

    fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, AttentionCache) {
        let q = mm(x, &self.wq.value);
        let k = mm(x, &self.wk.value);
        let v = mm(x, &self.wv.value);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Matrix::zeros(x.rows(), self.width());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.col_block(h * dh, dh), k.col_block(h * dh, dh), v.col_block(h * dh, dh));
            let mut scores = mm_nt(&qh, &kh);
            scores.scale(scale);
            let p = softmax_rows(&scores);
            concat.set_col_block(h * dh, &mm(&p, &vh));
            probs.push(p);
        }
        let y = mm(&concat, &self.wo.value);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        };
        (y, cache)
    }

    /// Accumulates weight gradients (trainable weights only) and returns `dL/dx`.
    pub fn backward(&mut self, cache: &AttentionCache, dy: &Matrix) -> Matrix {
        let (dx, grads) = self.backward_impl(cache, dy, self.wq.is_trainable());
        if let Some([gq, gk, gv, go]) = grads {
            self.wq.accumulate(&gq);
            self.wk.accumulate(&gk);
            self.wv.accumulate(&gv);
            self.wo.accumulate(&go);
        }
        dx
    }

    /// `dL/dx` only; weights are treated as constants.
    pub fn backward_input(&self, cache: &AttentionCache, dy: &Matrix) -> Matrix {
        self.backward_impl(cache, dy, false).0
    }

    fn backward_impl(&self, cache: &AttentionCache, dy: &Matrix, want_grads: bool) -> (Matrix, Option<[Matrix; 4]>) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = mm_nt(dy, &self.wo.value);
        let n = cache.x.rows();
        let mut dq = Matrix::zeros(n, self.width());
        let mut dk = Matrix::zeros(n, self.width());
        let mut dv = Matrix::zeros(n, self.width());
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let dout = dconcat.col_block(h * dh, dh);
            let (qh, kh, vh) = (
                cache.q.col_block(h * dh, dh),
                cache.k.col_block(h * dh, dh),
                cache.v.col_block(h * dh, dh),
            );
            let dp = mm_nt(&dout, &vh);
            dv.set_col_block(h * dh, &mm_tn(p, &dout));
            // softmax backward, row by row
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                    *o = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            dq.set_col_block(h * dh, &mm(&ds, &kh));
            dk.set_col_block(h * dh, &mm_tn(&ds, &qh));
        }
        let grads = want_grads.then(|| {
            [
                mm_tn(&cache.x, &dq),
                mm_tn(&cache.x, &dk),
                mm_tn(&cache.x, &dv),
                mm_tn(&cache.concat, dy),
            ]
        });
        let mut dx = mm_nt(&dq, &self.wq.value);
        dx.add_assign(&mm_nt(&dk, &self.wk.value));
        dx.add_assign(&mm_nt(&dv, &self.wv.value));
        (dx, grads)
    }
}

impl Parameterized for SelfAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("attn.wq", &self.wq);
        f("attn.wk", &self.wk);
        f("attn.wv", &self.wv);
        f("attn.wo", &self.wo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("attn.wq", &mut self.wq);
        f("attn.wk", &mut self.wk);
        f("attn.wv", &mut self.wv);
        f("attn.wo", &mut self.wo);
    }
}

/// Two-layer GELU MLP, `GELU(x W_1) W_2`, hidden width `4 * width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: Parameter,
    pub w2: Parameter,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl FeedForward {
    pub fn random<R: Rng + ?Sized>(
        width: usize,
        std_in: f64,
        std_out: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w1 = Matrix::random_normal(width, 4 * width, std_in, rng);
        let w2 = Matrix::random_normal(4 * width, width, std_out, rng);
        let wrap = |m| {
            if trainable {
                Parameter::trainable(m)
            } else {
                Parameter::frozen(m)
            }
        };
        Self {
            w1: wrap(w1),
            w2: wrap(w2),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, FeedForwardCache) {
        let pre = mm(x, &self.w1.value);
        let act = pre.map(gelu);
        let y = mm(&act, &self.w2.value);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: &Matrix) -> Matrix {
        let (dx, grads) = self.backward_impl(cache, dy, self.w1.is_trainable());
        if let Some([g1, g2]) = grads {
            self.w1.accumulate(&g1);
            self.w2.accumulate(&g2);
        }
        dx
    }

    pub fn backward_input(&self, cache: &FeedForwardCache, dy: &Matrix) -> Matrix {
        self.backward_impl(cache, dy, false).0
    }

    fn backward_impl(&self, cache: &FeedForwardCache, dy: &Matrix, want_grads: bool) -> (Matrix, Option<[Matrix; 2]>) {
        let mut dpre = mm_nt(dy, &self.w2.value);
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        let grads = want_grads.then(|| [mm_tn(&cache.x, &dpre), mm_tn(&cache.act, dy)]);
        (mm_nt(&dpre, &self.w1.value), grads)
    }
}

impl Parameterized for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("ffn.w1", &self.w1);
        f("ffn.w2", &self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("ffn.w1", &mut self.w1);
        f("ffn.w2", &mut self.w2);
    }
}
