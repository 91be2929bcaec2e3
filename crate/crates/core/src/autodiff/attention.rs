//! Fused multi-head causal attention kernels.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    // Offset of the `seq×seq` probability block for (batch, head).
    fn prob_base(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq * self.seq
    }
}

/// Returns the attention output and the row-stochastic probabilities
/// (upper triangle zero).
pub(crate) fn forward<R: Real>(s: AttnShape, q: &[R], k: &[R], v: &[R]) -> (Vec<R>, Vec<R>) {
    let (t, d, dh) = (s.seq, s.d, s.head_dim());
    let scale = R::one() / R::of(dh as f64).sqrt();
    let mut out = vec![R::zero(); s.batch * t * d];
    let mut probs = vec![R::zero(); s.batch * s.heads * t * t];
    let mut scores = vec![R::zero(); t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            let pb = s.prob_base(b, h);
            for i in 0..t {
                let qi = &q[(b * t + i) * d + off..][..dh];
                let mut max = R::neg_infinity();
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * t + j) * d + off..][..dh];
                    let dot: R = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                    *sc = dot * scale;
                    max = max.max(*sc);
                }
                let mut z = R::zero();
                let prow = &mut probs[pb + i * t..pb + (i + 1) * t];
                for j in 0..=i {
                    prow[j] = (scores[j] - max).exp();
                    z = z + prow[j];
                }
                let o = &mut out[(b * t + i) * d + off..][..dh];
                for j in 0..=i {
                    prow[j] = prow[j] / z;
                    let vj = &v[(b * t + j) * d + off..][..dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc = *oc + prow[j] * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<R: Real>(
    s: AttnShape,
    q: &[R],
    k: &[R],
    v: &[R],
    probs: &[R],
    dout: &[R],
    dq: &mut [R],
    dk: &mut [R],
    dv: &mut [R],
) {
    let (t, d, dh) = (s.seq, s.d, s.head_dim());
    let scale = R::one() / R::of(dh as f64).sqrt();
    let mut dp = vec![R::zero(); t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            let pb = s.prob_base(b, h);
            for i in 0..t {
                let prow = &probs[pb + i * t..pb + (i + 1) * t];
                let row_i = (b * t + i) * d + off;
                let go = &dout[row_i..row_i + dh];
                let mut weighted = R::zero();
                for j in 0..=i {
                    let row_j = (b * t + j) * d + off;
                    let vj = &v[row_j..row_j + dh];
                    dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    weighted = weighted + prow[j] * dp[j];
                    for (x, &gc) in dv[row_j..row_j + dh].iter_mut().zip(go) {
                        *x = *x + prow[j] * gc;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let row_j = (b * t + j) * d + off;
                    for c in 0..dh {
                        dq[row_i + c] = dq[row_i + c] + ds * k[row_j + c];
                        dk[row_j + c] = dk[row_j + c] + ds * q[row_i + c];
                    }
                }
            }
        }
    }
}
