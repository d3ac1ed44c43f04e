//! Adam over the three parameter matrices, with first/second moment state
//! that serializes into checkpoints.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, GradAccum, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on `lr` for the generator matrix, so the reader can learn
    /// slower than the towers. A high-capacity generator over hashed bag
    /// features can close the training loss by memorizing each example
    /// through its retrieved candidates' tokens, which starves the retrieval
    /// gradient; keeping the generator slow lets retrieval win that race.
    pub lr_gen_scale: f64,
    /// Decoupled L2 pull of the generator toward its initialization,
    /// applied per step at the generator's effective learning rate.
    /// Per-example associations that are reinforced only rarely decay away,
    /// while structure reinforced on every batch persists. Zero disables it.
    pub gen_anchor: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_gen_scale: 1.0,
            gen_anchor: 0.0,
        }
    }
}

/// Moment estimates, one pair per parameter matrix, plus the shared step
/// count used for bias correction and the generator's anchor point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m_w_q: Matrix,
    pub v_w_q: Matrix,
    pub m_w_p: Matrix,
    pub v_w_p: Matrix,
    pub m_u: Matrix,
    pub v_u: Matrix,
    /// Snapshot of the generator at optimizer construction; the target of
    /// [`AdamHyper::gen_anchor`]'s pull.
    pub u_anchor: Matrix,
}

impl AdamState {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        AdamState {
            t: 0,
            m_w_q: z(&params.w_q),
            v_w_q: z(&params.w_q),
            m_w_p: z(&params.w_p),
            v_w_p: z(&params.w_p),
            m_u: z(&params.u),
            v_u: z(&params.u),
            u_anchor: params.u.clone(),
        }
    }

    /// One update. With `update_w_p` false the passage tower is left
    /// untouched — parameters and moments both — which is how frozen-mode
    /// training discards that gradient.
    pub fn apply(
        &mut self,
        params: &mut EncoderParams,
        grads: &GradAccum,
        hp: &AdamHyper,
        update_w_p: bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        let update = |theta: &mut Matrix, m: &mut Matrix, v: &mut Matrix, g: &Matrix, lr: f64| {
            debug_assert_eq!(theta.data.len(), g.data.len());
            for i in 0..theta.data.len() {
                let gi = g.data[i];
                m.data[i] = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
                v.data[i] = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                theta.data[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        };
        update(&mut params.w_q, &mut self.m_w_q, &mut self.v_w_q, &grads.w_q, hp.lr);
        if update_w_p {
            update(&mut params.w_p, &mut self.m_w_p, &mut self.v_w_p, &grads.w_p, hp.lr);
        }
        let lr_gen = hp.lr * hp.lr_gen_scale;
        update(&mut params.u, &mut self.m_u, &mut self.v_u, &grads.u, lr_gen);
        if hp.gen_anchor != 0.0 {
            // Decoupled pull toward the anchor, after the gradient step.
            let pull = lr_gen * hp.gen_anchor;
            for (w, a) in params.u.data.iter_mut().zip(&self.u_anchor.data) {
                *w -= pull * (*w - a);
            }
        }
    }
}
