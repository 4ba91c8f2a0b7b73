//! Shared building blocks: linear maps, LSTM cells and layer norms,
//! registered in a `ParamStore` by name and executed on a `Graph`.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bound, Graph, ParamStore, TensorRef};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert_xavier(&w, in_dim, out_dim, rng);
        store.insert_const(&b, 1, out_dim, 0.0);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        let wx = g.matmul(x, bound.id(&self.w));
        g.add_bias(wx, bound.id(&self.b))
    }
}

/// Single LSTM cell with stacked gate weights `[(in+h) x 4h]`, gate order
/// input / forget / candidate / output. Forget bias starts at 1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: String,
    pub b: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert_xavier(&w, input_dim + hidden_dim, 4 * hidden_dim, rng);
        let mut bias = vec![0.0; 4 * hidden_dim];
        for v in bias.iter_mut().take(2 * hidden_dim).skip(hidden_dim) {
            *v = 1.0;
        }
        store.insert(&b, bias, 1, 4 * hidden_dim);
        LstmCell { w, b, input_dim, hidden_dim }
    }

    pub fn zero_state(&self, g: &mut Graph) -> (TensorRef, TensorRef) {
        let h = g.constant(vec![0.0; self.hidden_dim], 1, self.hidden_dim);
        let c = g.constant(vec![0.0; self.hidden_dim], 1, self.hidden_dim);
        (h, c)
    }

    /// One step: returns (h', c').
    pub fn step(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: TensorRef,
        h: TensorRef,
        c: TensorRef,
    ) -> (TensorRef, TensorRef) {
        let hd = self.hidden_dim;
        assert_eq!(g.dims(x), (1, self.input_dim), "lstm {}: bad input shape", self.w);
        let xh = g.concat_cols(&[x, h]);
        let zw = g.matmul(xh, bound.id(&self.w));
        let z = g.add_bias(zw, bound.id(&self.b));
        let i_g = g.slice_cols(z, 0, hd);
        let f_g = g.slice_cols(z, hd, 2 * hd);
        let c_g = g.slice_cols(z, 2 * hd, 3 * hd);
        let o_g = g.slice_cols(z, 3 * hd, 4 * hd);
        let i_s = g.sigmoid(i_g);
        let f_s = g.sigmoid(f_g);
        let c_t = g.tanh(c_g);
        let o_s = g.sigmoid(o_g);
        let keep = g.mul(f_s, c);
        let write = g.mul(i_s, c_t);
        let c_new = g.add(keep, write);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o_s, c_act);
        (h_new, c_new)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert_const(&gamma, 1, dim, 1.0);
        store.insert_const(&beta, 1, dim, 0.0);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        g.layer_norm(x, bound.id(&self.gamma), bound.id(&self.beta), LN_EPS)
    }
}
