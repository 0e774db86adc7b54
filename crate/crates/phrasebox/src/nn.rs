//! Parameter storage and the layer primitives shared by the encoders and
//! the recurrent stacks.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Index of a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameter tensors. Order is creation order and is
/// what the checkpoint format serializes.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name.to_string(), t));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// One forward pass: a tape plus the parameter registrations for it.
pub struct Session {
    pub tape: Tape,
    param_vars: Vec<Var>,
    pub train: bool,
}

impl Session {
    /// Registers every parameter of `store` on a fresh tape.
    pub fn new(store: &ParamStore, train: bool) -> Result<Session> {
        let mut tape = Tape::new();
        let mut param_vars = Vec::with_capacity(store.len());
        for (_, t) in store.iter() {
            param_vars.push(tape.leaf(t.clone())?);
        }
        Ok(Session { tape, param_vars, train })
    }

    /// Tape variable for a registered parameter.
    pub fn p(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    /// Gradients for every parameter, aligned with `store.ids()`.
    /// Parameters the loss never reached come back as zeros.
    pub fn grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.tape.grad_tensor(self.p(id))).collect()
    }

    /// Inverted dropout: scales kept activations by 1/(1-rate) at train time,
    /// identity at eval time.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = self.tape.value(x).numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        self.tape.apply_mask(x, mask)
    }
}

/// Dense layer y = x W + b with W: (in, out).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Linear> {
        let w = store.add(&format!("{prefix}.weight"), Tensor::glorot(in_dim, out_dim, rng))?;
        let b = store.add(&format!("{prefix}.bias"), Tensor::zeros(1, out_dim))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn apply(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let prod = sess.tape.matmul(x, sess.p(self.w))?;
        sess.tape.add_row(prod, sess.p(self.b))
    }
}

/// Hidden and memory-cell vectors of one LSTM layer (tape variables).
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerState {
    pub h: Var,
    pub c: Var,
}

/// Single LSTM cell with fused gate weights, gate order [i, f, g, o].
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<LstmCell> {
        let w_x = store.add(&format!("{prefix}.w_x"), Tensor::glorot(in_dim, 4 * hidden, rng))?;
        let w_h = store.add(&format!("{prefix}.w_h"), Tensor::glorot(hidden, 4 * hidden, rng))?;
        // forget-gate bias starts at 1 so memory persists early in training
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        let b = store.add(&format!("{prefix}.b"), bias)?;
        Ok(LstmCell { w_x, w_h, b, in_dim, hidden })
    }

    pub fn zero_state(&self, sess: &mut Session) -> LstmLayerState {
        LstmLayerState { h: sess.tape.zeros(1, self.hidden), c: sess.tape.zeros(1, self.hidden) }
    }

    pub fn step(&self, sess: &mut Session, x: Var, prev: LstmLayerState) -> Result<LstmLayerState> {
        let in_cols = sess.tape.value(x).cols();
        if in_cols != self.in_dim {
            return Err(Error::Dimension(format!(
                "lstm step input dim {in_cols}, cell expects {}",
                self.in_dim
            )));
        }
        let h = self.hidden;
        let t = &mut sess.tape;
        let xp = t.matmul(x, sess.param_vars[self.w_x.0])?;
        let hp = t.matmul(prev.h, sess.param_vars[self.w_h.0])?;
        let s = t.add(xp, hp)?;
        let pre = t.add_row(s, sess.param_vars[self.b.0])?;
        let i_pre = t.slice_cols(pre, 0, h)?;
        let f_pre = t.slice_cols(pre, h, h)?;
        let g_pre = t.slice_cols(pre, 2 * h, h)?;
        let o_pre = t.slice_cols(pre, 3 * h, h)?;
        let i = t.sigmoid(i_pre)?;
        let f = t.sigmoid(f_pre)?;
        let g = t.tanh(g_pre)?;
        let o = t.sigmoid(o_pre)?;
        let fc = t.mul(f, prev.c)?;
        let ig = t.mul(i, g)?;
        let c = t.add(fc, ig)?;
        let ct = t.tanh(c)?;
        let h_new = t.mul(o, ct)?;
        Ok(LstmLayerState { h: h_new, c })
    }
}

/// State of a two-layer LSTM.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayerState {
    pub l1: LstmLayerState,
    pub l2: LstmLayerState,
}

/// Two stacked LSTM layers; layer 1's hidden output (after inter-layer
/// dropout at train time) feeds layer 2.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayerLstm {
    pub l1: LstmCell,
    pub l2: LstmCell,
    pub inter_dropout: f64,
}

impl TwoLayerLstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        inter_dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<TwoLayerLstm> {
        let l1 = LstmCell::new(store, &format!("{prefix}.l1"), in_dim, hidden, rng)?;
        let l2 = LstmCell::new(store, &format!("{prefix}.l2"), hidden, hidden, rng)?;
        Ok(TwoLayerLstm { l1, l2, inter_dropout })
    }

    pub fn zero_state(&self, sess: &mut Session) -> TwoLayerState {
        TwoLayerState { l1: self.l1.zero_state(sess), l2: self.l2.zero_state(sess) }
    }

    pub fn step(
        &self,
        sess: &mut Session,
        x: Var,
        prev: TwoLayerState,
        rng: &mut impl Rng,
    ) -> Result<TwoLayerState> {
        let s1 = self.l1.step(sess, x, prev.l1)?;
        let mid = sess.dropout(s1.h, self.inter_dropout, rng)?;
        let s2 = self.l2.step(sess, mid, prev.l2)?;
        Ok(TwoLayerState { l1: s1, l2: s2 })
    }

    /// Top-layer hidden state.
    pub fn output(state: &TwoLayerState) -> Var {
        state.l2.h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_names_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn linear_applies_weights_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "fc", 2, 2, &mut rng).unwrap();
        *store.get_mut(lin.w) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut(lin.b) = Tensor::row(vec![0.5, -0.5]);
        let mut sess = Session::new(&store, false).unwrap();
        let x = sess.tape.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let y = lin.apply(&mut sess, x).unwrap();
        assert_eq!(sess.tape.value(y).data(), &[1.5, 1.5]);
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        *store.get_mut(cell.w_x) = Tensor::zeros(3, 16);
        *store.get_mut(cell.w_h) = Tensor::zeros(4, 16);
        *store.get_mut(cell.b) = Tensor::zeros(1, 16);
        let mut sess = Session::new(&store, false).unwrap();
        let x = sess.tape.leaf(Tensor::row(vec![5.0, -3.0, 2.0])).unwrap();
        let st = cell.zero_state(&mut sess);
        let next = cell.step(&mut sess, x, st).unwrap();
        assert_eq!(sess.tape.value(next.h).data(), &[0.0; 4]);
        assert_eq!(sess.tape.value(next.c).data(), &[0.0; 4]);
    }

    #[test]
    fn lstm_zero_input_zero_bias_stays_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng).unwrap();
        *store.get_mut(cell.b) = Tensor::zeros(1, 12);
        let mut sess = Session::new(&store, false).unwrap();
        let x = sess.tape.leaf(Tensor::row(vec![0.0, 0.0])).unwrap();
        let st = cell.zero_state(&mut sess);
        let next = cell.step(&mut sess, x, st).unwrap();
        // tanh(0) * sigmoid(0) = 0 regardless of weights
        assert_eq!(sess.tape.value(next.h).data(), &[0.0; 3]);
    }

    #[test]
    fn dropout_deterministic_under_seed_and_identity_at_eval() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row(vec![1.0; 64])).unwrap();

        let run = |train: bool, seed: u64| -> Vec<f64> {
            let mut sess = Session::new(&store, train).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = sess.p(ParamId(0));
            let y = sess.dropout(x, 0.4, &mut rng).unwrap();
            sess.tape.value(y).data().to_vec()
        };

        assert_eq!(run(true, 7), run(true, 7));
        assert_ne!(run(true, 7), run(true, 8));
        assert_eq!(run(false, 7), vec![1.0; 64]);
        // kept entries are scaled by 1/(1-rate)
        let t = run(true, 7);
        assert!(t.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-15));
    }
}
