//! The three recurrent stacks that make up the decision workspace: the
//! phrase stack (future phrases flow into the current decision), the
//! bidirectional box stack (computed once per scene, immutable during
//! decoding), and the history stack (grounded phrase-box pairs, most recent
//! on top).

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::nn::{LstmCell, Session, TwoLayerLstm, TwoLayerState};
use crate::tape::Var;
use rand::Rng;

/// Dimension of the normalized location feature vector x_b.
pub const LOC_DIM: usize = 5;

/// Normalized location features: (x1/W, y1/H, x2/W, y2/H, area/(W*H)).
pub fn loc_features(rect: &Rect, width: f64, height: f64) -> [f64; LOC_DIM] {
    [
        rect.x1 / width,
        rect.y1 / height,
        rect.x2 / width,
        rect.y2 / height,
        rect.area() / (width * height),
    ]
}

/// Spatial ordering key: center x, ties by center y, then original index.
pub fn spatial_order(rects: &[Rect]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| {
        rects[a]
            .center_x()
            .partial_cmp(&rects[b].center_x())
            .unwrap()
            .then(rects[a].center_y().partial_cmp(&rects[b].center_y()).unwrap())
            .then(a.cmp(&b))
    });
    order
}

fn check_sorted(rects: &[Rect]) -> Result<()> {
    for w in rects.windows(2) {
        let key = |r: &Rect| (r.center_x(), r.center_y());
        if key(&w[0]) > key(&w[1]) {
            return Err(Error::Input(format!(
                "box stack input not sorted left-to-right: centers {:?} then {:?}",
                key(&w[0]),
                key(&w[1])
            )));
        }
    }
    Ok(())
}

/// Per-position states of the phrase stack: entry t has consumed the
/// encoded phrases p_N, ..., p_t, so information flows from the future
/// phrases into the state read at step t. One backward sweep, reused for
/// every time step.
pub fn build_phrase_stack(
    sess: &mut Session,
    lstm: &TwoLayerLstm,
    phrases: &[Var],
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    if phrases.is_empty() {
        return Err(Error::Input("phrase stack needs at least one phrase".into()));
    }
    let mut state = lstm.zero_state(sess);
    let mut states_rev = Vec::with_capacity(phrases.len());
    for &p in phrases.iter().rev() {
        state = lstm.step(sess, p, state, rng)?;
        states_rev.push(TwoLayerLstm::output(&state));
    }
    states_rev.reverse();
    Ok(states_rev)
}

/// Fused bidirectional states h^B_i for every box. Inputs are the encoded
/// box vectors concatenated with location features, already in spatial
/// order; `rects` (same order) are validated against the left-to-right
/// invariant. The result is computed once per scene and never changes
/// across grounding steps.
pub fn build_box_stack(
    sess: &mut Session,
    fwd: &LstmCell,
    bwd: &LstmCell,
    inputs: &[Var],
    rects: &[Rect],
) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Input("box stack needs at least one box".into()));
    }
    if inputs.len() != rects.len() {
        return Err(Error::Input(format!(
            "{} box inputs with {} rects",
            inputs.len(),
            rects.len()
        )));
    }
    check_sorted(rects)?;
    let m = inputs.len();
    let mut fwd_states = Vec::with_capacity(m);
    let mut state = fwd.zero_state(sess);
    for &x in inputs {
        state = fwd.step(sess, x, state)?;
        fwd_states.push(state.h);
    }
    let mut bwd_states = vec![None; m];
    let mut state = bwd.zero_state(sess);
    for i in (0..m).rev() {
        state = bwd.step(sess, inputs[i], state)?;
        bwd_states[i] = Some(state.h);
    }
    (0..m)
        .map(|i| sess.tape.concat_cols(&[fwd_states[i], bwd_states[i].unwrap()]))
        .collect()
}

/// Running state of the history stack. Empty history reads as the zero
/// state; each grounded phrase-box pair advances the LSTM by one step.
pub struct HistoryState {
    state: Option<TwoLayerState>,
    steps: usize,
}

impl HistoryState {
    pub fn new() -> Self {
        HistoryState { state: None, steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Current hidden state h^R, or zeros when nothing is grounded yet.
    pub fn output(&self, sess: &mut Session, lstm: &TwoLayerLstm) -> Var {
        match &self.state {
            Some(s) => TwoLayerLstm::output(s),
            None => sess.tape.zeros(1, lstm.l2.hidden),
        }
    }

    /// Push K grounded entries (already [p, b, x_b] concatenated, in spatial
    /// order). K = 0 leaves the state untouched.
    pub fn push(
        &mut self,
        sess: &mut Session,
        lstm: &TwoLayerLstm,
        entries: &[Var],
        rng: &mut impl Rng,
    ) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut state = match self.state.take() {
            Some(s) => s,
            None => lstm.zero_state(sess),
        };
        for &e in entries {
            state = lstm.step(sess, e, state, rng)?;
            self.steps += 1;
        }
        self.state = Some(state);
        Ok(())
    }
}

impl Default for HistoryState {
    fn default() -> Self {
        HistoryState::new()
    }
}

/// Builds one history entry [p_j, b, x_b] for a grounded pair.
pub fn history_entry(
    sess: &mut Session,
    phrase: Var,
    box_enc: Var,
    rect: &Rect,
    width: f64,
    height: f64,
) -> Result<Var> {
    let loc = sess
        .tape
        .leaf(crate::tensor::Tensor::row(loc_features(rect, width, height).to_vec()))?;
    sess.tape.concat_cols(&[phrase, box_enc, loc])
}
