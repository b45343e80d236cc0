//! Small differentiable models with exact per-example gradients.
//!
//! Three model kinds are supported, all trained with softmax cross-entropy:
//!
//! * `logistic` — linear softmax classifier (the two-class case is ordinary
//!   logistic regression expressed with two logit rows);
//! * `mlp1` — one tanh hidden layer;
//! * `char_lm` — a context-window token model: each of `context_len` token
//!   indices is embedded (`input_dim` is the embedding width), the embeddings
//!   are concatenated and fed through one tanh hidden layer into a softmax
//!   over the vocabulary.
//!
//! Parameters live in a single flat `f64` vector carrying labeled group spans
//! (weight matrix, bias, embedding table, ...) so downstream noise allocation
//! can be summarized per group. Backpropagation is written out by hand and
//! produces the gradient of each example's own loss; averaging those rows in
//! index order gives the batch gradient exactly.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::DetRng;

const INIT_TAG: u64 = u64::from_le_bytes(*b"init\0\0\0\0");

// ============================================================================
// Parameter storage
// ============================================================================

/// A labeled half-open range `[start, start+len)` of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub label: String,
    pub start: usize,
    pub len: usize,
}

/// Flat parameter vector plus its group map.
///
/// The spans are sorted, disjoint, and cover the whole vector; every value is
/// finite. Both facts are checked at construction and relied on everywhere
/// else.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    groups: Vec<GroupSpan>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, groups: Vec<GroupSpan>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::config("parameter vector needs at least one group"));
        }
        let mut expected_start = 0usize;
        for g in &groups {
            if g.label.is_empty() {
                return Err(CoreError::config("group label must be non-empty"));
            }
            if g.len == 0 {
                return Err(CoreError::config(format!("group '{}' is empty", g.label)));
            }
            if g.start != expected_start {
                return Err(CoreError::config(format!(
                    "group '{}' starts at {} but {} expected; spans must be sorted and disjoint",
                    g.label, g.start, expected_start
                )));
            }
            expected_start = g.start + g.len;
        }
        if expected_start != values.len() {
            return Err(CoreError::config(format!(
                "group spans cover {} values but the vector holds {}",
                expected_start,
                values.len()
            )));
        }
        let mut seen: Vec<&str> = groups.iter().map(|g| g.label.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != groups.len() {
            return Err(CoreError::config("group labels must be unique"));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Numeric {
                index: idx,
                reason: format!("non-finite parameter {}", values[idx]),
            });
        }
        Ok(ParameterVector { values, groups })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn groups(&self) -> &[GroupSpan] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One plain SGD step: `params - lr * grad`, group map unchanged.
pub fn sgd_update(params: &ParameterVector, grad: &[f64], lr: f64) -> Result<ParameterVector> {
    if grad.len() != params.len() {
        return Err(CoreError::config(format!(
            "gradient has {} entries, parameters have {}",
            grad.len(),
            params.len()
        )));
    }
    if !lr.is_finite() {
        return Err(CoreError::config(format!("learning rate {lr} is not finite")));
    }
    let values = params
        .values
        .iter()
        .zip(grad)
        .map(|(w, g)| w - lr * g)
        .collect();
    Ok(ParameterVector { values, groups: params.groups.clone() })
}

// ============================================================================
// Examples and batches
// ============================================================================

/// Model input: dense features for tabular models, a token window for the
/// character model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    Dense(Vec<f64>),
    Tokens(Vec<u32>),
}

impl Features {
    fn arity(&self) -> usize {
        match self {
            Features::Dense(x) => x.len(),
            Features::Tokens(t) => t.len(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Features::Dense(_) => "dense",
            Features::Tokens(_) => "tokens",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Features,
    pub label: usize,
}

/// Non-empty list of examples with uniform feature kind and arity.
#[derive(Debug, Clone)]
pub struct Batch {
    examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| CoreError::config("batch must hold at least one example"))?;
        let kind = first.features.kind_name();
        let arity = first.features.arity();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.kind_name() != kind || ex.features.arity() != arity {
                return Err(CoreError::config(format!(
                    "example {i} has {} features of arity {}, batch started with {} of arity {}",
                    ex.features.kind_name(),
                    ex.features.arity(),
                    kind,
                    arity
                )));
            }
        }
        Ok(Batch { examples })
    }

    pub fn from_indices(pool: &[Example], indices: &[usize]) -> Result<Self> {
        let examples = indices
            .iter()
            .map(|&i| {
                pool.get(i).cloned().ok_or_else(|| {
                    CoreError::config(format!("index {i} out of range for pool of {}", pool.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::new(examples)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }
}

// ============================================================================
// Model specification
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp1,
    CharLm,
}

/// Architecture description. For `char_lm`, `input_dim` is the embedding
/// width and `num_classes` equals `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub context_len: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Result<Self> {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
            vocab_size: 0,
            context_len: 0,
        }
        .validated()
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        ModelSpec {
            kind: ModelKind::Mlp1,
            input_dim,
            hidden_dim,
            num_classes,
            vocab_size: 0,
            context_len: 0,
        }
        .validated()
    }

    pub fn char_lm(
        vocab_size: usize,
        context_len: usize,
        embed_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        ModelSpec {
            kind: ModelKind::CharLm,
            input_dim: embed_dim,
            hidden_dim,
            num_classes: vocab_size,
            vocab_size,
            context_len,
        }
        .validated()
    }

    /// Fills derivable fields (a char model's class count is its vocabulary)
    /// and validates. Used on deserialized specs.
    pub fn resolved(mut self) -> Result<Self> {
        if self.kind == ModelKind::CharLm && self.num_classes == 0 {
            self.num_classes = self.vocab_size;
        }
        self.validated()
    }

    fn validated(self) -> Result<Self> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        match self.kind {
            ModelKind::Logistic => {
                if self.input_dim == 0 || self.num_classes < 2 {
                    return fail(format!(
                        "logistic model needs input_dim >= 1 and num_classes >= 2, got {} and {}",
                        self.input_dim, self.num_classes
                    ));
                }
                if self.hidden_dim != 0 || self.vocab_size != 0 || self.context_len != 0 {
                    return fail("logistic model takes no hidden/vocab/context dims".into());
                }
            }
            ModelKind::Mlp1 => {
                if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
                    return fail(format!(
                        "mlp1 needs input_dim, hidden_dim >= 1 and num_classes >= 2, got {}, {}, {}",
                        self.input_dim, self.hidden_dim, self.num_classes
                    ));
                }
                if self.vocab_size != 0 || self.context_len != 0 {
                    return fail("mlp1 takes no vocab/context dims".into());
                }
            }
            ModelKind::CharLm => {
                if self.vocab_size < 2 || self.context_len == 0 {
                    return fail(format!(
                        "char_lm needs vocab_size >= 2 and context_len >= 1, got {} and {}",
                        self.vocab_size, self.context_len
                    ));
                }
                if self.input_dim == 0 || self.hidden_dim == 0 {
                    return fail("char_lm needs embedding and hidden widths >= 1".into());
                }
                if self.num_classes != self.vocab_size {
                    return fail(format!(
                        "char_lm predicts its vocabulary; num_classes {} != vocab_size {}",
                        self.num_classes, self.vocab_size
                    ));
                }
            }
        }
        Ok(self)
    }

    /// Concatenated dense width seen by the hidden/output layers.
    fn dense_width(&self) -> usize {
        match self.kind {
            ModelKind::CharLm => self.context_len * self.input_dim,
            _ => self.input_dim,
        }
    }

    pub fn group_spans(&self) -> Vec<GroupSpan> {
        let mut spans = Vec::new();
        let mut cursor = 0usize;
        let mut push = |label: &str, len: usize, cursor: &mut usize| {
            spans.push(GroupSpan { label: label.to_string(), start: *cursor, len });
            *cursor += len;
        };
        match self.kind {
            ModelKind::Logistic => {
                push("w", self.num_classes * self.input_dim, &mut cursor);
                push("b", self.num_classes, &mut cursor);
            }
            ModelKind::Mlp1 => {
                push("w1", self.hidden_dim * self.input_dim, &mut cursor);
                push("b1", self.hidden_dim, &mut cursor);
                push("w2", self.num_classes * self.hidden_dim, &mut cursor);
                push("b2", self.num_classes, &mut cursor);
            }
            ModelKind::CharLm => {
                push("embed", self.vocab_size * self.input_dim, &mut cursor);
                push("w1", self.hidden_dim * self.dense_width(), &mut cursor);
                push("b1", self.hidden_dim, &mut cursor);
                push("w2", self.num_classes * self.hidden_dim, &mut cursor);
                push("b2", self.num_classes, &mut cursor);
            }
        }
        spans
    }

    pub fn param_count(&self) -> usize {
        self.group_spans().iter().map(|g| g.len).sum()
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector {
            values: vec![0.0; self.param_count()],
            groups: self.group_spans(),
        }
    }

    /// Seeded uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` per group.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = DetRng::new(seed, INIT_TAG);
        let groups = self.group_spans();
        let mut values = Vec::with_capacity(self.param_count());
        for g in &groups {
            let fan_in = self.group_fan_in(&g.label);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..g.len {
                values.push((2.0 * rng.next_f64() - 1.0) * scale);
            }
        }
        ParameterVector { values, groups }
    }

    fn group_fan_in(&self, label: &str) -> usize {
        match (self.kind, label) {
            (ModelKind::CharLm, "embed") => 1,
            (_, "w" | "b") => self.input_dim,
            (_, "w1" | "b1") => self.dense_width(),
            (_, "w2" | "b2") => self.hidden_dim,
            _ => 1,
        }
    }

    fn check_example(&self, index: usize, ex: &Example) -> Result<()> {
        if ex.label >= self.num_classes {
            return Err(CoreError::config(format!(
                "example {index}: label {} out of range for {} classes",
                ex.label, self.num_classes
            )));
        }
        match (&ex.features, self.kind) {
            (Features::Dense(x), ModelKind::Logistic | ModelKind::Mlp1) => {
                if x.len() != self.input_dim {
                    return Err(CoreError::config(format!(
                        "example {index}: {} features, model expects {}",
                        x.len(),
                        self.input_dim
                    )));
                }
            }
            (Features::Tokens(t), ModelKind::CharLm) => {
                if t.len() != self.context_len {
                    return Err(CoreError::config(format!(
                        "example {index}: window of {} tokens, model expects {}",
                        t.len(),
                        self.context_len
                    )));
                }
                if let Some(&bad) = t.iter().find(|&&tok| tok as usize >= self.vocab_size) {
                    return Err(CoreError::config(format!(
                        "example {index}: token {bad} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
            }
            (f, _) => {
                return Err(CoreError::config(format!(
                    "example {index}: {} features do not fit a {:?} model",
                    f.kind_name(),
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

// ============================================================================
// Forward and backward passes
// ============================================================================

/// Reusable per-batch scratch space.
struct Workspace {
    xcat: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dpre: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        Workspace {
            xcat: vec![0.0; spec.dense_width()],
            act: vec![0.0; spec.hidden_dim],
            logits: vec![0.0; spec.num_classes],
            probs: vec![0.0; spec.num_classes],
            dpre: vec![0.0; spec.hidden_dim],
        }
    }
}

/// Fills `ws.xcat` with the dense input (embedding lookups for token windows)
/// and `ws.act`/`ws.logits` with the forward activations.
fn forward_into(spec: &ModelSpec, params: &[f64], ex: &Example, ws: &mut Workspace) {
    match (&ex.features, spec.kind) {
        (Features::Dense(x), _) => ws.xcat[..x.len()].copy_from_slice(x),
        (Features::Tokens(toks), _) => {
            let e = spec.input_dim;
            for (pos, &tok) in toks.iter().enumerate() {
                let row = tok as usize * e;
                ws.xcat[pos * e..(pos + 1) * e].copy_from_slice(&params[row..row + e]);
            }
        }
    }
    let d = spec.dense_width();
    let k = spec.num_classes;
    match spec.kind {
        ModelKind::Logistic => {
            // groups: w (k x d), b (k)
            let b_off = k * d;
            for c in 0..k {
                let row = &params[c * d..(c + 1) * d];
                let mut acc = params[b_off + c];
                for (wj, xj) in row.iter().zip(&ws.xcat) {
                    acc += wj * xj;
                }
                ws.logits[c] = acc;
            }
        }
        ModelKind::Mlp1 | ModelKind::CharLm => {
            let h = spec.hidden_dim;
            let w1_off = if spec.kind == ModelKind::CharLm { spec.vocab_size * spec.input_dim } else { 0 };
            let b1_off = w1_off + h * d;
            let w2_off = b1_off + h;
            let b2_off = w2_off + k * h;
            for u in 0..h {
                let row = &params[w1_off + u * d..w1_off + (u + 1) * d];
                let mut acc = params[b1_off + u];
                for (wj, xj) in row.iter().zip(&ws.xcat) {
                    acc += wj * xj;
                }
                ws.act[u] = acc.tanh();
            }
            for c in 0..k {
                let row = &params[w2_off + c * h..w2_off + (c + 1) * h];
                let mut acc = params[b2_off + c];
                for (wj, aj) in row.iter().zip(&ws.act) {
                    acc += wj * aj;
                }
                ws.logits[c] = acc;
            }
        }
    }
}

/// Softmax cross-entropy from `ws.logits`; fills `ws.probs`, returns the loss.
fn softmax_loss(logits: &[f64], probs: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *p = e;
        denom += e;
    }
    for p in probs.iter_mut() {
        *p /= denom;
    }
    denom.ln() + max - logits[label]
}

/// Writes the gradient of this example's loss into `row` (assumed zeroed).
fn backward_into(spec: &ModelSpec, params: &[f64], ex: &Example, ws: &mut Workspace, row: &mut [f64]) {
    let d = spec.dense_width();
    let k = spec.num_classes;
    // dlogit = probs - onehot(label), reuse probs in place
    ws.probs[ex.label] -= 1.0;
    let dlogit = &ws.probs;
    match spec.kind {
        ModelKind::Logistic => {
            let b_off = k * d;
            for c in 0..k {
                let g = dlogit[c];
                let out = &mut row[c * d..(c + 1) * d];
                for (o, xj) in out.iter_mut().zip(&ws.xcat) {
                    *o = g * xj;
                }
                row[b_off + c] = g;
            }
        }
        ModelKind::Mlp1 | ModelKind::CharLm => {
            let h = spec.hidden_dim;
            let w1_off = if spec.kind == ModelKind::CharLm { spec.vocab_size * spec.input_dim } else { 0 };
            let b1_off = w1_off + h * d;
            let w2_off = b1_off + h;
            let b2_off = w2_off + k * h;
            for u in 0..h {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += dlogit[c] * params[w2_off + c * h + u];
                }
                ws.dpre[u] = acc * (1.0 - ws.act[u] * ws.act[u]);
            }
            for c in 0..k {
                let g = dlogit[c];
                let out = &mut row[w2_off + c * h..w2_off + (c + 1) * h];
                for (o, aj) in out.iter_mut().zip(&ws.act) {
                    *o = g * aj;
                }
                row[b2_off + c] = g;
            }
            for u in 0..h {
                let g = ws.dpre[u];
                let out = &mut row[w1_off + u * d..w1_off + (u + 1) * d];
                for (o, xj) in out.iter_mut().zip(&ws.xcat) {
                    *o = g * xj;
                }
                row[b1_off + u] = g;
            }
            if spec.kind == ModelKind::CharLm {
                // dx = W1^T dpre, scattered back onto the looked-up embedding rows
                let e = spec.input_dim;
                if let Features::Tokens(toks) = &ex.features {
                    for (pos, &tok) in toks.iter().enumerate() {
                        let emb = tok as usize * e;
                        for j in 0..e {
                            let col = pos * e + j;
                            let mut acc = 0.0;
                            for u in 0..h {
                                acc += ws.dpre[u] * params[w1_off + u * d + col];
                            }
                            row[emb + j] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn check_shapes(spec: &ModelSpec, params: &ParameterVector, batch: &Batch) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(CoreError::config(format!(
            "parameter vector has {} entries, model expects {}",
            params.len(),
            spec.param_count()
        )));
    }
    for (i, ex) in batch.examples().iter().enumerate() {
        spec.check_example(i, ex)?;
    }
    Ok(())
}

/// Mean loss and per-example losses for the batch. The mean is a fixed-order
/// sequential reduction of the per-example values.
pub fn forward_loss(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(spec, params, batch)?;
    let mut ws = Workspace::new(spec);
    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.examples().iter().enumerate() {
        forward_into(spec, params.values(), ex, &mut ws);
        let loss = softmax_loss(&ws.logits, &mut ws.probs, ex.label);
        if !loss.is_finite() {
            return Err(CoreError::Numeric { index: i, reason: format!("loss {loss}") });
        }
        losses.push(loss);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean, losses))
}

/// Per-example losses and gradient rows in one pass. Row `i` is the exact
/// gradient of example `i`'s loss.
pub fn forward_backward(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_shapes(spec, params, batch)?;
    let mut ws = Workspace::new(spec);
    let n_params = spec.param_count();
    let mut losses = Vec::with_capacity(batch.len());
    let mut rows = Vec::with_capacity(batch.len());
    for (i, ex) in batch.examples().iter().enumerate() {
        forward_into(spec, params.values(), ex, &mut ws);
        let loss = softmax_loss(&ws.logits, &mut ws.probs, ex.label);
        if !loss.is_finite() {
            return Err(CoreError::Numeric { index: i, reason: format!("loss {loss}") });
        }
        losses.push(loss);
        let mut row = vec![0.0; n_params];
        backward_into(spec, params.values(), ex, &mut ws, &mut row);
        rows.push(row);
    }
    Ok((losses, rows))
}

/// Gradient rows only; see [`forward_backward`].
pub fn per_example_gradients(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<Vec<Vec<f64>>> {
    forward_backward(spec, params, batch).map(|(_, rows)| rows)
}

/// Raw logits for one input, used by evaluation and candidate scoring.
pub fn logits_for(spec: &ModelSpec, params: &ParameterVector, features: &Features) -> Result<Vec<f64>> {
    let probe = Example { features: features.clone(), label: 0 };
    if params.len() != spec.param_count() {
        return Err(CoreError::config(format!(
            "parameter vector has {} entries, model expects {}",
            params.len(),
            spec.param_count()
        )));
    }
    spec.check_example(0, &probe)?;
    let mut ws = Workspace::new(spec);
    forward_into(spec, params.values(), &probe, &mut ws);
    Ok(ws.logits)
}

// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(x: &[f64], label: usize) -> Example {
        Example { features: Features::Dense(x.to_vec()), label }
    }

    #[test]
    fn zero_logistic_matches_hand_values() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = spec.zero_params();
        let batch = Batch::new(vec![dense(&[1.0, 0.0], 1)]).unwrap();
        let (mean, losses) = forward_loss(&spec, &params, &batch).unwrap();
        assert!((losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mean.to_bits(), losses[0].to_bits());

        let rows = per_example_gradients(&spec, &params, &batch).unwrap();
        // layout: w = [w00 w01 w10 w11], b = [b0 b1]
        let g = &rows[0];
        assert!((g[0] - 0.5).abs() < 1e-12, "class-0 weight on x0");
        assert!(g[1].abs() < 1e-12);
        assert!((g[2] + 0.5).abs() < 1e-12, "class-1 weight on x0");
        assert!(g[3].abs() < 1e-12);
        assert!((g[4] - 0.5).abs() < 1e-12);
        assert!((g[5] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicated_example_rows_are_identical() {
        let spec = ModelSpec::mlp1(3, 4, 2).unwrap();
        let params = spec.init_params(7);
        let ex = dense(&[0.3, -1.2, 0.05], 1);
        let batch = Batch::new(vec![ex.clone(), ex.clone(), ex]).unwrap();
        let (losses, rows) = forward_backward(&spec, &params, &batch).unwrap();
        assert_eq!(losses[0].to_bits(), losses[1].to_bits());
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn losses_are_nonnegative() {
        let spec = ModelSpec::mlp1(4, 5, 3).unwrap();
        let params = spec.init_params(21);
        let mut rng = DetRng::new(3, 99);
        let examples: Vec<Example> = (0..50)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                Example { features: Features::Dense(x), label: rng.below(3) as usize }
            })
            .collect();
        let batch = Batch::new(examples).unwrap();
        let (mean, losses) = forward_loss(&spec, &params, &batch).unwrap();
        assert!(mean >= 0.0);
        for l in losses {
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn sgd_update_arithmetic() {
        let spec = ModelSpec::logistic(1, 2).unwrap();
        let params =
            ParameterVector::new(vec![1.0, 2.0, 3.0, 4.0], spec.group_spans()).unwrap();
        let updated = sgd_update(&params, &[1.0, -1.0, 0.0, 2.0], 0.5).unwrap();
        assert_eq!(updated.values(), &[0.5, 2.5, 3.0, 3.0]);

        let same = sgd_update(&params, &[0.0; 4], 0.3).unwrap();
        assert_eq!(same.values(), params.values());
    }

    #[test]
    fn two_small_steps_equal_one_summed_step() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = spec.init_params(5);
        let g1 = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        let g2 = [0.05, 0.4, -0.3, 0.2, -0.5, 0.5];
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let two = sgd_update(&sgd_update(&params, &g1, 0.25).unwrap(), &g2, 0.25).unwrap();
        let one = sgd_update(&params, &sum, 0.25).unwrap();
        for (a, b) in two.values().iter().zip(one.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatches_are_config_errors() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = spec.zero_params();

        let wide = Batch::new(vec![dense(&[1.0, 2.0, 3.0], 0)]).unwrap();
        assert!(matches!(forward_loss(&spec, &params, &wide), Err(CoreError::Config(_))));

        let bad_label = Batch::new(vec![dense(&[1.0, 2.0], 5)]).unwrap();
        assert!(matches!(forward_loss(&spec, &params, &bad_label), Err(CoreError::Config(_))));

        assert!(matches!(sgd_update(&params, &[0.0; 3], 0.1), Err(CoreError::Config(_))));
    }

    #[test]
    fn non_finite_input_is_a_numeric_error_with_index() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = spec.zero_params();
        let batch =
            Batch::new(vec![dense(&[0.0, 1.0], 0), dense(&[f64::INFINITY, 0.0], 1)]).unwrap();
        match forward_loss(&spec, &params, &batch) {
            Err(CoreError::Numeric { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn group_spans_tile_the_vector() {
        for spec in [
            ModelSpec::logistic(3, 4).unwrap(),
            ModelSpec::mlp1(5, 7, 3).unwrap(),
            ModelSpec::char_lm(11, 4, 3, 6).unwrap(),
        ] {
            let spans = spec.group_spans();
            let mut cursor = 0;
            for s in &spans {
                assert_eq!(s.start, cursor);
                cursor += s.len;
            }
            assert_eq!(cursor, spec.param_count());
            ParameterVector::new(vec![0.0; spec.param_count()], spans).unwrap();
        }
    }

    #[test]
    fn bad_group_maps_are_rejected() {
        let spans = |v: Vec<(&str, usize, usize)>| {
            v.into_iter()
                .map(|(l, s, n)| GroupSpan { label: l.into(), start: s, len: n })
                .collect::<Vec<_>>()
        };
        // gap
        assert!(ParameterVector::new(vec![0.0; 4], spans(vec![("a", 0, 1), ("b", 2, 2)])).is_err());
        // overlap
        assert!(ParameterVector::new(vec![0.0; 4], spans(vec![("a", 0, 3), ("b", 2, 2)])).is_err());
        // short cover
        assert!(ParameterVector::new(vec![0.0; 4], spans(vec![("a", 0, 3)])).is_err());
        // duplicate label
        assert!(ParameterVector::new(vec![0.0; 4], spans(vec![("a", 0, 2), ("a", 2, 2)])).is_err());
        // non-finite value
        assert!(matches!(
            ParameterVector::new(vec![0.0, f64::NAN], spans(vec![("a", 0, 2)])),
            Err(CoreError::Numeric { index: 1, .. })
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::mlp1(6, 8, 3).unwrap();
        let a = spec.init_params(42);
        let b = spec.init_params(42);
        let c = spec.init_params(43);
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        let bound = 1.0 / (6f64).sqrt();
        for &v in &a.values()[..spec.hidden_dim * spec.input_dim] {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn token_models_validate_windows() {
        let spec = ModelSpec::char_lm(8, 3, 2, 4).unwrap();
        let params = spec.zero_params();
        let ok = Batch::new(vec![Example { features: Features::Tokens(vec![0, 5, 7]), label: 2 }])
            .unwrap();
        forward_loss(&spec, &params, &ok).unwrap();

        let bad_tok =
            Batch::new(vec![Example { features: Features::Tokens(vec![0, 9, 1]), label: 0 }])
                .unwrap();
        assert!(matches!(forward_loss(&spec, &params, &bad_tok), Err(CoreError::Config(_))));

        let bad_len =
            Batch::new(vec![Example { features: Features::Tokens(vec![0, 1]), label: 0 }]).unwrap();
        assert!(matches!(forward_loss(&spec, &params, &bad_len), Err(CoreError::Config(_))));
    }

    #[test]
    fn batches_must_be_uniform() {
        assert!(Batch::new(vec![]).is_err());
        let mixed = Batch::new(vec![
            dense(&[1.0], 0),
            Example { features: Features::Tokens(vec![1]), label: 0 },
        ]);
        assert!(mixed.is_err());
    }
}
