//! Pre-norm decoder-only transformer with the attribution heads' parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    /// Reserved citation tokens at the top of the vocabulary (`N_max`).
    pub n_citation: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            n_citation: 8,
            hidden_size: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 512,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_size == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad("hidden_size, n_heads and max_seq_len must be positive".into());
        }
        if self.hidden_size % self.n_heads != 0 {
            return bad(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        Vocab::new(self.vocab_size, self.n_citation)?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size, self.n_citation).expect("validated config")
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn ffn_size(&self) -> usize {
        4 * self.hidden_size
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden_size;
        let f = self.ffn_size();
        let mut out = vec![
            ("tok_emb".to_string(), (self.vocab_size, h)),
            ("pos_emb".to_string(), (self.max_seq_len, h)),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), (1, h)),
                (p("ln1.bias"), (1, h)),
                (p("attn.wq"), (h, h)),
                (p("attn.wk"), (h, h)),
                (p("attn.wv"), (h, h)),
                (p("attn.wo"), (h, h)),
                (p("ln2.gain"), (1, h)),
                (p("ln2.bias"), (1, h)),
                (p("mlp.w1"), (h, f)),
                (p("mlp.b1"), (1, f)),
                (p("mlp.w2"), (f, h)),
                (p("mlp.b2"), (1, h)),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), (1, h)),
            ("ln_f.bias".to_string(), (1, h)),
            ("lm_head".to_string(), (self.vocab_size, h)),
            ("router.w".to_string(), (2, h)),
            ("align.w".to_string(), (h, h)),
            ("align.b".to_string(), (1, h)),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

const PER_LAYER: usize = 12;

/// Storage indices of the parameter groups.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    n_layers: usize,
}

pub(crate) struct LayerIdx {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Layout {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;

    fn tail(&self) -> usize {
        2 + PER_LAYER * self.n_layers
    }

    pub fn layer(&self, l: usize) -> LayerIdx {
        let b = 2 + PER_LAYER * l;
        LayerIdx {
            ln1_gain: b,
            ln1_bias: b + 1,
            wq: b + 2,
            wk: b + 3,
            wv: b + 4,
            wo: b + 5,
            ln2_gain: b + 6,
            ln2_bias: b + 7,
            w1: b + 8,
            b1: b + 9,
            w2: b + 10,
            b2: b + 11,
        }
    }

    pub fn lnf_gain(&self) -> usize {
        self.tail()
    }
    pub fn lnf_bias(&self) -> usize {
        self.tail() + 1
    }
    pub fn lm_head(&self) -> usize {
        self.tail() + 2
    }
    pub fn router_w(&self) -> usize {
        self.tail() + 3
    }
    pub fn align_w(&self) -> usize {
        self.tail() + 4
    }
    pub fn align_b(&self) -> usize {
        self.tail() + 5
    }
}

/// All trainable parameters, addressable by stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ModelState {
    /// Seeded initialisation: normal(0, 0.02) matrices, unit layer-norm gains,
    /// zero biases.
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, (r, c)) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::from_vec(r, c, vec![1.0; r * c])
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "align.b" {
                Tensor::zeros(r, c)
            } else {
                Tensor::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            params,
        })
    }

    /// Rebuilds a state from named tensors, checking names and shapes against
    /// the config's layout.
    pub fn from_parts(config: BackboneConfig, parts: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != parts.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                parts.len()
            )));
        }
        for ((name, shape), (pname, t)) in shapes.iter().zip(&parts) {
            if name != pname || *shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = parts.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            n_layers: self.config.n_layers,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn load(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|t| tape.leaf(t.clone())).collect(),
            layout: self.layout(),
        }
    }
}

/// Per-parameter gradients, in the same order as [`ModelState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self(
            state
                .params()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

/// A state's parameters as tape leaves.
pub struct ParamVars {
    vars: Vec<Var>,
    layout: Layout,
}

impl ParamVars {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn tok_emb(&self) -> Var {
        self.vars[Layout::TOK_EMB]
    }

    pub(crate) fn layout(&self) -> Layout {
        self.layout
    }

    /// Gradients for every parameter; untouched ones are zero.
    pub fn collect(&self, tape: &Tape, grads: &mut crate::autograd::Grads) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .map(|&v| {
                    grads.take(v).unwrap_or_else(|| {
                        let (r, c) = tape.shape(v);
                        Tensor::zeros(r, c)
                    })
                })
                .collect(),
        )
    }
}

/// Graph handles produced by [`forward_graph`].
pub struct TraceVars {
    pub embeddings: Var,
    pub hidden: Var,
    pub queries: Var,
    pub keys: Var,
    /// `[layer][head]` attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// Runs the decoder stack on already-embedded inputs (`L×H`). Position
/// embeddings are added here. `hidden` is the final-norm output that every
/// head reads. Zero-layer configs give `LN_f(e + p)`.
pub fn forward_graph(
    tape: &mut Tape,
    config: &BackboneConfig,
    p: &ParamVars,
    embeddings: Var,
) -> Result<TraceVars> {
    let (len, h) = tape.shape(embeddings);
    if len > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_seq_len,
        });
    }
    if h != config.hidden_size {
        return Err(Error::LengthMismatch {
            what: "embedding width vs hidden_size",
            left: h,
            right: config.hidden_size,
        });
    }
    let lay = p.layout();
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.select_rows(p.var(Layout::POS_EMB), &positions);
    let mut x = tape.add(embeddings, pos);
    let heads = config.n_heads;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut attention = Vec::with_capacity(config.n_layers);
    let mut last_qk = None;
    for l in 0..config.n_layers {
        let li = lay.layer(l);
        let a = tape.layer_norm(x, p.var(li.ln1_gain), p.var(li.ln1_bias));
        let q = tape.matmul(a, p.var(li.wq));
        let k = tape.matmul(a, p.var(li.wk));
        let v = tape.matmul(a, p.var(li.wv));
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * d, d);
            let kh = tape.slice_cols(k, hd * d, d);
            let vh = tape.slice_cols(v, hd * d, d);
            let scores = tape.matmul_bt(qh, kh);
            let w = tape.causal_softmax(scores, scale);
            outs.push(tape.matmul(w, vh));
            weights.push(w);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(outs) };
        let proj = tape.matmul(cat, p.var(li.wo));
        x = tape.add(x, proj);
        let b = tape.layer_norm(x, p.var(li.ln2_gain), p.var(li.ln2_bias));
        let f = tape.matmul(b, p.var(li.w1));
        let f = tape.add_row(f, p.var(li.b1));
        let f = tape.gelu(f);
        let f = tape.matmul(f, p.var(li.w2));
        let f = tape.add_row(f, p.var(li.b2));
        x = tape.add(x, f);
        attention.push(weights);
        last_qk = Some((q, k));
    }
    let hidden = tape.layer_norm(x, p.var(lay.lnf_gain()), p.var(lay.lnf_bias()));
    // With no layers there is no attention; the final hidden state stands in.
    let (queries, keys) = last_qk.unwrap_or((hidden, hidden));
    Ok(TraceVars {
        embeddings,
        hidden,
        queries,
        keys,
        attention,
    })
}

/// Vocabulary logits for the given hidden rows.
pub fn lm_logits_graph(tape: &mut Tape, p: &ParamVars, hidden_rows: Var) -> Var {
    tape.matmul_bt(hidden_rows, p.var(p.layout().lm_head()))
}

/// Plain-value view of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Input embeddings `e_t` (before position embeddings).
    pub embeddings: Tensor,
    /// Last-layer hidden states `h_t`.
    pub hidden: Tensor,
    /// Last-layer queries, heads laid out as consecutive column blocks.
    pub queries: Tensor,
    pub keys: Tensor,
    pub n_heads: usize,
    pub logits: Tensor,
    /// `[layer][head]` causal attention weights.
    pub attention: Vec<Vec<Tensor>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    /// Last-layer attention averaged over heads.
    pub fn mean_last_attention(&self) -> Option<Tensor> {
        let last = self.attention.last()?;
        let mut acc = Tensor::zeros(self.len(), self.len());
        for w in last {
            acc.add_assign(w);
        }
        acc.scale_assign(1.0 / last.len() as f64);
        Some(acc)
    }
}

pub fn forward(state: &ModelState, embeddings: &Tensor) -> Result<ForwardTrace> {
    if !embeddings.is_finite() {
        return Err(Error::NonFiniteInput("forward"));
    }
    let mut tape = Tape::new();
    let p = state.load(&mut tape);
    let x = tape.leaf(embeddings.clone());
    let tv = forward_graph(&mut tape, state.config(), &p, x)?;
    let logits = lm_logits_graph(&mut tape, &p, tv.hidden);
    Ok(ForwardTrace {
        embeddings: tape.value(tv.embeddings).clone(),
        hidden: tape.value(tv.hidden).clone(),
        queries: tape.value(tv.queries).clone(),
        keys: tape.value(tv.keys).clone(),
        n_heads: state.config().n_heads,
        logits: tape.value(logits).clone(),
        attention: tv
            .attention
            .iter()
            .map(|hs| hs.iter().map(|&w| tape.value(w).clone()).collect())
            .collect(),
    })
}

fn check_ids(state: &ModelState, ids: &[usize]) -> Result<()> {
    let vs = state.config().vocab_size;
    match ids.iter().find(|&&id| id >= vs) {
        Some(&id) => Err(Error::UnknownToken { id, vocab_size: vs }),
        None => Ok(()),
    }
}

/// Table lookup, `L×H`.
pub fn embed(state: &ModelState, ids: &[usize]) -> Result<Tensor> {
    check_ids(state, ids)?;
    let table = &state.params()[Layout::TOK_EMB];
    let mut out = Tensor::zeros(ids.len(), table.cols());
    for (k, &id) in ids.iter().enumerate() {
        out.row_mut(k).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Differentiable table lookup.
pub fn embed_graph(tape: &mut Tape, state: &ModelState, p: &ParamVars, ids: &[usize]) -> Result<Var> {
    check_ids(state, ids)?;
    Ok(tape.select_rows(p.tok_emb(), ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 128,
            n_citation: 4,
            hidden_size: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            seed: 3,
        }
    }

    fn inputs(len: usize, h: usize, salt: f64) -> Tensor {
        Tensor::from_vec(
            len,
            h,
            (0..len * h).map(|i| ((i as f64 * 0.37 + salt).sin()) * 0.5).collect(),
        )
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = small();
        c.hidden_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_is_reproducible_from_config() {
        let c = small();
        let s = ModelState::init(&c).unwrap();
        assert_eq!(s.param_count(), c.param_count());
        let h = 16;
        // two layer norms, four attention maps, the MLP and its biases
        let per_layer = 2 * h + 4 * h * h + 2 * h + h * 4 * h + 4 * h + 4 * h * h + h;
        let expect = 128 * h + 32 * h + 2 * per_layer + 2 * h + 128 * h + 2 * h + h * h + h;
        assert_eq!(c.param_count(), expect);
        assert!(s.names().iter().all(|n| s.param(n).is_some()));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = ModelState::init(&small()).unwrap();
        let b = ModelState::init(&small()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = small();
        c.seed = 4;
        assert_ne!(a.fingerprint(), ModelState::init(&c).unwrap().fingerprint());
    }

    #[test]
    fn trace_shapes_match_input_length() {
        let s = ModelState::init(&small()).unwrap();
        let t = forward(&s, &inputs(7, 16, 0.0)).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.embeddings.shape(), (7, 16));
        assert_eq!(t.queries.shape(), (7, 16));
        assert_eq!(t.keys.shape(), (7, 16));
        assert_eq!(t.logits.shape(), (7, 128));
        assert_eq!(t.attention.len(), 2);
        assert_eq!(t.attention[1][0].shape(), (7, 7));
    }

    #[test]
    fn too_long_is_rejected() {
        let s = ModelState::init(&small()).unwrap();
        assert!(matches!(
            forward(&s, &inputs(33, 16, 0.0)),
            Err(Error::SequenceTooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn perturbing_position_k_leaves_earlier_positions_unchanged() {
        let s = ModelState::init(&small()).unwrap();
        let x = inputs(9, 16, 0.1);
        let base = forward(&s, &x).unwrap();
        for k in 0..9 {
            let mut y = x.clone();
            for v in y.row_mut(k) {
                *v += 0.75;
            }
            let t = forward(&s, &y).unwrap();
            for pos in 0..k {
                assert_eq!(t.hidden.row(pos), base.hidden.row(pos));
                assert_eq!(t.queries.row(pos), base.queries.row(pos));
            }
            assert_ne!(t.hidden.row(k), base.hidden.row(k));
        }
    }

    #[test]
    fn zero_layer_stack_passes_inputs_through() {
        let mut c = small();
        c.n_layers = 0;
        let mut s = ModelState::init(&c).unwrap();
        // With zero position embeddings and an identity final norm on
        // zero-mean unit-variance rows, the hidden state is the input itself.
        s.param_mut("pos_emb").unwrap().scale_assign(0.0);
        let mut x = inputs(5, 16, 0.3);
        for r in 0..5 {
            let row = x.row_mut(r);
            let m = row.iter().sum::<f64>() / 16.0;
            row.iter_mut().for_each(|v| *v -= m);
            let sd = (row.iter().map(|v| v * v).sum::<f64>() / 16.0 + 1e-5).sqrt();
            row.iter_mut().for_each(|v| *v /= sd);
        }
        let t = forward(&s, &x).unwrap();
        for (a, b) in t.hidden.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(t.attention.is_empty());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let s = ModelState::init(&small()).unwrap();
        let x = inputs(6, 16, 0.2);
        assert_eq!(forward(&s, &x).unwrap(), forward(&s, &x).unwrap());
    }

    #[test]
    fn embed_is_table_lookup() {
        let s = ModelState::init(&small()).unwrap();
        let e = embed(&s, &[5, 9, 5]).unwrap();
        assert_eq!(e.row(0), e.row(2));
        assert_eq!(e.row(1), s.param("tok_emb").unwrap().row(9));
        assert!(matches!(
            embed(&s, &[128]),
            Err(Error::UnknownToken { id: 128, vocab_size: 128 })
        ));
    }

    #[test]
    fn embedding_sum_gradient_is_all_ones_on_the_row() {
        let s = ModelState::init(&small()).unwrap();
        let mut tape = Tape::new();
        let p = s.load(&mut tape);
        let e = embed_graph(&mut tape, &s, &p, &[7]).unwrap();
        let ones = tape.leaf(Tensor::from_vec(16, 1, vec![1.0; 16]));
        let sum = tape.matmul(e, ones);
        let mut g = tape.backward(sum);
        let grads = p.collect(&tape, &mut g);
        let table = &grads.0[Layout::TOK_EMB];
        assert!(table.row(7).iter().all(|&v| v == 1.0));
        assert_eq!(table.sum_sq(), 16.0);
    }
}
