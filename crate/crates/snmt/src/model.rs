//! Attentional encoder-decoder: feature-concatenating source embeddings, a
//! bidirectional GRU encoder, and one or more conditional-GRU decoders with
//! additive attention, deep output, and softmax projection.
//!
//! The decoder recurrence per step j:
//!
//! ```text
//! s'_j   = GRU1(E[y_{j-1}], s_{j-1})
//! c_j    = sum_i alpha_i h_i,  alpha = masked softmax of v' tanh(U h_i + W s'_j)
//! s_j    = GRU2(c_j, s'_j)
//! t_j    = tanh(W_y E[y_{j-1}] + W_s s_j + W_c c_j)
//! p(.|.) = softmax(t_j W_o)
//! ```
//!
//! Training minimizes the negative log-probability of the reference under
//! teacher forcing. All computation is built on a [`Tape`], so one code path
//! serves training, gradient checks, and decoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{GradientMap, NodeId, Tape, Tensor};
use crate::vocab::{Vocabulary, EOS, PAD};

/// One source feature: its name, vocabulary size, and embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub vocab_size: usize,
    pub width: usize,
}

/// Per-feature embedding layout; the concatenation of all feature embeddings
/// is the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpec {
    pub features: Vec<FeatureSpec>,
}

impl EmbeddingSpec {
    pub fn total_width(&self) -> usize {
        self.features.iter().map(|f| f.width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("embedding spec needs features".into()));
        }
        for f in &self.features {
            if f.width == 0 || f.vocab_size == 0 {
                return Err(Error::Config(format!(
                    "feature `{}` needs positive width and vocabulary",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

/// A decoder head: registry prefix and target vocabulary size.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSpec {
    pub name: String,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Per-direction encoder hidden size; also the decoder hidden size.
    pub hidden: usize,
    /// Width of the additive attention's hidden layer.
    pub attn_width: usize,
    /// Target embedding width.
    pub tgt_embed_width: usize,
    /// Width of the deep-output representation t_j.
    pub out_embed_width: usize,
    pub src_embedding: EmbeddingSpec,
    pub decoders: Vec<DecoderSpec>,
}

impl ModelConfig {
    /// Single-decoder config (baseline and interleaved strategies).
    pub fn single(
        hidden: usize,
        src_embedding: EmbeddingSpec,
        tgt_embed_width: usize,
        tgt_vocab_size: usize,
    ) -> ModelConfig {
        ModelConfig {
            hidden,
            attn_width: hidden,
            tgt_embed_width,
            out_embed_width: tgt_embed_width,
            src_embedding,
            decoders: vec![DecoderSpec {
                name: "dec".into(),
                vocab_size: tgt_vocab_size,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.src_embedding.validate()?;
        if self.hidden == 0 || self.attn_width == 0 || self.tgt_embed_width == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.decoders.is_empty() {
            return Err(Error::Config("model needs at least one decoder".into()));
        }
        Ok(())
    }

    pub fn decoder(&self, name: &str) -> Result<&DecoderSpec> {
        self.decoders
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("no decoder named `{name}`")))
    }
}

/// Ordered named parameter arrays. Order is the registry order used for
/// checkpoints, optimizer state, and gradient collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

impl Parameters {
    pub fn new() -> Parameters {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }
}

/// Reference to a vocabulary by role and content hash; checkpoints embed
/// these so ensembling can verify all members agree.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabRef {
    pub role: String,
    pub hash: [u8; 32],
}

impl VocabRef {
    pub fn of(role: &str, vocab: &Vocabulary) -> VocabRef {
        VocabRef {
            role: role.into(),
            hash: vocab.content_hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub vocab_refs: Vec<VocabRef>,
}

const INIT_RANGE: f64 = 0.08;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Tensor::new(shape.to_vec(), values).expect("init shapes are valid")
}

fn insert_gru(
    params: &mut Parameters,
    rng: &mut impl Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) {
    for gate in ["r", "z", "h"] {
        params
            .insert(&format!("{prefix}.w_{gate}"), random_tensor(rng, &[input, hidden]))
            .unwrap();
        params
            .insert(&format!("{prefix}.u_{gate}"), random_tensor(rng, &[hidden, hidden]))
            .unwrap();
        params
            .insert(&format!("{prefix}.b_{gate}"), Tensor::zeros(&[1, hidden]))
            .unwrap();
    }
}

impl Model {
    /// Initializes all weights uniformly in [-0.08, 0.08] and biases to zero,
    /// deterministically from `seed`.
    pub fn init(cfg: ModelConfig, vocab_refs: Vec<VocabRef>, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = seeds::rng_for(seed, "model-init");
        let mut params = Parameters::new();
        let h = cfg.hidden;
        let src_width = cfg.src_embedding.total_width();

        for f in &cfg.src_embedding.features {
            params.insert(
                &format!("src_emb.{}", f.name),
                random_tensor(&mut rng, &[f.vocab_size, f.width]),
            )?;
        }
        insert_gru(&mut params, &mut rng, "enc.fwd", src_width, h);
        insert_gru(&mut params, &mut rng, "enc.bwd", src_width, h);

        for dec in &cfg.decoders {
            let d = &dec.name;
            let e = cfg.tgt_embed_width;
            let o = cfg.out_embed_width;
            params.insert(&format!("{d}.emb"), random_tensor(&mut rng, &[dec.vocab_size, e]))?;
            params.insert(&format!("{d}.init.w"), random_tensor(&mut rng, &[2 * h, h]))?;
            params.insert(&format!("{d}.init.b"), Tensor::zeros(&[1, h]))?;
            insert_gru(&mut params, &mut rng, &format!("{d}.gru1"), e, h);
            params.insert(&format!("{d}.att.u"), random_tensor(&mut rng, &[2 * h, cfg.attn_width]))?;
            params.insert(&format!("{d}.att.w"), random_tensor(&mut rng, &[h, cfg.attn_width]))?;
            params.insert(&format!("{d}.att.v"), random_tensor(&mut rng, &[cfg.attn_width, 1]))?;
            insert_gru(&mut params, &mut rng, &format!("{d}.gru2"), 2 * h, h);
            params.insert(&format!("{d}.out.w_y"), random_tensor(&mut rng, &[e, o]))?;
            params.insert(&format!("{d}.out.w_s"), random_tensor(&mut rng, &[h, o]))?;
            params.insert(&format!("{d}.out.w_c"), random_tensor(&mut rng, &[2 * h, o]))?;
            params.insert(&format!("{d}.w_o"), random_tensor(&mut rng, &[o, dec.vocab_size]))?;
        }

        Ok(Model {
            cfg,
            params,
            vocab_refs,
        })
    }

    /// Parameter names belonging to one decoder head.
    pub fn decoder_param_names(&self, decoder: &str) -> Vec<String> {
        let prefix = format!("{decoder}.");
        self.params
            .names()
            .filter(|n| n.starts_with(&prefix))
            .map(str::to_string)
            .collect()
    }

    /// Parameter names shared across decoders (embeddings + encoder).
    pub fn shared_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("src_emb.") || n.starts_with("enc."))
            .map(str::to_string)
            .collect()
    }
}

/// Teacher-forced loss over one target stream.
#[derive(Clone, Debug)]
pub struct LossResult {
    /// Total negative log-likelihood.
    pub total: f64,
    /// Per-token log-probabilities (padding excluded).
    pub per_token_logprobs: Vec<f64>,
    /// Number of scored tokens.
    pub tokens: usize,
}

// ── graph building ──────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct GruNodes {
    w: [NodeId; 3],
    u: [NodeId; 3],
    b: [NodeId; 3],
}

#[derive(Clone, Copy)]
struct DecoderNodes {
    emb: NodeId,
    init_w: NodeId,
    init_b: NodeId,
    gru1: GruNodes,
    att_u: NodeId,
    att_w: NodeId,
    att_v: NodeId,
    gru2: GruNodes,
    out_wy: NodeId,
    out_ws: NodeId,
    out_wc: NodeId,
    w_o: NodeId,
}

/// Encoder output bound to one tape: the `[T, 2h]` state matrix plus the
/// source mask (false = padded position, excluded from attention).
pub struct EncodedSource {
    pub h: NodeId,
    pub len: usize,
    pub mask: Vec<bool>,
}

/// Per-decoder, per-sentence precomputation: `H U` rows and the initial
/// decoder state derived from mean-pooled encoder states.
pub struct DecoderCtx {
    pub hu: NodeId,
    pub s0: NodeId,
}

/// One decoder step's nodes.
pub struct StepOutput {
    /// s_j, the state to carry forward.
    pub state: NodeId,
    /// Softmax distribution over the decoder's vocabulary, `[1, V]`.
    pub dist: NodeId,
    /// Attention weights over source positions, `[1, T]`.
    pub alpha: NodeId,
    /// Context vector c_j, `[1, 2h]`.
    pub context: NodeId,
}

/// A model's parameters bound onto a fresh tape, with graph builders for
/// encoding, stepping, and losses. One `ModelGraph` serves one forward(+
/// backward) pass: a training minibatch or one sentence's decode.
pub struct ModelGraph<'m> {
    pub tape: Tape,
    model: &'m Model,
    bound: Vec<NodeId>,
    dec_cache: HashMap<String, DecoderNodes>,
    ones_cache: HashMap<usize, (NodeId, NodeId)>,
    neg_one: Option<NodeId>,
}

impl<'m> ModelGraph<'m> {
    pub fn new(model: &'m Model) -> ModelGraph<'m> {
        let mut tape = Tape::new();
        let bound = model
            .params
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        ModelGraph {
            tape,
            model,
            bound,
            dec_cache: HashMap::new(),
            ones_cache: HashMap::new(),
            neg_one: None,
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn node(&self, name: &str) -> NodeId {
        let i = self.model.params.index[name];
        self.bound[i]
    }

    fn gru_nodes(&self, prefix: &str) -> GruNodes {
        let get = |k: &str| self.node(&format!("{prefix}.{k}"));
        GruNodes {
            w: [get("w_r"), get("w_z"), get("w_h")],
            u: [get("u_r"), get("u_z"), get("u_h")],
            b: [get("b_r"), get("b_z"), get("b_h")],
        }
    }

    fn dec_nodes(&mut self, decoder: &str) -> DecoderNodes {
        if let Some(&nodes) = self.dec_cache.get(decoder) {
            return nodes;
        }
        let nodes = DecoderNodes {
            emb: self.node(&format!("{decoder}.emb")),
            init_w: self.node(&format!("{decoder}.init.w")),
            init_b: self.node(&format!("{decoder}.init.b")),
            gru1: self.gru_nodes(&format!("{decoder}.gru1")),
            att_u: self.node(&format!("{decoder}.att.u")),
            att_w: self.node(&format!("{decoder}.att.w")),
            att_v: self.node(&format!("{decoder}.att.v")),
            gru2: self.gru_nodes(&format!("{decoder}.gru2")),
            out_wy: self.node(&format!("{decoder}.out.w_y")),
            out_ws: self.node(&format!("{decoder}.out.w_s")),
            out_wc: self.node(&format!("{decoder}.out.w_c")),
            w_o: self.node(&format!("{decoder}.w_o")),
        };
        self.dec_cache.insert(decoder.to_string(), nodes);
        nodes
    }

    fn ones_pair(&mut self, width: usize) -> (NodeId, NodeId) {
        if let Some(&pair) = self.ones_cache.get(&width) {
            return pair;
        }
        let ones = self.tape.leaf(Tensor::full(&[1, width], 1.0));
        let neg_ones = self.tape.leaf(Tensor::full(&[1, width], -1.0));
        self.ones_cache.insert(width, (ones, neg_ones));
        (ones, neg_ones)
    }

    fn neg_one(&mut self) -> NodeId {
        if let Some(n) = self.neg_one {
            return n;
        }
        let n = self.tape.leaf(Tensor::scalar(-1.0));
        self.neg_one = Some(n);
        n
    }

    /// One GRU step: x `[1, in]`, h `[1, hidden]` → new h.
    fn gru_step(&mut self, g: &GruNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
        let t = &mut self.tape;
        let lin = |t: &mut Tape, i: usize, state: NodeId| -> Result<NodeId> {
            let xw = t.matmul(x, g.w[i])?;
            let hu = t.matmul(state, g.u[i])?;
            let s = t.add(xw, hu)?;
            t.add(s, g.b[i])
        };
        let r_pre = lin(t, 0, h)?;
        let r = t.sigmoid(r_pre)?;
        let z_pre = lin(t, 1, h)?;
        let z = t.sigmoid(z_pre)?;
        let rh = t.mul(r, h)?;
        let c_pre = lin(t, 2, rh)?;
        let cand = t.tanh(c_pre)?;
        // h' = z ⊙ h + (1 - z) ⊙ cand
        let hidden = self.model.cfg.hidden;
        let (ones, neg_ones) = self.ones_pair(hidden);
        let t = &mut self.tape;
        let zh = t.mul(z, h)?;
        let neg_z = t.mul(z, neg_ones)?;
        let one_minus_z = t.add(ones, neg_z)?;
        let zc = t.mul(one_minus_z, cand)?;
        t.add(zh, zc)
    }

    /// Embeds the per-feature id streams and concatenates them in spec
    /// order; all streams must be equally long and named by the spec.
    pub fn embed_source(&mut self, features: &[(String, Vec<u32>)]) -> Result<NodeId> {
        let spec = &self.model.cfg.src_embedding;
        for (name, _) in features {
            if !spec.features.iter().any(|f| &f.name == name) {
                return Err(Error::Config(format!("unknown source feature `{name}`")));
            }
        }
        let len = features
            .first()
            .map(|(_, ids)| ids.len())
            .ok_or_else(|| Error::Config("no source features given".into()))?;
        let mut parts = Vec::new();
        for f in &spec.features {
            let stream = features
                .iter()
                .find(|(name, _)| name == &f.name)
                .ok_or_else(|| Error::Config(format!("missing source feature `{}`", f.name)))?;
            if stream.1.len() != len {
                return Err(Error::Misaligned(format!(
                    "feature `{}` has {} tokens, expected {len}",
                    f.name,
                    stream.1.len()
                )));
            }
            let table = self.node(&format!("src_emb.{}", f.name));
            parts.push(self.tape.embed(table, &stream.1)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            self.tape.concat(&parts, 1)
        }
    }

    /// Bidirectional GRU over the embedded source; rows are `[fwd; bwd]`.
    pub fn encode(&mut self, features: &[(String, Vec<u32>)]) -> Result<EncodedSource> {
        let embedded = self.embed_source(features)?;
        let len = self.tape.value(embedded).rows();
        let width = self.tape.value(embedded).cols();
        let hidden = self.model.cfg.hidden;

        let fwd_gru = self.gru_nodes("enc.fwd");
        let bwd_gru = self.gru_nodes("enc.bwd");

        let mut fwd_states = Vec::with_capacity(len);
        let mut state = self.tape.leaf(Tensor::zeros(&[1, hidden]));
        for t in 0..len {
            let x = self.tape.slice(embedded, (t, t + 1), (0, width))?;
            state = self.gru_step(&fwd_gru, x, state)?;
            fwd_states.push(state);
        }

        let mut bwd_states = Vec::with_capacity(len);
        let mut state = self.tape.leaf(Tensor::zeros(&[1, hidden]));
        for t in (0..len).rev() {
            let x = self.tape.slice(embedded, (t, t + 1), (0, width))?;
            state = self.gru_step(&bwd_gru, x, state)?;
            bwd_states.push(state);
        }
        bwd_states.reverse();

        let fwd = self.stack_rows(&fwd_states)?;
        let bwd = self.stack_rows(&bwd_states)?;
        let h = self.tape.concat(&[fwd, bwd], 1)?;
        Ok(EncodedSource {
            h,
            len,
            mask: vec![true; len],
        })
    }

    fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            self.tape.concat(rows, 0)
        }
    }

    /// Precomputes the attention keys and initial state for one decoder:
    /// s_0 = tanh(W mean(h) + b).
    pub fn decoder_ctx(&mut self, decoder: &str, enc: &EncodedSource) -> Result<DecoderCtx> {
        let dn = self.dec_nodes(decoder);
        let hu = self.tape.matmul(enc.h, dn.att_u)?;
        let mean_row = self
            .tape
            .leaf(Tensor::full(&[1, enc.len], 1.0 / enc.len as f64));
        let mean = self.tape.matmul(mean_row, enc.h)?;
        let lin = self.tape.matmul(mean, dn.init_w)?;
        let lin_b = self.tape.add(lin, dn.init_b)?;
        let s0 = self.tape.tanh(lin_b)?;
        Ok(DecoderCtx { hu, s0 })
    }

    /// Additive attention: c = sum_i alpha_i h_i with
    /// alpha = masked softmax over e_i = v' tanh(U h_i + W s').
    pub fn attention(
        &mut self,
        decoder: &str,
        enc: &EncodedSource,
        ctx: &DecoderCtx,
        s_prime: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let dn = self.dec_nodes(decoder);
        self.attention_nodes(&dn, enc, ctx, s_prime)
    }

    fn attention_nodes(
        &mut self,
        dn: &DecoderNodes,
        enc: &EncodedSource,
        ctx: &DecoderCtx,
        s_prime: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let t = &mut self.tape;
        let ws = t.matmul(s_prime, dn.att_w)?;
        let pre = t.add(ctx.hu, ws)?; // bias-row broadcast over positions
        let act = t.tanh(pre)?;
        let scores = t.matmul(act, dn.att_v)?;
        let row = t.reshape(scores, &[1, enc.len])?;
        let alpha = t.masked_softmax_rows(row, &enc.mask)?;
        let c = t.matmul(alpha, enc.h)?;
        Ok((c, alpha))
    }

    /// The conditional-GRU core: s', c, s, t_j. Returns `(state, context,
    /// alpha, deep_output)` without the softmax projection.
    fn step_core(
        &mut self,
        dn: &DecoderNodes,
        enc: &EncodedSource,
        ctx: &DecoderCtx,
        s_prev: NodeId,
        y_prev: u32,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let y_emb = self.tape.embed(dn.emb, &[y_prev])?;
        let s_prime = self.gru_step(&dn.gru1, y_emb, s_prev)?;
        let (c, alpha) = self.attention_nodes(dn, enc, ctx, s_prime)?;
        let s = self.gru_step(&dn.gru2, c, s_prime)?;

        let t = &mut self.tape;
        let ya = t.matmul(y_emb, dn.out_wy)?;
        let sa = t.matmul(s, dn.out_ws)?;
        let ca = t.matmul(c, dn.out_wc)?;
        let sum1 = t.add(ya, sa)?;
        let sum2 = t.add(sum1, ca)?;
        let deep = t.tanh(sum2)?;
        Ok((s, c, alpha, deep))
    }

    /// One decoder step producing the full output distribution.
    pub fn step(
        &mut self,
        decoder: &str,
        enc: &EncodedSource,
        ctx: &DecoderCtx,
        s_prev: NodeId,
        y_prev: u32,
    ) -> Result<StepOutput> {
        let dn = self.dec_nodes(decoder);
        let (state, context, alpha, deep) = self.step_core(&dn, enc, ctx, s_prev, y_prev)?;
        let logits = self.tape.matmul(deep, dn.w_o)?;
        let dist = self.tape.softmax_rows(logits)?;
        Ok(StepOutput {
            state,
            dist,
            alpha,
            context,
        })
    }

    /// Teacher-forced negative log-likelihood of `tgt` (which must end with
    /// EOS). The first step is conditioned on PAD as the start symbol; PAD
    /// positions inside the target are excluded from the loss.
    pub fn sequence_loss(
        &mut self,
        decoder: &str,
        enc: &EncodedSource,
        tgt: &[u32],
    ) -> Result<LossNodes> {
        if tgt.last() != Some(&EOS) {
            return Err(Error::InvalidArgument(
                "target stream must end with EOS".into(),
            ));
        }
        let dn = self.dec_nodes(decoder);
        let ctx = self.decoder_ctx(decoder, enc)?;
        let mut state = ctx.s0;
        let mut deeps = Vec::with_capacity(tgt.len());
        let mut y_prev = PAD;
        for &gold in tgt {
            let (s, _c, _a, deep) = self.step_core(&dn, enc, &ctx, state, y_prev)?;
            state = s;
            deeps.push(deep);
            y_prev = gold;
        }
        let deep = self.stack_rows(&deeps)?;
        let logits = self.tape.matmul(deep, dn.w_o)?;
        let probs = self.tape.softmax_rows(logits)?;
        let (rows, cols): (Vec<usize>, Vec<u32>) = tgt
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != PAD)
            .map(|(j, &id)| (j, id))
            .unzip();
        let picked = self.tape.pick(probs, &rows, &cols)?;
        let logprobs = self.tape.log(picked)?;
        let total = self.tape.sum(logprobs)?;
        let neg = self.neg_one();
        let loss = self.tape.mul(total, neg)?;
        Ok(LossNodes {
            loss,
            logprobs,
            tokens: rows.len(),
        })
    }

    /// Sums already-built scalar loss nodes.
    pub fn add_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.tape.add(a, b)
    }

    /// Runs backward from `loss` and returns gradients aligned with the
    /// model's parameter order.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor>> {
        let gmap = self.tape.backward(loss)?;
        Ok(self.collect(&gmap))
    }

    /// Extracts parameter gradients (registry order) from a gradient map.
    pub fn collect(&self, gmap: &GradientMap) -> Vec<Tensor> {
        self.bound
            .iter()
            .map(|&id| {
                gmap.get(id)
                    .expect("parameter nodes always have gradient entries")
                    .clone()
            })
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }
}

/// Loss nodes for one sentence: the scalar, the per-token log-probs, and the
/// scored token count.
pub struct LossNodes {
    pub loss: NodeId,
    pub logprobs: NodeId,
    pub tokens: usize,
}

/// Convenience wrapper: loss of one (source, target) pair on a fresh tape.
pub fn sequence_loss(
    model: &Model,
    decoder: &str,
    src_features: &[(String, Vec<u32>)],
    tgt: &[u32],
) -> Result<LossResult> {
    let mut g = ModelGraph::new(model);
    let enc = g.encode(src_features)?;
    let nodes = g.sequence_loss(decoder, &enc, tgt)?;
    let total = g.value(nodes.loss).values()[0];
    let per_token = g.value(nodes.logprobs).values().to_vec();
    Ok(LossResult {
        total,
        per_token_logprobs: per_token,
        tokens: nodes.tokens,
    })
}

/// Central-finite-difference check of a model-level loss builder against the
/// tape's analytic gradients, over every element of every parameter.
///
/// `build` must be a deterministic function of the model parameters. Returns
/// the max of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_model_gradients<F>(model: &Model, build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut ModelGraph) -> Result<NodeId> + Sync,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in (0, 1e-3], got {h}"
        )));
    }
    let mut g = ModelGraph::new(model);
    let loss = build(&mut g)?;
    let lv = g.tape.value(loss);
    if lv.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: lv.shape().to_vec(),
        });
    }
    if !lv.is_finite() {
        return Err(Error::NonFinite {
            context: "check_model_gradients forward".into(),
        });
    }
    let analytic = g.backward(loss)?;
    drop(g);

    let eval = |m: &Model| -> Result<f64> {
        let mut g = ModelGraph::new(m);
        let loss = build(&mut g)?;
        let v = g.tape.value(loss).values()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "check_model_gradients perturbed forward".into(),
            });
        }
        Ok(v)
    };

    // every (parameter, element) perturbation is independent; fan out
    // across tapes
    use rayon::prelude::*;
    let coords: Vec<(usize, usize)> = (0..model.params.len())
        .flat_map(|pi| (0..model.params.at(pi).1.len()).map(move |e| (pi, e)))
        .collect();
    let errs: Result<Vec<f64>> = coords
        .par_iter()
        .map(|&(pi, e)| {
            let mut work = model.clone();
            let orig = work.params.at(pi).1.values()[e];
            work.params.at_mut(pi).values_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work.params.at_mut(pi).values_mut()[e] = orig - h;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].values()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            Ok((a - numeric).abs() / denom)
        })
        .collect();
    Ok(errs?.into_iter().fold(0.0, f64::max))
}

// ── checkpoint container ────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"SNMTCKPT";
const VERSION: u8 = 1;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: invalid utf-8 name", self.path)))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Model {
    /// Serializes the model to the checkpoint container: magic, version,
    /// embedding spec, vocabulary references by content hash, and named
    /// parameter arrays as (name, rank, extents, little-endian f64 payload).
    /// The round trip is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.cfg.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.attn_width as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.tgt_embed_width as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.out_embed_width as u32).to_le_bytes());

        out.extend_from_slice(&(self.cfg.src_embedding.features.len() as u16).to_le_bytes());
        for f in &self.cfg.src_embedding.features {
            put_string(&mut out, &f.name);
            out.extend_from_slice(&(f.vocab_size as u64).to_le_bytes());
            out.extend_from_slice(&(f.width as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.cfg.decoders.len() as u16).to_le_bytes());
        for d in &self.cfg.decoders {
            put_string(&mut out, &d.name);
            out.extend_from_slice(&(d.vocab_size as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.vocab_refs.len() as u16).to_le_bytes());
        for r in &self.vocab_refs {
            put_string(&mut out, &r.role);
            out.extend_from_slice(&r.hash);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_string(&mut out, name);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut c = Cursor {
            data: &data,
            pos: 0,
            path: path.display().to_string(),
        };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let hidden = c.u32()? as usize;
        let attn_width = c.u32()? as usize;
        let tgt_embed_width = c.u32()? as usize;
        let out_embed_width = c.u32()? as usize;

        let nf = c.u16()? as usize;
        let mut features = Vec::with_capacity(nf);
        for _ in 0..nf {
            let name = c.string()?;
            let vocab_size = c.u64()? as usize;
            let width = c.u32()? as usize;
            features.push(FeatureSpec {
                name,
                vocab_size,
                width,
            });
        }
        let nd = c.u16()? as usize;
        let mut decoders = Vec::with_capacity(nd);
        for _ in 0..nd {
            let name = c.string()?;
            let vocab_size = c.u64()? as usize;
            decoders.push(DecoderSpec { name, vocab_size });
        }
        let nr = c.u16()? as usize;
        let mut vocab_refs = Vec::with_capacity(nr);
        for _ in 0..nr {
            let role = c.string()?;
            let hash: [u8; 32] = c.take(32)?.try_into().unwrap();
            vocab_refs.push(VocabRef { role, hash });
        }
        let np = c.u32()? as usize;
        let mut params = Parameters::new();
        for _ in 0..np {
            let name = c.string()?;
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
            }
            params.insert(&name, Tensor::new(shape, values)?)?;
        }
        if c.pos != data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                path.display(),
                data.len() - c.pos
            )));
        }
        let cfg = ModelConfig {
            hidden,
            attn_width,
            tgt_embed_width,
            out_embed_width,
            src_embedding: EmbeddingSpec { features },
            decoders,
        };
        cfg.validate()?;
        Ok(Model {
            cfg,
            params,
            vocab_refs,
        })
    }
}
