//! Encoder, token head, history embedding and action expert.
//!
//! Context tokens and output tokens run through one stack of pre-norm
//! transformer layers: context rows attend to each other, token rows attend
//! to the context and causally to earlier tokens. The per-layer keys/values of
//! the context plus reasoning prefix form the cache that the action expert
//! cross-attends to.
//!
//! The action expert keeps a fixed number of query slots. Each flow step
//! embeds the current waypoints, lets the slots read them, runs the bridging
//! layers (slot self-attention, cross-attention into one selected encoder
//! layer's cache, gated MLP) and reads the slots back out per waypoint, so its
//! cost barely grows with the horizon.

use rand::Rng;
use rand_distr::StandardNormal;

use super::codebook::ActionCodebook;
use super::context::{encode_features, ContextTokens, FEATURE_DIM};
use super::flow::euler_integrate;
use super::vocab::{teacher_masks, GrammarState, TokenVocabulary};
use super::{PolicyConfig, PolicyError};
use crate::microworld::geometry::Pose;
use crate::microworld::scene::Scenario;
use crate::microworld::trajectory::Trajectory;
use crate::microworld::Vec2;
use crate::nnkit::layers::{sinusoidal, Attention, Embedding, GatedMlp, LayerNorm, Linear};
use crate::nnkit::tape::{log_softmax_at, softmax_rows};
use crate::nnkit::{Init, NnError, ParamId, ParamStore, Tape, Tensor, Var};

const TIME_FEATURES: usize = 16;
const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: GatedMlp,
}

#[derive(Debug, Clone, Copy)]
struct BridgeLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross: Attention,
    ln_mlp: LayerNorm,
    mlp: GatedMlp,
}

#[derive(Debug, Clone, Copy)]
struct HistoryNet {
    hidden: Linear,
    anchors: Linear,
    query: Linear,
}

/// Parameter handles of the whole network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PolicyNet {
    enc_in: Linear,
    layers: Vec<EncoderLayer>,
    tok_emb: Embedding,
    ln_f: LayerNorm,
    out: Linear,
    wp_in: Linear,
    /// Waypoint position encoding (T x d_bridge), fixed for the horizon.
    wp_pos: Tensor,
    time: Linear,
    slots: ParamId,
    ln_g_slots: LayerNorm,
    gather: Attention,
    bridge: Vec<BridgeLayer>,
    ln_r_slots: LayerNorm,
    read: Attention,
    ln_o: LayerNorm,
    out_a: Linear,
    hist: HistoryNet,
}

/// Per-layer keys and values over the context (and any token prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache {
    pub layers: Vec<(Tensor, Tensor)>,
    /// Key validity (padding is `false`).
    pub valid: Vec<bool>,
}

impl LayerKvCache {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    fn key_mask(&self, rows: usize) -> Option<Tensor> {
        if self.valid.iter().all(|&v| v) {
            return None;
        }
        let row: Vec<f64> = self.valid.iter().map(|&v| if v { 0.0 } else { NEG_INF }).collect();
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        Some(Tensor { rows, cols: row.len(), data })
    }
}

/// Anchors (1 x 2T, internal units) and slot query features (1 x d_bridge).
#[derive(Debug, Clone, Copy)]
pub struct HistoryEmbedding {
    pub anchors: Var,
    pub query: Var,
}

/// Waypoint-side maps that do not depend on the flow state. Each is a pair
/// `(W, C)` applied as `a W + C` to the waypoint actions `a` (T x 2): `W` is
/// 2 x d_bridge and `C` (T x d_bridge) carries the position encoding and bias.
#[derive(Debug, Clone, Copy)]
pub struct WaypointMaps {
    embed: (Var, Var),
    keys: (Var, Var),
    values: (Var, Var),
    queries: (Var, Var),
}

fn apply_map(tape: &mut Tape, a: Var, (w, c): (Var, Var)) -> Result<Var, NnError> {
    let y = tape.matmul(a, w)?;
    tape.add(y, c)
}

/// Result of autoregressive decoding.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub reason_len: usize,
    /// Sum of masked log-probabilities of the emitted tokens.
    pub logprob: f64,
    /// Cache over context + BOS + emitted tokens (all but the last are fed back).
    pub cache: LayerKvCache,
    pub finished: bool,
}

/// Per-row negative log-likelihoods of teacher-forced sequences.
#[derive(Debug, Clone)]
pub struct SequenceScores {
    pub nll: Var,
    pub spans: Vec<(usize, usize)>,
}

/// Network, parameters and codebook.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub cfg: PolicyConfig,
    pub vocab: TokenVocabulary,
    pub net: PolicyNet,
    pub store: ParamStore,
    pub codebook: ActionCodebook,
    pub sparse: Vec<usize>,
}

fn layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<LayerNorm, NnError> {
    LayerNorm::new(store, name, d)
}

impl PolicyNet {
    fn build(cfg: &PolicyConfig, vocab: &TokenVocabulary, n_bridge: usize, store: &mut ParamStore) -> Result<Self, NnError> {
        let d = cfg.d_model;
        let db = cfg.d_bridge;
        let t2 = 2 * cfg.future_steps;
        let enc_in = Linear::new(store, "enc.in", FEATURE_DIM, d, true)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(EncoderLayer {
                ln1: layer_norm(store, &format!("enc.l{i}.ln1"), d)?,
                attn: Attention::new(store, &format!("enc.l{i}.attn"), d, d, cfg.heads)?,
                ln2: layer_norm(store, &format!("enc.l{i}.ln2"), d)?,
                mlp: GatedMlp::new(store, &format!("enc.l{i}.mlp"), d, cfg.mlp_hidden)?,
            });
        }
        let tok_emb = Embedding::new(store, "head.tok", vocab.size() + 1, d)?;
        let ln_f = layer_norm(store, "head.ln_f", d)?;
        let out = Linear::new(store, "head.out", d, vocab.size(), true)?;

        let wp_in = Linear::new(store, "bridge.wp_in", 2, db, true)?;
        let pos: Vec<f64> = (0..cfg.future_steps).map(|j| j as f64).collect();
        let wp_pos = sinusoidal(&pos, db, 100.0);
        let time = Linear::new(store, "bridge.time", TIME_FEATURES, db, true)?;
        let slots = store.add("bridge.slots", cfg.query_slots, db, Init::Uniform(0.5))?;
        let ln_g_slots = layer_norm(store, "bridge.gather.ln_q", db)?;
        let gather = Attention::new(store, "bridge.gather.attn", db, db, cfg.heads)?;
        let mut bridge = Vec::with_capacity(n_bridge);
        for i in 0..n_bridge {
            bridge.push(BridgeLayer {
                ln_self: layer_norm(store, &format!("bridge.l{i}.ln_self"), db)?,
                self_attn: Attention::new(store, &format!("bridge.l{i}.self"), db, db, cfg.heads)?,
                ln_cross: layer_norm(store, &format!("bridge.l{i}.ln_cross"), db)?,
                cross: Attention::new(store, &format!("bridge.l{i}.cross"), db, d, cfg.heads)?,
                ln_mlp: layer_norm(store, &format!("bridge.l{i}.ln_mlp"), db)?,
                mlp: GatedMlp::new(store, &format!("bridge.l{i}.mlp"), db, cfg.bridge_mlp_hidden)?,
            });
        }
        let ln_r_slots = layer_norm(store, "bridge.read.ln_kv", db)?;
        let read = Attention::new(store, "bridge.read.attn", db, db, cfg.heads)?;
        let ln_o = layer_norm(store, "bridge.out.ln", db)?;
        let out_a = Linear::new(store, "bridge.out", db, 2, true)?;

        let h_in = 2 * (cfg.history_steps + 1);
        let hist = HistoryNet {
            hidden: Linear::new(store, "hist.hidden", h_in, cfg.history_hidden, true)?,
            anchors: Linear::new(store, "hist.anchors", cfg.history_hidden, t2, true)?,
            query: Linear::new(store, "hist.query", cfg.history_hidden, db, true)?,
        };
        Ok(Self {
            enc_in,
            layers,
            tok_emb,
            ln_f,
            out,
            wp_in,
            wp_pos,
            time,
            slots,
            ln_g_slots,
            gather,
            bridge,
            ln_r_slots,
            read,
            ln_o,
            out_a,
            hist,
        })
    }

    pub fn n_bridge_layers(&self) -> usize {
        self.bridge.len()
    }

    /// Run `x` through every encoder layer. `prefix` supplies constant
    /// keys/values for earlier rows. Returns the final hidden rows and each
    /// layer's keys/values over prefix + new rows.
    fn run_layers(
        &self,
        tape: &mut Tape,
        mut x: Var,
        prefix: Option<&LayerKvCache>,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<(Var, Var)>), NnError> {
        let mut kvs = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let h = l.ln1.forward(tape, x)?;
            let (k, v) = l.attn.keys_values(tape, h)?;
            let (k, v) = match prefix {
                Some(p) if !p.is_empty() => {
                    let pk = tape.constant(p.layers[li].0.clone());
                    let pv = tape.constant(p.layers[li].1.clone());
                    (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
                }
                _ => (k, v),
            };
            let a = l.attn.attend(tape, h, k, v, mask)?;
            x = tape.add(x, a)?;
            let h = l.ln2.forward(tape, x)?;
            let m = l.mlp.forward(tape, h)?;
            x = tape.add(x, m)?;
            kvs.push((k, v));
        }
        Ok((x, kvs))
    }

    fn token_rows(&self, tape: &mut Tape, ids: &[usize], positions: &[usize], d: usize) -> Result<Var, NnError> {
        let e = self.tok_emb.forward(tape, ids)?;
        let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        let p = sinusoidal(&pos, d, 1000.0);
        tape.add_const(e, &p)
    }

    fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var, NnError> {
        let h = self.ln_f.forward(tape, h)?;
        self.out.forward(tape, h)
    }

    fn history_input(cfg: &PolicyConfig, history: &Trajectory<f64>) -> Tensor {
        let frame = *history.last();
        let n = cfg.history_steps + 1;
        let mut data = Vec::with_capacity(2 * n);
        let wps = &history.waypoints;
        for k in 0..n {
            // left-pad short histories with their first pose
            let idx = (k + wps.len()).saturating_sub(n).min(wps.len() - 1);
            let p = frame.to_local(wps[idx].position());
            data.push(p.x / cfg.action_scale);
            data.push(p.y / cfg.action_scale);
        }
        Tensor::row_vector(data)
    }

    pub fn embed_history(
        &self,
        tape: &mut Tape,
        cfg: &PolicyConfig,
        history: &Trajectory<f64>,
        noise: Option<(&mut dyn rand::RngCore, f64)>,
    ) -> Result<HistoryEmbedding, NnError> {
        let x = tape.constant(Self::history_input(cfg, history));
        let h = self.hist.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        let query = self.hist.query.forward(tape, h)?;
        let anchors = if cfg.history_init {
            self.hist.anchors.forward(tape, h)?
        } else {
            tape.constant(Tensor::zeros(1, 2 * cfg.future_steps))
        };
        let anchors = match noise {
            Some((rng, std)) if std > 0.0 => {
                let n: Vec<f64> = (0..2 * cfg.future_steps)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * std / cfg.action_scale)
                    .collect();
                tape.add_const(anchors, &Tensor::row_vector(n))?
            }
            _ => anchors,
        };
        Ok(HistoryEmbedding { anchors, query })
    }

    /// Project the selected layers' cached keys/values into bridge width.
    pub fn bridge_memory(&self, tape: &mut Tape, cache: &[(Var, Var)]) -> Result<Vec<(Var, Var)>, NnError> {
        self.bridge
            .iter()
            .zip(cache)
            .map(|(b, &(k, v))| Ok((b.cross.wk.forward(tape, k)?, b.cross.wv.forward(tape, v)?)))
            .collect()
    }

    /// The waypoint embedding is affine in the actions, so the gather keys
    /// and values and the read queries fold into 2 x d_bridge maps plus
    /// per-position constants, computed once per tape.
    pub fn waypoint_maps(&self, tape: &mut Tape) -> Result<WaypointMaps, NnError> {
        let w = tape.param(self.wp_in.w);
        let pos = tape.constant(self.wp_pos.clone());
        let c = match self.wp_in.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(pos, b)?
            }
            None => pos,
        };
        let mut fold = |l: &Linear| -> Result<(Var, Var), NnError> {
            let p = tape.param(l.w);
            Ok((tape.matmul(w, p)?, tape.matmul(c, p)?))
        };
        let keys = fold(&self.gather.wk)?;
        let values = fold(&self.gather.wv)?;
        let queries = fold(&self.read.wq)?;
        Ok(WaypointMaps { embed: (w, c), keys, values, queries })
    }

    /// Velocity in internal units (1 x 2T) at `a_tau` (1 x 2T, internal units).
    #[allow(clippy::too_many_arguments)]
    pub fn vector_field(
        &self,
        tape: &mut Tape,
        cfg: &PolicyConfig,
        a_tau: Var,
        tau: f64,
        his: &HistoryEmbedding,
        maps: &WaypointMaps,
        memory: &[(Var, Var)],
        mask: Option<&Tensor>,
    ) -> Result<Var, NnError> {
        let t = cfg.future_steps;
        let a = tape.reshape(a_tau, t, 2)?;
        let u = apply_map(tape, a, maps.embed)?;

        let temb = tape.constant(sinusoidal(&[tau * 1000.0], TIME_FEATURES, 10_000.0));
        let te = self.time.forward(tape, temb)?;
        let q = tape.add(te, his.query)?;
        let slots = tape.param(self.slots);
        let s0 = tape.add_row(slots, q)?;

        let hq = self.ln_g_slots.forward(tape, s0)?;
        let k = apply_map(tape, a, maps.keys)?;
        let v = apply_map(tape, a, maps.values)?;
        let g = self.gather.attend(tape, hq, k, v, None)?;
        let mut s = tape.add(s0, g)?;

        for (b, &(mk, mv)) in self.bridge.iter().zip(memory) {
            let h = b.ln_self.forward(tape, s)?;
            let a = b.self_attn.forward(tape, h, h, None)?;
            s = tape.add(s, a)?;
            let h = b.ln_cross.forward(tape, s)?;
            let c = b.cross.attend(tape, h, mk, mv, mask)?;
            s = tape.add(s, c)?;
            let h = b.ln_mlp.forward(tape, s)?;
            let m = b.mlp.forward(tape, h)?;
            s = tape.add(s, m)?;
        }

        let hs = self.ln_r_slots.forward(tape, s)?;
        let q = apply_map(tape, a, maps.queries)?;
        let (k, v) = self.read.keys_values(tape, hs)?;
        let r = self.read.attend_folded(tape, q, k, v)?;
        let r = tape.add(u, r)?;
        let h = self.ln_o.forward(tape, r)?;
        let o = self.out_a.forward(tape, h)?;
        tape.reshape(o, 1, 2 * t)
    }
}

/// Additive attention mask for context rows followed by token sequences:
/// context rows see valid context keys; each token row sees valid context
/// keys and earlier rows of its own sequence.
fn sequence_mask(ctx_valid: &[bool], seq_lens: &[usize]) -> Tensor {
    let nc = ctx_valid.len();
    let n = nc + seq_lens.iter().sum::<usize>();
    let mut m = Tensor::filled(n, n, NEG_INF);
    for r in 0..n {
        for (c, &ok) in ctx_valid.iter().enumerate() {
            if ok {
                m.set(r, c, 0.0);
            }
        }
    }
    let mut off = nc;
    for &len in seq_lens {
        for i in 0..len {
            for j in 0..=i {
                m.set(off + i, off + j, 0.0);
            }
        }
        off += len;
    }
    // padded context rows still need one finite key
    for (r, &ok) in ctx_valid.iter().enumerate() {
        if !ok {
            m.set(r, r, 0.0);
        }
    }
    m
}

impl PolicyModel {
    pub fn new(cfg: PolicyConfig, codebook: ActionCodebook) -> Result<Self, PolicyError> {
        if codebook.len() != cfg.codebook_size {
            return Err(PolicyError::Codebook(format!(
                "codebook has {} entries, config expects {}",
                codebook.len(),
                cfg.codebook_size
            )));
        }
        let sparse = cfg.layers.resolve(cfg.n_layers)?;
        let vocab = TokenVocabulary::new(cfg.codebook_size, cfg.future_steps, cfg.max_reason);
        let mut store = ParamStore::new(cfg.seed);
        let net = PolicyNet::build(&cfg, &vocab, sparse.len(), &mut store)?;
        Ok(Self { cfg, vocab, net, store, codebook, sparse })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("enc.")
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("head.")
    }

    /// Encoder + token head: the parameters tuned by the language loss and RFT.
    pub fn token_policy_params(&self) -> Vec<ParamId> {
        let mut v = self.encoder_params();
        v.extend(self.head_params());
        v
    }

    pub fn bridge_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("bridge.")
    }

    pub fn history_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("hist.")
    }

    /// Bridge + history embedding: the action expert.
    pub fn action_expert_params(&self) -> Vec<ParamId> {
        let mut v = self.bridge_params();
        v.extend(self.history_params());
        v
    }

    /// Copy encoder and token-head values from a model with the same encoder
    /// dimensions (the action expert may differ).
    pub fn adopt_token_policy(&mut self, other: &PolicyModel) -> Result<(), PolicyError> {
        for id in self.token_policy_params() {
            let src = other.store.id(self.store.name(id))?;
            let (a, b) = (other.store.get(src), self.store.get(id));
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(NnError::Shape { op: "adopt", detail: self.store.name(id).to_string() }.into());
            }
            let v = a.data.clone();
            self.store.get_mut(id).data.copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn context(&self, s: &Scenario) -> Result<ContextTokens, PolicyError> {
        encode_features(s, self.cfg.max_obstacles, self.cfg.max_context)
    }

    /// Encoder pass over the context alone.
    pub fn encode_context(&self, s: &Scenario) -> Result<(ContextTokens, LayerKvCache), PolicyError> {
        let ctx = self.context(s)?;
        let cache = self.encode_tokens(&self.store, &ctx)?;
        Ok((ctx, cache))
    }

    pub fn encode_tokens(&self, store: &ParamStore, ctx: &ContextTokens) -> Result<LayerKvCache, PolicyError> {
        let mut tape = Tape::new(store);
        let x = tape.constant(ctx.features.clone());
        let x = self.net.enc_in.forward(&mut tape, x)?;
        let mask = sequence_mask(&ctx.valid, &[]);
        let mask = if ctx.has_padding() { Some(&mask) } else { None };
        let (_, kvs) = self.net.run_layers(&mut tape, x, None, mask)?;
        Ok(LayerKvCache {
            layers: kvs.iter().map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone())).collect(),
            valid: ctx.valid.clone(),
        })
    }

    /// Teacher-forced pass: context followed by each target sequence (fed as
    /// `[BOS] + seq[..n-1]`). Returns grammar-masked logits rows for all
    /// sequences, stacked, and the per-layer keys/values over every row.
    pub fn forward_sequences(
        &self,
        tape: &mut Tape,
        ctx: &ContextTokens,
        seqs: &[&[usize]],
    ) -> Result<(Var, Vec<(Var, Var)>), PolicyError> {
        let d = self.cfg.d_model;
        let nc = ctx.len();
        let x = tape.constant(ctx.features.clone());
        let xc = self.net.enc_in.forward(tape, x)?;
        let mut parts = vec![xc];
        let mut masks = Vec::new();
        let mut lens = Vec::new();
        for seq in seqs {
            let mut ids = vec![self.vocab.bos()];
            ids.extend_from_slice(&seq[..seq.len().saturating_sub(1)]);
            let pos: Vec<usize> = (0..ids.len()).collect();
            parts.push(self.net.token_rows(tape, &ids, &pos, d)?);
            masks.push(teacher_masks(&self.vocab, seq)?);
            lens.push(ids.len());
        }
        let x = tape.concat_rows(&parts)?;
        let mask = sequence_mask(&ctx.valid, &lens);
        let (h, kvs) = self.net.run_layers(tape, x, None, Some(&mask))?;
        let total: usize = lens.iter().sum();
        let ht = tape.slice_rows(h, nc, total)?;
        let logits = self.net.logits(tape, ht)?;
        let refs: Vec<&Tensor> = masks.iter().collect();
        let gm = Tensor::concat_rows(&refs);
        let logits = tape.add_const(logits, &gm)?;
        Ok((logits, kvs))
    }

    /// Per-row NLL of target sequences under the masked token distribution.
    pub fn score_sequences(&self, tape: &mut Tape, ctx: &ContextTokens, seqs: &[&[usize]]) -> Result<SequenceScores, PolicyError> {
        let (logits, _) = self.forward_sequences(tape, ctx, seqs)?;
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let nll = tape.nll_rows(logits, &targets)?;
        let mut spans = Vec::with_capacity(seqs.len());
        let mut off = 0;
        for s in seqs {
            spans.push((off, s.len()));
            off += s.len();
        }
        Ok(SequenceScores { nll, spans })
    }

    /// Teacher-forced log-probability of each sequence (no gradients kept).
    pub fn sequence_logprobs(&self, store: &ParamStore, ctx: &ContextTokens, seqs: &[&[usize]]) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new(store);
        let sc = self.score_sequences(&mut tape, ctx, seqs)?;
        let nll = tape.value(sc.nll);
        Ok(sc.spans.iter().map(|&(o, n)| -nll.data[o..o + n].iter().sum::<f64>()).collect())
    }

    /// Cache over context + `[BOS] + prefix` computed in one pass, for
    /// conditioning the action expert on a known reasoning prefix.
    pub fn prefix_cache(&self, store: &ParamStore, ctx: &ContextTokens, prefix: &[usize]) -> Result<LayerKvCache, PolicyError> {
        let mut tape = Tape::new(store);
        let d = self.cfg.d_model;
        let x = tape.constant(ctx.features.clone());
        let xc = self.net.enc_in.forward(&mut tape, x)?;
        let mut ids = vec![self.vocab.bos()];
        ids.extend_from_slice(prefix);
        let pos: Vec<usize> = (0..ids.len()).collect();
        let xt = self.net.token_rows(&mut tape, &ids, &pos, d)?;
        let x = tape.concat_rows(&[xc, xt])?;
        let mask = sequence_mask(&ctx.valid, &[ids.len()]);
        let (_, kvs) = self.net.run_layers(&mut tape, x, None, Some(&mask))?;
        let mut valid = ctx.valid.clone();
        valid.extend(std::iter::repeat(true).take(ids.len()));
        Ok(LayerKvCache { layers: kvs.iter().map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone())).collect(), valid })
    }

    /// Feed one token at `pos`, extending `cache`; returns raw logits.
    pub fn step(&self, store: &ParamStore, cache: &mut LayerKvCache, token: usize, pos: usize) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new(store);
        let x = self.net.token_rows(&mut tape, &[token], &[pos], self.cfg.d_model)?;
        let mask = cache.key_mask(1).map(|m| {
            let mut data = m.data;
            data.push(0.0);
            Tensor { rows: 1, cols: cache.len() + 1, data }
        });
        let (h, kvs) = self.net.run_layers(&mut tape, x, Some(cache), mask.as_ref())?;
        let logits = self.net.logits(&mut tape, h)?;
        for (slot, &(k, v)) in cache.layers.iter_mut().zip(&kvs) {
            *slot = (tape.value(k).clone(), tape.value(v).clone());
        }
        cache.valid.push(true);
        Ok(tape.value(logits).data.clone())
    }

    /// Autoregressive decoding under the grammar. `rng = None` is greedy,
    /// otherwise temperature-1 sampling. Stops after `ACTION_START` when
    /// `reasoning_only`, else after `EOS` or `max_tokens`.
    pub fn decode(
        &self,
        store: &ParamStore,
        ctx: &ContextTokens,
        rng: Option<&mut dyn rand::RngCore>,
        reasoning_only: bool,
    ) -> Result<DecodeOutput, PolicyError> {
        let (cache, logits) = self.prefill(store, ctx)?;
        self.decode_from(store, cache, logits, rng, reasoning_only)
    }

    /// Context pass plus the BOS step: the cache and the first logits.
    pub fn prefill(&self, store: &ParamStore, ctx: &ContextTokens) -> Result<(LayerKvCache, Vec<f64>), PolicyError> {
        let mut cache = self.encode_tokens(store, ctx)?;
        let logits = self.step(store, &mut cache, self.vocab.bos(), 0)?;
        Ok((cache, logits))
    }

    /// Continue decoding after [`PolicyModel::prefill`].
    pub fn decode_from(
        &self,
        store: &ParamStore,
        mut cache: LayerKvCache,
        mut logits: Vec<f64>,
        mut rng: Option<&mut dyn rand::RngCore>,
        reasoning_only: bool,
    ) -> Result<DecodeOutput, PolicyError> {
        let mut g = GrammarState::default();
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let max_tokens = self.vocab.max_reason + self.vocab.action_len + 2;
        while tokens.len() < max_tokens {
            let mask = g.mask(&self.vocab);
            let masked: Vec<f64> = logits.iter().zip(&mask).map(|(l, m)| l + m).collect();
            if masked.iter().any(|v| v.is_nan()) {
                return Err(PolicyError::NonFinite("decoding"));
            }
            let t = match rng.as_deref_mut() {
                None => argmax(&masked),
                Some(r) => sample_row(&masked, r),
            };
            logprob += log_softmax_at(&masked, t);
            g.advance(&self.vocab, t)?;
            tokens.push(t);
            if g.done {
                break;
            }
            logits = self.step(store, &mut cache, t, tokens.len())?;
            if reasoning_only && g.action_started {
                break;
            }
        }
        Ok(DecodeOutput { reason_len: g.reason, tokens, logprob, cache, finished: g.done })
    }

    /// Flow sampling from the history anchors; returns offsets in metres
    /// (1 x 2T) in the ego frame at t = 0.
    pub fn flow_offsets(
        &self,
        store: &ParamStore,
        cache: &LayerKvCache,
        history: &Trajectory<f64>,
        steps: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new(store);
        let sel = self.select_cache(&mut tape, cache)?;
        let memory = self.net.bridge_memory(&mut tape, &sel)?;
        let mask = cache.key_mask(self.cfg.query_slots);
        let his = self.net.embed_history(&mut tape, &self.cfg, history, None)?;
        let maps = self.net.waypoint_maps(&mut tape)?;
        let a0 = tape.value(his.anchors).data.clone();
        let cfg = &self.cfg;
        let out = euler_integrate(&a0, steps, |a, tau| -> Result<Vec<f64>, PolicyError> {
            let av = tape.constant(Tensor::row_vector(a.to_vec()));
            let v = self.net.vector_field(&mut tape, cfg, av, tau, &his, &maps, &memory, mask.as_ref())?;
            let v = tape.value(v).data.clone();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFinite("flow sampling"));
            }
            Ok(v)
        })?;
        Ok(out.iter().map(|v| v * cfg.action_scale).collect())
    }

    /// Constant copies of the selected layers' cached keys/values.
    pub fn select_cache(&self, tape: &mut Tape, cache: &LayerKvCache) -> Result<Vec<(Var, Var)>, PolicyError> {
        self.sparse
            .iter()
            .map(|&l| {
                let (k, v) = cache
                    .layers
                    .get(l)
                    .ok_or_else(|| PolicyError::Layers(format!("layer {l} outside cache of {}", cache.layers.len())))?;
                Ok((tape.constant(k.clone()), tape.constant(v.clone())))
            })
            .collect()
    }

    /// Velocity field in metres at a given state (for inspection and tests).
    pub fn fm_vector_field(
        &self,
        a_tau: &[f64],
        tau: f64,
        cache: &LayerKvCache,
        history: &Trajectory<f64>,
    ) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new(&self.store);
        let sel = self.select_cache(&mut tape, cache)?;
        let memory = self.net.bridge_memory(&mut tape, &sel)?;
        let mask = cache.key_mask(self.cfg.query_slots);
        let his = self.net.embed_history(&mut tape, &self.cfg, history, None)?;
        let maps = self.net.waypoint_maps(&mut tape)?;
        let s = self.cfg.action_scale;
        let av = tape.constant(Tensor::row_vector(a_tau.iter().map(|v| v / s).collect()));
        let v = self.net.vector_field(&mut tape, &self.cfg, av, tau, &his, &maps, &memory, mask.as_ref())?;
        Ok(tape.value(v).data.iter().map(|x| x * s).collect())
    }

    /// History anchors in metres (1 x 2T) and query features.
    pub fn embed_history(
        &self,
        history: &Trajectory<f64>,
        noise: Option<(&mut dyn rand::RngCore, f64)>,
    ) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        let mut tape = Tape::new(&self.store);
        let h = self.net.embed_history(&mut tape, &self.cfg, history, noise)?;
        let s = self.cfg.action_scale;
        Ok((tape.value(h.anchors).data.iter().map(|v| v * s).collect(), tape.value(h.query).data.clone()))
    }

    /// Flow-matching loss term for one sample, in internal units:
    /// `|f(a_tau, tau) - (a - a_his)|^2` summed over the action array.
    #[allow(clippy::too_many_arguments)]
    pub fn fm_sample_loss(
        &self,
        tape: &mut Tape,
        cache: &LayerKvCache,
        history: &Trajectory<f64>,
        target_offsets: &[f64],
        tau: f64,
        rng: &mut dyn rand::RngCore,
        noise_std: f64,
    ) -> Result<Var, PolicyError> {
        let s = self.cfg.action_scale;
        let sel = self.select_cache(tape, cache)?;
        let memory = self.net.bridge_memory(tape, &sel)?;
        let mask = cache.key_mask(self.cfg.query_slots);
        let his = self.net.embed_history(tape, &self.cfg, history, Some((rng, noise_std)))?;
        let a = tape.constant(Tensor::row_vector(target_offsets.iter().map(|v| v / s).collect()));
        let at = tape.scale(a, tau)?;
        let ah = tape.scale(his.anchors, 1.0 - tau)?;
        let a_tau = tape.add(at, ah)?;
        let maps = self.net.waypoint_maps(tape)?;
        let f = self.net.vector_field(tape, &self.cfg, a_tau, tau, &his, &maps, &memory, mask.as_ref())?;
        let target = tape.sub(a, his.anchors)?;
        let d = tape.sub(f, target)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.sum(sq)?)
    }

    /// Future offsets (1 x 2T, metres) of a trajectory that starts at the
    /// current pose.
    pub fn offsets_of(&self, frame: &Pose<f64>, traj: &Trajectory<f64>) -> Vec<f64> {
        let t = self.cfg.future_steps;
        let mut out = Vec::with_capacity(2 * t);
        for k in 1..=t {
            let w = traj.waypoints[k.min(traj.len() - 1)];
            let p = frame.to_local(w.position());
            out.push(p.x);
            out.push(p.y);
        }
        out
    }

    /// Trajectory (current pose first) from future offsets in metres.
    pub fn trajectory_from_offsets(&self, frame: &Pose<f64>, offsets: &[f64]) -> Trajectory<f64> {
        let mut pts = vec![frame.position()];
        for c in offsets.chunks(2) {
            pts.push(frame.to_world(Vec2::new(c[0], c[1])));
        }
        Trajectory::from_positions(frame.heading, &pts, self.cfg.dt, 0)
    }

    /// Target token sequence for a scenario's reference and reasoning tags.
    pub fn target_tokens(&self, s: &Scenario) -> Result<Vec<usize>, PolicyError> {
        let mut codes = self.codebook.tokenize(&s.reference);
        codes.truncate(self.cfg.future_steps);
        if codes.len() != self.cfg.future_steps {
            return Err(PolicyError::Grammar(format!(
                "reference of {} has {} segments, expected {}",
                s.id,
                codes.len(),
                self.cfg.future_steps
            )));
        }
        let tags: Vec<_> = s.reasoning_tags.iter().copied().take(self.cfg.max_reason).collect();
        self.vocab.build(&tags, &codes)
    }

    /// Decode a token sequence's action codes into a trajectory from `frame`.
    pub fn detokenize(&self, frame: &Pose<f64>, tokens: &[usize]) -> Result<Trajectory<f64>, PolicyError> {
        let (_, codes) = self.vocab.split(tokens);
        self.codebook.detokenize(&codes, *frame, self.cfg.dt, 0)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = (NEG_INF, 0);
    for (i, &x) in v.iter().enumerate() {
        if x > best.0 {
            best = (x, i);
        }
    }
    best.1
}

fn sample_row(masked: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    let p = softmax_rows(&Tensor::row_vector(masked.to_vec()));
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.data.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
