//! Parameterised building blocks recorded on a [`Tape`].

use super::{Init, NnError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self, NnError> {
        let w = store.add(&format!("{name}.w"), d_in, d_out, Init::FanIn)?;
        let b = if bias { Some(store.add(&format!("{name}.b"), 1, d_out, Init::Zeros)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), 1, d, Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), 1, d, Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention whose keys and values may come from an external cache.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    /// Queries from `d_model`, keys/values from `d_kv`-wide inputs.
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_kv: usize, heads: usize) -> Result<Self, NnError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::Data(format!("{name}: width {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, false)?,
            wk: Linear::new(store, &format!("{name}.k"), d_kv, d_model, false)?,
            wv: Linear::new(store, &format!("{name}.v"), d_kv, d_model, false)?,
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, false)?,
            heads,
            d_model,
        })
    }

    /// Project a key/value source.
    pub fn keys_values(&self, tape: &mut Tape, src: Var) -> Result<(Var, Var), NnError> {
        Ok((self.wk.forward(tape, src)?, self.wv.forward(tape, src)?))
    }

    /// Attend from `x` to already projected keys and values. `mask` is an
    /// additive (0 / -inf) matrix of shape rows(x) x rows(k).
    pub fn attend(&self, tape: &mut Tape, x: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var, NnError> {
        let q = self.wq.forward(tape, x)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
            };
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let s = match mask {
                Some(m) => tape.add_const(s, m)?,
                None => s,
            };
            let p = tape.softmax(s)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.wo.forward(tape, cat)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, src: Var, mask: Option<&Tensor>) -> Result<Var, NnError> {
        let (k, v) = self.keys_values(tape, src)?;
        self.attend(tape, x, k, v, mask)
    }

    /// `attend` with the queries already projected and the output map folded
    /// into each head's values, so a query row costs its scores and one mix
    /// per head. Equal to `attend` when `q = x W_q`.
    pub fn attend_folded(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var, NnError> {
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let wo = tape.param(self.wo.w);
        let mut out: Option<Var> = None;
        for h in 0..self.heads {
            let (qh, kh, vh, woh) = if self.heads == 1 {
                (q, k, v, wo)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                    tape.slice_rows(wo, h * dh, dh)?,
                )
            };
            let vo = tape.matmul(vh, woh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax(s)?;
            let m = tape.matmul(p, vo)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, m)?,
                None => m,
            });
        }
        out.ok_or_else(|| NnError::Data("attention without heads".into()))
    }
}

/// `down(silu(x W_gate) * (x W_up))`.
#[derive(Debug, Clone, Copy)]
pub struct GatedMlp {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl GatedMlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize) -> Result<Self, NnError> {
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), d, hidden, false)?,
            up: Linear::new(store, &format!("{name}.up"), d, hidden, false)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, false)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let g = self.gate.forward(tape, x)?;
        let g = tape.silu(g)?;
        let u = self.up.forward(tape, x)?;
        let h = tape.mul(g, u)?;
        self.down.forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize) -> Result<Self, NnError> {
        let table = store.add(&format!("{name}.table"), vocab, d, Init::Uniform(0.5))?;
        Ok(Self { table, vocab, d })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var, NnError> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

/// Sinusoidal features of positions (`n x d`), used for waypoint and token
/// positions and for the flow time.
pub fn sinusoidal(positions: &[f64], d: usize, max_period: f64) -> Tensor {
    let mut t = Tensor::zeros(positions.len(), d);
    let half = d / 2;
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = max_period.powf(-(i as f64) / half.max(1) as f64);
            t.set(r, 2 * i, (p * freq).sin());
            t.set(r, 2 * i + 1, (p * freq).cos());
        }
    }
    t
}
