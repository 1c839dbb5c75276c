//! Two-frame joint attention encoder over patch tokens of ESI frames.
//!
//! Token sequences are `(2N, C)` matrices: rows `[0, N)` come from the first
//! frame and rows `[N, 2N)` from the second. Both frames share one position
//! table, so the only thing telling the frames apart is their content.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gas::{self, GasConfig, GasIds, GasRun};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Multiply the softmax weights by the relation matrix.
    PostSoftmax,
    /// Restrict the softmax to allowed entries.
    PreSoftmax,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_softmax" => Ok(Self::PostSoftmax),
            "pre_softmax" => Ok(Self::PreSoftmax),
            _ => Err(Error::Config(format!(
                "unknown mask_mode '{s}' (post_softmax|pre_softmax)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PostSoftmax => "post_softmax",
            Self::PreSoftmax => "pre_softmax",
        })
    }
}

/// Encoder hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    pub patch: usize,
    pub c_emb: usize,
    pub depth: usize,
    pub heads: usize,
    /// Layer-normalise sublayer inputs; `false` feeds them raw.
    pub pre_norm: bool,
    /// Frame size the position table is built for.
    pub frame_h: usize,
    pub frame_w: usize,
    /// Channels of the input frames (1 is replicated to 3).
    pub channels: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            c_emb: 32,
            depth: 2,
            heads: 2,
            pre_norm: true,
            frame_h: 64,
            frame_w: 64,
            channels: 1,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.c_emb == 0 || self.heads == 0 {
            return Err(Error::Config(
                "patch, c_emb and heads must be positive".into(),
            ));
        }
        if self.c_emb % self.heads != 0 {
            return Err(Error::Config(format!(
                "c_emb {} is not divisible by heads {}",
                self.c_emb, self.heads
            )));
        }
        if self.frame_h % self.patch != 0 || self.frame_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide frame {}x{}",
                self.patch, self.frame_h, self.frame_w
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_h / self.patch, self.frame_w / self.patch)
    }

    /// Tokens per frame.
    pub fn n_tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

fn weight<R: Rng>(store: &mut ParamStore, rng: &mut R, name: String, shape: &[usize]) -> ParamId {
    store.add(name, truncated_normal(rng, shape, INIT_STD))
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = weight(store, rng, format!("{prefix}.w"), &[fan_in, fan_out]);
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhaIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl MhaIds {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        c: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: LinearIds::init(store, rng, &format!("{prefix}.q"), c, c),
            k: LinearIds::init(store, rng, &format!("{prefix}.k"), c, c),
            v: LinearIds::init(store, rng, &format!("{prefix}.v"), c, c),
            o: LinearIds::init(store, rng, &format!("{prefix}.o"), c, c),
            heads,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

impl FfnIds {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) -> Self {
        Self {
            up: LinearIds::init(store, rng, &format!("{prefix}.up"), c, 4 * c),
            down: LinearIds::init(store, rng, &format!("{prefix}.down"), 4 * c, c),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.apply(tape, store, x);
        let h = tape.gelu(h);
        self.down.apply(tape, store, h)
    }
}

/// Relation matrix applied inside an attention call.
#[derive(Clone, Copy, Debug)]
pub struct Relation {
    pub w: Var,
    pub mode: MaskMode,
}

/// Drops, per row, a random number of the largest same-frame attention
/// weights. The count is Binomial(N, p), so `p` is the expected dropped
/// fraction and `p = 1` removes every same-frame weight. Cross-frame weights
/// are never touched and rows are not renormalised.
pub struct SameFrameDropout<'a> {
    pub n_per_frame: usize,
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl SameFrameDropout<'_> {
    /// Keep-mask for an attention weight matrix.
    pub fn keep_mask(&mut self, weights: &Tensor) -> Tensor {
        let n = self.n_per_frame;
        let rows = weights.rows();
        let cols = weights.cols();
        let mut keep = Tensor::full(&weights.shape, 1.0);
        let p = self.p.clamp(0.0, 1.0);
        for i in 0..rows {
            let k = if p <= 0.0 {
                0
            } else if p >= 1.0 {
                n
            } else {
                Binomial::new(n as u64, p)
                    .expect("valid binomial")
                    .sample(self.rng) as usize
            };
            if k == 0 {
                continue;
            }
            let start = if i < n { 0 } else { n };
            let mut same: Vec<usize> = (start..(start + n).min(cols)).collect();
            // stable: ties resolved by column index
            same.sort_by(|&a, &b| {
                weights
                    .at(i, b)
                    .total_cmp(&weights.at(i, a))
                    .then(a.cmp(&b))
            });
            for &j in same.iter().take(k) {
                keep.data[i * cols + j] = 0.0;
            }
        }
        keep
    }
}

/// Output of one attention call: the projected result and the final
/// per-head weights (after masking and dropout).
pub struct AttnOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head attention over all rows of `x`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &MhaIds,
    x: Var,
    relation: Option<Relation>,
    mut dropout: Option<&mut SameFrameDropout<'_>>,
) -> Result<AttnOut> {
    let rows = tape.value(x).rows();
    let c = tape.value(x).cols();
    if store.get(ids.q.w).rows() != c {
        return Err(Error::Shape(format!(
            "attention input width {c} does not match projections"
        )));
    }
    if let Some(r) = relation {
        let shape = &tape.value(r.w).shape;
        if shape != &[rows, rows] {
            return Err(Error::Shape(format!(
                "relation matrix {shape:?} is not {rows}x{rows}"
            )));
        }
    }
    let h = ids.heads;
    let dk = c / h;
    let q = ids.q.apply(tape, store, x);
    let k = ids.k.apply(tape, store, x);
    let v = ids.v.apply(tape, store, x);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for head in 0..h {
        let qh = tape.slice_cols(q, head * dk, dk);
        let kh = tape.slice_cols(k, head * dk, dk);
        let vh = tape.slice_cols(v, head * dk, dk);
        let s = tape.matmul_bt(qh, kh);
        let s = tape.scale(s, scale);
        let mut a = match relation {
            Some(Relation {
                w,
                mode: MaskMode::PreSoftmax,
            }) => tape.weighted_softmax(s, w),
            Some(Relation {
                w,
                mode: MaskMode::PostSoftmax,
            }) => {
                let a = tape.softmax(s);
                tape.mul(a, w)
            }
            None => tape.softmax(s),
        };
        if let Some(d) = dropout.as_deref_mut() {
            if d.p > 0.0 {
                let keep = d.keep_mask(tape.value(a));
                a = tape.const_mul(a, keep);
            }
        }
        weights.push(a);
        outs.push(tape.matmul(a, vh));
    }
    let cat = if h == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    let out = ids.o.apply(tape, store, cat);
    Ok(AttnOut { out, weights })
}

#[derive(Clone, Debug)]
pub struct EncoderLayerIds {
    pub ln1: NormIds,
    pub attn: MhaIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub gas: Option<GasIds>,
}

impl EncoderLayerIds {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        c: usize,
        heads: usize,
        with_gas: bool,
    ) -> Self {
        Self {
            ln1: NormIds::init(store, &format!("{prefix}.ln1"), c),
            attn: MhaIds::init(store, rng, &format!("{prefix}.attn"), c, heads),
            ln2: NormIds::init(store, &format!("{prefix}.ln2"), c),
            ffn: FfnIds::init(store, rng, &format!("{prefix}.ffn"), c),
            gas: with_gas.then(|| GasIds::init(store, rng, &format!("{prefix}.gas"), c)),
        }
    }
}

/// Per-layer diagnostics.
pub struct LayerTrace {
    pub attn_weights: Vec<Var>,
    pub gas: Option<gas::GasTrace>,
}

/// `Ê = E + Att(E)`, `F = Ê + FFN(Ê)`, plus `GAS(E)` when the layer has a
/// branch and `gas` is supplied.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &EncoderLayerIds,
    x: Var,
    pre_norm: bool,
    n_per_frame: usize,
    gas_cfg: Option<(&GasConfig, &GasRun)>,
) -> Result<(Var, LayerTrace)> {
    let a_in = if pre_norm {
        ids.ln1.apply(tape, store, x)
    } else {
        x
    };
    let att = multi_head_attention(tape, store, &ids.attn, a_in, None, None)?;
    let e_hat = tape.add(x, att.out);
    let f_in = if pre_norm {
        ids.ln2.apply(tape, store, e_hat)
    } else {
        e_hat
    };
    let f = ids.ffn.apply(tape, store, f_in);
    let mut out = tape.add(e_hat, f);
    let mut gas_trace = None;
    if let (Some(g), Some((cfg, run))) = (&ids.gas, gas_cfg) {
        let (branch, trace) = gas::gas_branch(tape, store, g, x, n_per_frame, cfg, run)?;
        out = tape.add(out, branch);
        gas_trace = Some(trace);
    }
    Ok((
        out,
        LayerTrace {
            attn_weights: att.weights,
            gas: gas_trace,
        },
    ))
}

/// Patch embedding and encoder layers.
#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub embed: LinearIds,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayerIds>,
}

impl EncoderIds {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &AttnConfig,
        with_gas: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = LinearIds::init(
            store,
            rng,
            &format!("{prefix}.embed"),
            cfg.patch_dim(),
            cfg.c_emb,
        );
        let pos = weight(
            store,
            rng,
            format!("{prefix}.pos"),
            &[cfg.n_tokens(), cfg.c_emb],
        );
        let layers = (0..cfg.depth)
            .map(|l| {
                EncoderLayerIds::init(
                    store,
                    rng,
                    &format!("{prefix}.{l}"),
                    cfg.c_emb,
                    cfg.heads,
                    with_gas,
                )
            })
            .collect();
        Ok(Self { embed, pos, layers })
    }
}

/// Flattens one frame into `N` patch rows of width `3·P²`, ordered
/// `(py, px, channel)`; single-channel frames are replicated to 3.
/// `frame` holds `channels` planes of `h × w`.
pub fn patch_matrix(
    frame: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Shape(format!(
            "frames must have 1 or 3 channels, got {channels}"
        )));
    }
    if frame.len() != channels * h * w {
        return Err(Error::Shape(format!(
            "frame has {} values, expected {channels}x{h}x{w}",
            frame.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = 3 * p * p;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..3 {
                        let src = if channels == 1 { 0 } else { ch };
                        data.push(frame[src * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, dim], data)
}

/// Joint tokens for a frame pair: `(2N, C)` with positions added.
pub fn patchify(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &EncoderIds,
    cfg: &AttnConfig,
    s1: &[f64],
    s2: &[f64],
) -> Result<Var> {
    let m1 = patch_matrix(s1, cfg.channels, cfg.frame_h, cfg.frame_w, cfg.patch)?;
    let m2 = patch_matrix(s2, cfg.channels, cfg.frame_h, cfg.frame_w, cfg.patch)?;
    if store.get(ids.pos).rows() != m1.rows() {
        return Err(Error::Shape(format!(
            "position table has {} rows, frame gives {} patches",
            store.get(ids.pos).rows(),
            m1.rows()
        )));
    }
    let mut both = m1;
    both.shape[0] *= 2;
    both.data.extend_from_slice(&m2.data);
    let xp = tape.constant(both);
    let emb = ids.embed.apply(tape, store, xp);
    let pos = tape.param(store, ids.pos);
    let pos2 = tape.concat_rows(&[pos, pos]);
    Ok(tape.add(emb, pos2))
}

/// Result of running the encoder stack.
pub struct Encoded {
    pub features: Var,
    pub map1: Var,
    pub map2: Var,
    pub grid: (usize, usize),
    pub layers: Vec<LayerTrace>,
}

/// Runs every layer and splits the output into per-frame maps stored as
/// `(gh·gw, C)` row-major grids: row `k` is cell `(k / gw, k % gw)`.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &EncoderIds,
    cfg: &AttnConfig,
    tokens: Var,
    gas_cfg: Option<(&GasConfig, &GasRun)>,
) -> Result<Encoded> {
    let n = cfg.n_tokens();
    if tape.value(tokens).shape != [2 * n, cfg.c_emb] {
        return Err(Error::Shape(format!(
            "token pair {:?} is not {}x{}",
            tape.value(tokens).shape,
            2 * n,
            cfg.c_emb
        )));
    }
    let mut x = tokens;
    let mut layers = Vec::with_capacity(ids.layers.len());
    for (l, layer) in ids.layers.iter().enumerate() {
        let run = gas_cfg.map(|(c, r)| (c, r.for_layer(l)));
        let (y, trace) = encoder_layer(
            tape,
            store,
            layer,
            x,
            cfg.pre_norm,
            n,
            run.as_ref().map(|(c, r)| (*c, r)),
        )?;
        x = y;
        layers.push(trace);
    }
    let map1 = tape.slice_rows(x, 0, n);
    let map2 = tape.slice_rows(x, n, n);
    Ok(Encoded {
        features: x,
        map1,
        map2,
        grid: cfg.grid(),
        layers,
    })
}
