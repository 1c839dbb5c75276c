//! Masked reconstruction of encoder embeddings with a small attention
//! decoder that is pushed toward cross-frame interactions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::{multi_head_attention, FfnIds, MhaIds, NormIds, SameFrameDropout, INIT_STD};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Row mask over the joint sequence; `true` marks a hidden token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    pub values: Vec<bool>,
    pub rate: f64,
    pub seed: u64,
}

impl TokenMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&m| m).count()
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i]).collect()
    }
}

/// Uniform subset of exactly `round(rate·len)` hidden rows.
pub fn sample_mask(len: usize, rate: f64, seed: u64) -> Result<TokenMask> {
    if len < 2 {
        return Err(Error::Invalid(format!(
            "mask length must be at least 2, got {len}"
        )));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Invalid(format!(
            "mask rate must lie in (0, 1), got {rate}"
        )));
    }
    let count = (rate * len as f64).round() as usize;
    if count == 0 || count == len {
        return Err(Error::Invalid(format!(
            "mask rate {rate} over {len} tokens hides {count}, leaving nothing to reconstruct from or to"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![false; len];
    for i in sample(&mut rng, len, count) {
        values[i] = true;
    }
    Ok(TokenMask { values, rate, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub p_drop: f64,
    /// Score every row against `E` with hidden rows zeroed, instead of only
    /// the hidden rows.
    pub literal_loss: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 2,
            p_drop: 0.3,
            literal_loss: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayerIds {
    pub ln1: NormIds,
    pub attn: MhaIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayerIds>,
}

impl DecoderIds {
    /// `rows` is the joint sequence length `2N`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &DecoderConfig,
        rows: usize,
        c: usize,
    ) -> Self {
        let mask_token = store.add(
            format!("{prefix}.mask_token"),
            truncated_normal(rng, &[c], INIT_STD),
        );
        let pos = store.add(
            format!("{prefix}.pos"),
            truncated_normal(rng, &[rows, c], INIT_STD),
        );
        let layers = (0..cfg.depth)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                DecoderLayerIds {
                    ln1: NormIds::init(store, &format!("{p}.ln1"), c),
                    attn: MhaIds::init(store, rng, &format!("{p}.attn"), c, cfg.heads),
                    ln2: NormIds::init(store, &format!("{p}.ln2"), c),
                    ffn: FfnIds::init(store, rng, &format!("{p}.ffn"), c),
                }
            })
            .collect();
        Self {
            mask_token,
            pos,
            layers,
        }
    }
}

pub struct Decoded {
    /// Decoder input after hidden rows were replaced.
    pub input: Var,
    pub output: Var,
    /// Final per-head weights of every layer.
    pub weights: Vec<Vec<Var>>,
}

/// Replaces hidden rows by mask token plus position and runs the decoder
/// layers. `dropout_rng = None` disables attention dropout (evaluation).
#[allow(clippy::too_many_arguments)]
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &DecoderIds,
    cfg: &DecoderConfig,
    e: Var,
    mask: &TokenMask,
    n_per_frame: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Decoded> {
    let (rows, c) = (tape.value(e).rows(), tape.value(e).cols());
    if mask.len() != rows {
        return Err(Error::Shape(format!(
            "mask has {} entries for {rows} rows",
            mask.len()
        )));
    }
    if store.get(ids.pos).shape != [rows, c] {
        return Err(Error::Shape(format!(
            "decoder positions {:?} do not fit {rows}x{c}",
            store.get(ids.pos).shape
        )));
    }
    let keep: Vec<f64> = mask
        .values
        .iter()
        .map(|&m| if m { 0.0 } else { 1.0 })
        .collect();
    let hide: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let kept = tape.row_scale(e, keep);
    let tok = tape.param(store, ids.mask_token);
    let tok = tape.reshape(tok, &[1, c]);
    let toks = tape.gather_rows(tok, vec![0; rows]);
    let pos = tape.param(store, ids.pos);
    let filled = tape.add(toks, pos);
    let filled = tape.row_scale(filled, hide);
    let input = tape.add(kept, filled);
    let mut x = input;
    let mut weights = Vec::with_capacity(ids.layers.len());
    let mut rng = dropout_rng;
    for layer in &ids.layers {
        let a_in = layer.ln1.apply(tape, store, x);
        let att = match rng.as_deref_mut() {
            Some(r) if cfg.p_drop > 0.0 => {
                let mut d = SameFrameDropout {
                    n_per_frame,
                    p: cfg.p_drop,
                    rng: r,
                };
                multi_head_attention(tape, store, &layer.attn, a_in, None, Some(&mut d))?
            }
            _ => multi_head_attention(tape, store, &layer.attn, a_in, None, None)?,
        };
        let h = tape.add(x, att.out);
        let f_in = layer.ln2.apply(tape, store, h);
        let f = layer.ffn.apply(tape, store, f_in);
        x = tape.add(h, f);
        weights.push(att.weights);
    }
    Ok(Decoded {
        input,
        output: x,
        weights,
    })
}

/// Reconstruction loss. The target is `target` taken as a constant.
pub fn ssl_loss(
    tape: &mut Tape,
    decoded: Var,
    target: &Tensor,
    mask: &TokenMask,
    literal: bool,
) -> Result<Var> {
    if tape.value(decoded).shape != target.shape {
        return Err(Error::Shape(format!(
            "decoder output {:?} vs target {:?}",
            tape.value(decoded).shape,
            target.shape
        )));
    }
    if let Some(i) = target.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "reconstruction target entry {i} is not finite"
        )));
    }
    let diff = if literal {
        let c = target.cols();
        let mut t = target.clone();
        for (i, &m) in mask.values.iter().enumerate() {
            if !m {
                t.data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = tape.constant(t);
        tape.sub(decoded, t)
    } else {
        let rows = mask.masked_rows();
        let c = target.cols();
        let mut t = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            t.extend_from_slice(target.row(r));
        }
        let t = tape.constant(Tensor {
            shape: vec![rows.len(), c],
            data: t,
        });
        let d = tape.gather_rows(decoded, rows);
        tape.sub(d, t)
    };
    Ok(tape.l2_norm(diff))
}
