//! Geometry adaptive selection: a per-token two-way partition drives a
//! binary relation matrix that restricts a lightweight attention branch.
//!
//! Label columns are `0 = background (E_b)` and `1 = geometric (E_m)`.
//! Padded labels spread them over four columns, `(b1, m1, b2, m2)`, and the
//! relation matrix is `W = P̂ M P̂ᵀ` for a fixed 4×4 connection table `M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::{multi_head_attention, LinearIds, MaskMode, MhaIds, NormIds, Relation};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationMode {
    Full,
    /// Geometric tokens connect within their frame only.
    Intra,
    /// Geometric tokens connect across frames only.
    Inter,
}

impl std::str::FromStr for RelationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            _ => Err(Error::Config(format!(
                "unknown relation_mode '{s}' (full|intra|inter)"
            ))),
        }
    }
}

impl std::fmt::Display for RelationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Intra => "intra",
            Self::Inter => "inter",
        })
    }
}

/// Connection table between padded label columns `(b1, m1, b2, m2)`.
pub fn connection_table(mode: RelationMode) -> Tensor {
    let same_m = if mode == RelationMode::Inter {
        0.0
    } else {
        1.0
    };
    let cross_m = if mode == RelationMode::Intra {
        0.0
    } else {
        1.0
    };
    #[rustfmt::skip]
    let data = vec![
        1.0, 0.0,     0.0, 0.0,
        0.0, same_m,  0.0, cross_m,
        0.0, 0.0,     1.0, 0.0,
        0.0, cross_m, 0.0, same_m,
    ];
    Tensor {
        shape: vec![4, 4],
        data,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GasConfig {
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub relation_mode: RelationMode,
}

impl Default for GasConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mask_mode: MaskMode::PostSoftmax,
            relation_mode: RelationMode::Full,
        }
    }
}

/// How one forward pass samples labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GasRun {
    /// Gumbel noise seed; `None` is the deterministic evaluation mode.
    pub seed: Option<u64>,
    /// Feed the soft relaxation forward instead of hard labels. Used for
    /// finite-difference checks, where the hard forward is piecewise constant.
    pub relaxed: bool,
}

impl GasRun {
    pub fn eval() -> Self {
        Self {
            seed: None,
            relaxed: false,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            relaxed: false,
        }
    }

    /// Derives the run for encoder layer `l`, giving every layer its own noise.
    pub fn for_layer(&self, l: usize) -> Self {
        Self {
            seed: self
                .seed
                .map(|s| s ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(l as u64 + 1))),
            relaxed: self.relaxed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GasIds {
    pub ln: NormIds,
    pub mlp1: LinearIds,
    pub mlp2: LinearIds,
    pub attn: MhaIds,
}

impl GasIds {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) -> Self {
        Self {
            ln: NormIds::init(store, &format!("{prefix}.ln"), c),
            mlp1: LinearIds::init(store, rng, &format!("{prefix}.mlp1"), c, c),
            mlp2: LinearIds::init(store, rng, &format!("{prefix}.mlp2"), c, 2),
            attn: MhaIds::init(store, rng, &format!("{prefix}.attn"), c, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionLabels {
    pub hard: Tensor,
    pub soft: Tensor,
    pub tau: f64,
    pub seed: Option<u64>,
}

/// Standard Gumbel samples, `−ln(−ln U)` with `U` uniform on `(0, 1)`.
pub fn gumbel_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn argmax_one_hot(soft: &Tensor) -> Tensor {
    let c = soft.cols();
    let mut hard = Tensor::zeros(&soft.shape);
    for i in 0..soft.rows() {
        let row = soft.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        hard.data[i * c + best] = 1.0;
    }
    hard
}

fn soft_labels(logits: &Tensor, tau: f64, seed: Option<u64>) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if let Some(i) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "partition logit {i} is not finite"
        )));
    }
    let mut z = logits.clone();
    if let Some(s) = seed {
        z.add_assign(&gumbel_noise(&logits.shape, s));
    }
    let c = z.cols();
    for row in z.data.chunks_mut(c) {
        row.iter_mut().for_each(|v| *v /= tau);
        crate::autograd::softmax_in_place(row);
    }
    Ok(z)
}

/// Partition from `(2N, 2)` logits. `seed = None` omits the noise.
pub fn predict_partition(logits: &Tensor, tau: f64, seed: Option<u64>) -> Result<PartitionLabels> {
    if logits.cols() != 2 {
        return Err(Error::Shape(format!(
            "partition logits need 2 columns, got {}",
            logits.cols()
        )));
    }
    let soft = soft_labels(logits, tau, seed)?;
    Ok(PartitionLabels {
        hard: argmax_one_hot(&soft),
        soft,
        tau,
        seed,
    })
}

/// `(2N, 2)` labels to `(2N, 4)`: the first frame fills columns 0 and 1, the
/// second frame columns 2 and 3.
pub fn pad_labels(labels: &Tensor, n: usize) -> Result<Tensor> {
    if labels.rows() != 2 * n || labels.cols() != 2 {
        return Err(Error::Shape(format!(
            "labels are {}x{}, expected {}x2",
            labels.rows(),
            labels.cols(),
            2 * n
        )));
    }
    let mut out = Tensor::zeros(&[2 * n, 4]);
    for i in 0..2 * n {
        let off = if i < n { 0 } else { 2 };
        out.data[i * 4 + off] = labels.at(i, 0);
        out.data[i * 4 + off + 1] = labels.at(i, 1);
    }
    Ok(out)
}

/// Binary `(2N, 2N)` relation matrix from one-hot padded labels.
pub fn relation_matrix(padded: &Tensor, mode: RelationMode) -> Result<Tensor> {
    if padded.cols() != 4 {
        return Err(Error::Shape(format!(
            "padded labels need 4 columns, got {}",
            padded.cols()
        )));
    }
    for i in 0..padded.rows() {
        let row = padded.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 3 {
            return Err(Error::Invalid(format!(
                "padded label row {i} is not one-hot: {row:?}"
            )));
        }
    }
    let m = connection_table(mode);
    Ok(padded.matmul(&m).matmul_bt(padded))
}

/// Diagnostics from one branch evaluation.
pub struct GasTrace {
    pub soft: Var,
    pub hard: Tensor,
    pub relation: Var,
    pub weights: Var,
}

/// Partition, relation matrix and masked single-head attention over the
/// layer input `x`. The caller adds the result to the layer output.
pub fn gas_branch(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &GasIds,
    x: Var,
    n: usize,
    cfg: &GasConfig,
    run: &GasRun,
) -> Result<(Var, GasTrace)> {
    let rows = tape.value(x).rows();
    if rows != 2 * n {
        return Err(Error::Shape(format!(
            "GAS input has {rows} rows, expected {}",
            2 * n
        )));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {}",
            cfg.tau
        )));
    }
    let xn = ids.ln.apply(tape, store, x);
    let h = ids.mlp1.apply(tape, store, xn);
    let h = tape.gelu(h);
    let logits = ids.mlp2.apply(tape, store, h);
    if let Some(i) = tape.value(logits).data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "partition logit {i} is not finite"
        )));
    }
    let z = match run.seed {
        Some(s) => {
            let g = tape.constant(gumbel_noise(&[rows, 2], s));
            tape.add(logits, g)
        }
        None => logits,
    };
    let z = tape.scale(z, 1.0 / cfg.tau);
    let soft = tape.softmax(z);
    let hard = argmax_one_hot(tape.value(soft));
    let labels = if run.relaxed {
        soft
    } else {
        tape.straight_through(soft, hard.clone())
    };
    let first: Vec<f64> = (0..rows).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    let second: Vec<f64> = first.iter().map(|v| 1.0 - v).collect();
    let l1 = tape.row_scale(labels, first);
    let l2 = tape.row_scale(labels, second);
    let padded = tape.concat_cols(&[l1, l2]);
    let m = tape.constant(connection_table(cfg.relation_mode));
    let pm = tape.matmul(padded, m);
    let w = tape.matmul_bt(pm, padded);
    let att = multi_head_attention(
        tape,
        store,
        &ids.attn,
        xn,
        Some(Relation {
            w,
            mode: cfg.mask_mode,
        }),
        None,
    )?;
    Ok((
        att.out,
        GasTrace {
            soft,
            hard,
            relation: w,
            weights: att.weights[0],
        },
    ))
}

/// Plain-text PBM (P1) rendering of a binary matrix.
pub fn relation_pbm(w: &Tensor) -> String {
    let (r, c) = (w.rows(), w.cols());
    let mut s = format!("P1\n{c} {r}\n");
    for i in 0..r {
        let line: Vec<&str> = w
            .row(i)
            .iter()
            .map(|&v| if v != 0.0 { "1" } else { "0" })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The relation rule written out term by term.
    fn brute(p: &Tensor, i: usize, j: usize) -> f64 {
        let a = |r: usize, c: usize| p.at(r, c);
        a(i, 0) * a(j, 0)
            + a(i, 1) * (a(j, 1) + a(j, 3))
            + a(i, 2) * a(j, 2)
            + a(i, 3) * (a(j, 3) + a(j, 1))
    }

    fn labels_from_bits(bits: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(&[bits.len(), 2]);
        for (i, &b) in bits.iter().enumerate() {
            t.data[i * 2 + b] = 1.0;
        }
        t
    }

    #[test]
    fn saturated_logits_give_one_hot() {
        let logits = Tensor::from_vec(&[1, 2], vec![10.0, -10.0]).unwrap();
        let p = predict_partition(&logits, 0.1, None).unwrap();
        assert!((p.soft.data[0] - 1.0).abs() < 1e-8);
        assert_eq!(p.hard.data, vec![1.0, 0.0]);
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let logits =
            Tensor::from_vec(&[4, 2], vec![0.1, 0.3, -0.2, 0.0, 1.0, 1.0, 0.0, 2.0]).unwrap();
        let a = predict_partition(&logits, 1.0, Some(9)).unwrap();
        let b = predict_partition(&logits, 1.0, Some(9)).unwrap();
        assert_eq!(a, b);
        assert!(predict_partition(&logits, 0.0, None).is_err());
    }

    #[test]
    fn pad_labels_places_frames() {
        let l = labels_from_bits(&[1, 0, 1, 1]);
        let p = pad_labels(&l, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.row(2), &[0.0, 0.0, 0.0, 1.0]);
        assert!(pad_labels(&l, 3).is_err());
    }

    #[test]
    fn relation_matches_rule_at_four_tokens() {
        for code in 0..16usize {
            let bits: Vec<usize> = (0..4).map(|k| (code >> k) & 1).collect();
            let p = pad_labels(&labels_from_bits(&bits), 2).unwrap();
            let w = relation_matrix(&p, RelationMode::Full).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(w.at(i, j), brute(&p, i, j));
                }
            }
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let p = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(relation_matrix(&p, RelationMode::Full).is_err());
    }

    #[test]
    fn pbm_header() {
        let s = relation_pbm(&Tensor::identity(2));
        assert_eq!(s, "P1\n2 2\n1 0\n0 1\n");
    }
}
