//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gas::GasRun;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::track::{
    draw_sample, sample_loss, toy_video, LossWeights, ToyConfig, Tracker, TrackerConfig,
    TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub eps: f64,
    /// Entries checked per parameter tensor, chosen by `seed`; `None` checks all.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            eps: 1e-4,
            per_param: None,
            seed: 0,
        }
    }
}

/// Denominator floor of the relative error, scaled by `max(1, |loss|)`.
/// Entries with near-zero gradients are judged by their absolute error,
/// which for large losses is dominated by rounding in the difference.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_err <= self.tol))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_value<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let v = tape.value(l);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "loss has shape {:?}, expected a scalar",
            v.shape
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Analytic gradients of `loss` with respect to every parameter.
pub fn analytic_grads<F>(store: &ParamStore, loss: &F) -> Result<Vec<Option<Tensor>>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    if !tape.value(l).item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(tape.backward(l, store.len()).into_params())
}

/// Compares given gradients of the `select`ed parameters against central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε`.
pub fn compare<F>(
    store: &ParamStore,
    select: &[ParamId],
    loss: &F,
    analytic: &[Option<Tensor>],
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.tol > 0.0) {
        return Err(Error::Invalid("eps and tol must be positive".into()));
    }
    let floor = REL_FLOOR * loss_value(store, loss)?.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(select.len());
    for &id in select {
        let n = store.get(id).len();
        let picks: Vec<usize> = match opts.per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(&store.get(id).shape);
        let g = analytic[id.0].as_ref().unwrap_or(&zero);
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for k in picks {
            let x = store.get(id).data[k];
            work.get_mut(id).data[k] = x + opts.eps;
            let up = loss_value(&work, loss)?;
            work.get_mut(id).data[k] = x - opts.eps;
            let down = loss_value(&work, loss)?;
            work.get_mut(id).data[k] = x;
            let numeric = (up - down) / (2.0 * opts.eps);
            let e = rel_err(g.data[k], numeric, floor);
            check.max_rel_err = if e.is_nan() {
                f64::INFINITY
            } else {
                check.max_rel_err.max(e)
            };
            check.max_abs_err = check.max_abs_err.max((g.data[k] - numeric).abs());
        }
        out.push(check);
    }
    Ok(GradReport {
        tol: opts.tol,
        params: out,
    })
}

/// Checks every parameter in `select` (all parameters when empty).
pub fn grad_check<F>(
    store: &ParamStore,
    select: &[ParamId],
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let all: Vec<ParamId> = store.ids().collect();
    let select = if select.is_empty() { &all[..] } else { select };
    let analytic = analytic_grads(store, &loss)?;
    compare(store, select, &loss, &analytic, opts)
}

/// Tolerances of the tracker suite: smooth paths and the relaxed
/// straight-through path of the partition branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StackCheck {
    pub opts: GradCheckOptions,
    pub st_tol: f64,
}

impl Default for StackCheck {
    fn default() -> Self {
        Self {
            opts: GradCheckOptions {
                per_param: Some(4),
                ..Default::default()
            },
            st_tol: 1e-3,
        }
    }
}

/// Checks the whole tracker built from `cfg` on one toy training pair:
///
/// - `encoder_head`: backbone, encoder and head under the heatmap and box
///   losses, without the partition branch.
/// - `gas`: encoder parameters including the partition branch, relaxed
///   forward, at `st_tol`.
/// - `ssl_decoder`: decoder parameters under the reconstruction loss with
///   dropout off.
pub fn check_tracker(
    cfg: &TrackerConfig,
    seed: u64,
    check: &StackCheck,
) -> Result<Vec<(&'static str, GradReport)>> {
    let toy = ToyConfig {
        frames: 6,
        ..Default::default()
    };
    let video = toy_video(&toy, seed)?;
    let data = [video];
    let tc = TrainConfig {
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();

    let mut plain = cfg.clone();
    plain.gas = None;
    plain.weights = LossWeights::new(0.0, 1.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Tracker::new(plain, &mut rng)?;
    let s = draw_sample(&model, &data, &tc, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let select = ids_where(&model.params, |n| !n.starts_with("dec."));
    let report = run_target(&model, &s, &GasRun::eval(), &select, &check.opts)?;
    out.push(("encoder_head", report));

    if cfg.gas.is_some() {
        let mut gas = cfg.clone();
        gas.weights = LossWeights::new(0.0, 1.0, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Tracker::new(gas, &mut rng)?;
        let run = GasRun {
            seed: Some(s.noise_seed),
            relaxed: true,
        };
        let select = ids_where(&model.params, |n| n.starts_with("enc."));
        let opts = GradCheckOptions {
            tol: check.st_tol,
            ..check.opts.clone()
        };
        out.push(("gas", run_target(&model, &s, &run, &select, &opts)?));
    }

    let mut ssl = cfg.clone();
    ssl.weights = LossWeights::new(1.0, 0.0, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Tracker::new(ssl, &mut rng)?;
    let run = GasRun {
        seed: Some(s.noise_seed),
        relaxed: true,
    };
    let select = ids_where(&model.params, |n| n.starts_with("dec."));
    out.push((
        "ssl_decoder",
        run_target(&model, &s, &run, &select, &check.opts)?,
    ));
    Ok(out)
}

fn ids_where(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<ParamId> {
    store.ids().filter(|&id| keep(store.name(id))).collect()
}

fn run_target(
    model: &Tracker,
    s: &crate::track::Sample,
    run: &GasRun,
    select: &[ParamId],
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let m = Tracker {
            cfg: model.cfg.clone(),
            params: store.clone(),
            ids: model.ids.clone(),
        };
        Ok(sample_loss(tape, &m, s, run, false)?.0)
    };
    grad_check(&model.params, select, loss, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss = |tape: &mut Tape, st: &ParamStore| {
            let x = tape.param(st, a);
            let y = tape.mul(x, x);
            Ok(tape.sum(y))
        };
        let r = grad_check(&store, &[], loss, &GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err() < 1e-9);
        assert_eq!(r.checked(), 3);
    }

    #[test]
    fn nan_loss_is_an_error() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        let loss = |tape: &mut Tape, st: &ParamStore| {
            let x = tape.param(st, a);
            Ok(tape.sum(x))
        };
        assert!(matches!(
            grad_check(&store, &[], loss, &GradCheckOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
