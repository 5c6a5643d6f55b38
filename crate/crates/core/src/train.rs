//! Objective, SGD with momentum and step decay, and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, BoundModel, ResRnnConfig, ResRnnParams, RwtMatrix};
use crate::nn::{InitScheme, ParamKind, ParamTree};
use crate::phantom::{crop_at, CineSequence};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub step_size: usize,
    pub max_iters: usize,
    pub batch_subjects: usize,
    /// Maximum global L2 norm of the raw gradient.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Record the loss every this many iterations (and at the last one).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.05,
            weight_decay: 0.0005,
            momentum: 0.9,
            gamma: 0.5,
            step_size: 2500,
            max_iters: 7500,
            batch_subjects: 4,
            grad_clip: None,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail("base_lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.step_size == 0 || self.max_iters == 0 || self.batch_subjects == 0 || self.log_every == 0 {
            return fail("step_size, max_iters, batch_subjects and log_every must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return fail("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Step-decayed learning rate at zero-based iteration `iter`.
    pub fn lr(&self, iter: usize) -> f64 {
        self.base_lr * self.gamma.powi((iter / self.step_size) as i32)
    }
}

/// `½ Σ ‖θ‖²` over weights only.
pub fn weight_penalty(params: &ResRnnParams) -> f64 {
    let mut s = 0.0;
    params.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Weight {
            s += t.sum_squares();
        }
    });
    0.5 * s
}

/// `1/(2SF) Σ ‖y − ŷ‖² + λ/2 Σ ‖θ‖²` over a batch of `S` subjects.
pub fn loss(preds: &[RwtMatrix], targets: &[RwtMatrix], params: &ResRnnParams, lambda: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape(
            "loss",
            format!("{} predictions for {} targets", preds.len(), targets.len()),
        ));
    }
    let frames = targets[0].frames();
    let mut sq = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if (p.frames(), p.regions()) != (t.frames(), t.regions()) || t.frames() != frames {
            return Err(Error::shape("loss", "prediction and target shapes differ"));
        }
        sq += p.values().iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sq / (2 * preds.len() * frames) as f64 + lambda * weight_penalty(params))
}

/// Momentum buffers plus a mask of parameters that never move.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: ResRnnParams,
    frozen: Vec<bool>,
}

impl SgdState {
    pub fn new(params: &ResRnnParams) -> Self {
        Self::with_frozen(params, |_| false)
    }

    pub fn with_frozen(params: &ResRnnParams, frozen: impl Fn(&str) -> bool) -> Self {
        let mut mask = Vec::new();
        params.visit("", &mut |name, _, _| mask.push(frozen(name)));
        SgdState {
            velocity: zeros_like(params),
            frozen: mask,
        }
    }

    pub fn velocity(&self) -> &ResRnnParams {
        &self.velocity
    }
}

fn zeros_like(params: &ResRnnParams) -> ResRnnParams {
    let mut z = params.clone();
    z.visit_mut("", &mut |_, _, t| t.data_mut().fill(0.0));
    z
}

fn tensors(p: &ResRnnParams) -> Vec<&Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, t| out.push(t));
    out
}

/// One update: `v ← μv − lr·(g + λθ)` (decay on weights only), `θ ← θ + v`.
pub fn sgd_step(
    params: &mut ResRnnParams,
    grads: &ResRnnParams,
    state: &mut SgdState,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    let mut bad = None;
    let mut norm_sq = 0.0;
    grads.visit("", &mut |name, _, g| {
        if !g.is_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
        norm_sq += g.sum_squares();
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    let scale = match cfg.grad_clip {
        Some(c) if norm_sq.sqrt() > c => c / norm_sq.sqrt(),
        _ => 1.0,
    };
    let lr = cfg.lr(iter);
    let grads = tensors(grads);
    let mut vel: Vec<Tensor> = tensors(&state.velocity).into_iter().cloned().collect();
    let mut i = 0;
    params.visit_mut("", &mut |_, kind, theta| {
        if !state.frozen[i] {
            let v = &mut vel[i];
            let g = grads[i].data();
            let decay = if kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            for ((vj, tj), gj) in v.data_mut().iter_mut().zip(theta.data_mut()).zip(g) {
                *vj = cfg.momentum * *vj - lr * (scale * gj + decay * *tj);
                *tj += *vj;
            }
        }
        i += 1;
    });
    let mut vel = vel.into_iter();
    state.velocity.visit_mut("", &mut |_, _, v| *v = vel.next().unwrap());
    Ok(())
}

/// Loss and gradient of one subject's contribution `‖y − ŷ‖² / (2SF)`.
pub fn subject_gradient(
    params: &ResRnnParams,
    cfg: &ResRnnConfig,
    frames: &Tensor,
    target: &RwtMatrix,
    batch: usize,
) -> Result<(f64, ResRnnParams)> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg, true)?;
    let x = tape.constant(frames.clone());
    let out = model::forward_on(&mut tape, &bound, x, cfg)?;
    let y = tape.constant(target.to_tensor());
    let diff = tape.sub(out.output, y)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let l = tape.scale(total, 1.0 / (2 * batch * cfg.frames) as f64);
    tape.backward(l)?;
    let value = tape.value(l).data()[0];
    let grads = bound.vars.map_named("", &mut |_, _, &v| tape.grad_or_zeros(v));
    Ok((value, grads))
}

fn add_into(acc: &mut ResRnnParams, other: &ResRnnParams) {
    let src = tensors(other);
    let mut i = 0;
    acc.visit_mut("", &mut |_, _, t| {
        for (a, b) in t.data_mut().iter_mut().zip(src[i].data()) {
            *a += b;
        }
        i += 1;
    });
}

/// Checks that every sequence matches the model's frame and region counts and
/// is large enough to crop the model input from.
pub fn check_compatible(data: &[CineSequence], cfg: &ResRnnConfig) -> Result<()> {
    for s in data {
        if s.frames.len() != cfg.frames || s.labels.regions() != cfg.regions {
            return Err(Error::Config(format!(
                "subject {} has {} frames × {} regions, model expects {} × {}",
                s.subject_id,
                s.frames.len(),
                s.labels.regions(),
                cfg.frames,
                cfg.regions
            )));
        }
        if s.image_size() < cfg.input_size {
            return Err(Error::Config(format!(
                "subject {} images are {}px, smaller than the {}px model input",
                s.subject_id,
                s.image_size(),
                cfg.input_size
            )));
        }
    }
    Ok(())
}

/// Crops every frame of `seq` at `(ox, oy)` into an `F × 1 × S × S` stack.
pub fn cropped_stack(seq: &CineSequence, size: usize, ox: usize, oy: usize) -> Result<Tensor> {
    let n = seq.image_size();
    let frames: Vec<Vec<f64>> = seq.frames.iter().map(|f| crop_at(f, n, size, ox, oy)).collect();
    model::stack_frames(&frames, size)
}

/// Same crop for every frame, offset `⌊slack/2⌋`.
pub fn center_stack(seq: &CineSequence, size: usize) -> Result<Tensor> {
    let off = (seq.image_size() - size) / 2;
    cropped_stack(seq, size, off, off)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ResRnnParams,
    /// `(iteration, loss)`; loss is evaluated before that iteration's update.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Minimizes the objective over `data` with whole subjects as batch items.
///
/// Each iteration draws `batch_subjects` subjects from a reshuffled stream,
/// crops every frame of a subject at one random offset, and sums per-subject
/// gradients in batch order, so results do not depend on the thread count.
pub fn train(
    data: &[CineSequence],
    model_cfg: &ResRnnConfig,
    cfg: &TrainConfig,
    init: Option<ResRnnParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.flat_features()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    check_compatible(data, model_cfg)?;
    let mut params = match init {
        Some(p) => {
            p.validate(model_cfg)?;
            p
        }
        None => ResRnnParams::init(model_cfg, cfg.seed, InitScheme::UniformFanIn)?,
    };
    let mut state = if model_cfg.freeze_trunk {
        SgdState::with_frozen(&params, model::is_trunk_param)
    } else {
        SgdState::new(&params)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::new();
    let mut initial = None;
    let size = model_cfg.input_size;
    for iter in 0..cfg.max_iters {
        let mut batch = Vec::with_capacity(cfg.batch_subjects);
        for _ in 0..cfg.batch_subjects {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().unwrap();
            let slack = data[idx].image_size() - size;
            let (ox, oy) = (rng.random_range(0..=slack), rng.random_range(0..=slack));
            batch.push((idx, ox, oy));
        }
        let results = batch
            .par_iter()
            .map(|&(idx, ox, oy)| {
                let x = cropped_stack(&data[idx], size, ox, oy)?;
                subject_gradient(&params, model_cfg, &x, &data[idx].labels, cfg.batch_subjects)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = zeros_like(&params);
        let mut value = cfg.weight_decay * weight_penalty(&params);
        for (l, g) in &results {
            value += l;
            add_into(&mut grads, g);
        }
        let first = *initial.get_or_insert(value);
        let limit = 1e3 * first;
        if !value.is_finite() || value > limit {
            return Err(Error::Diverged { iter, loss: value, limit });
        }
        if iter % cfg.log_every == 0 || iter + 1 == cfg.max_iters {
            log::info!("iter {iter:>6}  lr {:.5}  loss {value:.6e}", cfg.lr(iter));
            curve.push((iter, value));
        }
        sgd_step(&mut params, &grads, &mut state, cfg, iter)?;
    }
    Ok(TrainOutcome {
        params,
        loss_curve: curve,
    })
}

/// Per-parameter outcome of a whole-model finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub variant: crate::model::Variant,
    /// `(parameter name, max relative error over its entries)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) })
    }
}

/// Compares tape gradients of the squared-error loss with central
/// differences of step `h` for every entry of every parameter the variant
/// uses. Parameters, frames in `[0, 1]` and targets are drawn from `seed`.
pub fn model_grad_check(cfg: &ResRnnConfig, seed: u64, h: f64) -> Result<GradCheckReport> {
    use crate::tensor::relative_error;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ResRnnParams::init(cfg, seed, InitScheme::UniformFanIn)?;
    params.visit_mut("", &mut |_, kind, t| {
        if kind == ParamKind::Bias {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    });
    let s = cfg.input_size;
    let frames = Tensor::new(
        vec![cfg.frames, 1, s, s],
        (0..cfg.frames * s * s).map(|_| rng.random::<f64>()).collect(),
    )?;
    let target = RwtMatrix::new(
        cfg.frames,
        cfg.regions,
        (0..cfg.frames * cfg.regions).map(|_| rng.random_range(0.0..0.3)).collect(),
    )?;
    let (_, grads) = subject_gradient(&params, cfg, &frames, &target, 1)?;
    let loss_at = |p: &ResRnnParams| -> Result<f64> {
        let pred = model::forward(p, &frames, cfg)?;
        loss(&[pred], &[target.clone()], p, 0.0)
    };
    let analytic: Vec<(String, Tensor)> = {
        let mut v = Vec::new();
        grads.visit("", &mut |name, _, g| v.push((name.to_string(), g.clone())));
        v
    };
    let mut per_param = Vec::new();
    for (idx, (name, g)) in analytic.iter().enumerate() {
        if !uses_param(cfg.variant, name) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for j in 0..g.len() {
            let mut probe = params.clone();
            let nudge = |p: &mut ResRnnParams, delta: f64| {
                let mut k = 0;
                p.visit_mut("", &mut |_, _, t| {
                    if k == idx {
                        t.data_mut()[j] += delta;
                    }
                    k += 1;
                });
            };
            nudge(&mut probe, h);
            let up = loss_at(&probe)?;
            nudge(&mut probe, -2.0 * h);
            let down = loss_at(&probe)?;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[j];
            let e = if a.is_finite() && numeric.is_finite() {
                relative_error(a, numeric)
            } else {
                f64::INFINITY
            };
            worst = worst.max(e);
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        variant: cfg.variant,
        per_param,
    })
}

fn uses_param(variant: crate::model::Variant, name: &str) -> bool {
    if name.starts_with("fc2.") {
        variant.uses_head()
    } else if name.starts_with("temporal.") {
        variant.uses_temporal()
    } else if name.starts_with("spatial.") {
        variant.uses_spatial()
    } else {
        true
    }
}

/// `iteration<TAB>loss` lines with a header.
pub fn loss_curve_tsv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("iteration\tloss\n");
    for (i, l) in curve {
        s.push_str(&format!("{i}\t{l:.10e}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        for v in crate::model::Variant::ALL {
            let report = model_grad_check(&ResRnnConfig::toy().with_variant(v), 11, 1e-5).unwrap();
            assert!(report.max_error() < 1e-4, "{v}: {:?}", report.per_param);
        }
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr(0), 0.05);
        assert_eq!(cfg.lr(2499), 0.05);
        assert_eq!(cfg.lr(2500), 0.025);
        assert_eq!(cfg.lr(5000), 0.0125);
    }

    #[test]
    fn loss_hand_arithmetic() {
        let cfg = ResRnnConfig::toy();
        let params = ResRnnParams::init(&cfg, 0, InitScheme::UniformFanIn).unwrap();
        let t = RwtMatrix::new(1, 6, vec![0.2; 6]).unwrap();
        assert_eq!(loss(&[t.clone()], &[t.clone()], &params, 0.0).unwrap(), 0.0);
        let mut p = t.values().to_vec();
        p[0] += 0.1;
        let p = RwtMatrix::new(1, 6, p).unwrap();
        assert!((loss(&[p], &[t], &params, 0.0).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let cfg = ResRnnConfig::toy();
        let params = ResRnnParams::init(&cfg, 3, InitScheme::UniformFanIn).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, f, l) = (3, 4, 6);
        let mk = |rng: &mut ChaCha8Rng| {
            RwtMatrix::new(f, l, (0..f * l).map(|_| rng.random::<f64>()).collect()).unwrap()
        };
        let preds: Vec<_> = (0..s).map(|_| mk(&mut rng)).collect();
        let targets: Vec<_> = (0..s).map(|_| mk(&mut rng)).collect();
        let mut data = 0.0;
        for b in 0..s {
            for fi in 0..f {
                for li in 0..l {
                    let d = targets[b].get(fi, li) - preds[b].get(fi, li);
                    data += d * d;
                }
            }
        }
        let mut reg = 0.0;
        params.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Weight {
                for v in t.data() {
                    reg += v * v;
                }
            }
        });
        let want = data / (2.0 * s as f64 * f as f64) + 0.01 * 0.5 * reg;
        let got = loss(&preds, &targets, &params, 0.01).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    fn toy_params() -> ResRnnParams {
        ResRnnParams::init(&ResRnnConfig::toy(), 5, InitScheme::UniformFanIn).unwrap()
    }

    fn filled(p: &ResRnnParams, v: f64) -> ResRnnParams {
        let mut g = p.clone();
        g.visit_mut("", &mut |_, _, t| t.data_mut().fill(v));
        g
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let before = toy_params();
        let grads = filled(&before, 0.3);
        let mut after = before.clone();
        let mut state = SgdState::new(&after);
        sgd_step(&mut after, &grads, &mut state, &cfg, 0).unwrap();
        for (a, b) in tensors(&after).iter().zip(tensors(&before)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 0.05 * 0.3);
            }
        }
    }

    #[test]
    fn decay_shrinks_weights_only() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let before = toy_params();
        let mut after = before.clone();
        let mut state = SgdState::new(&after);
        sgd_step(&mut after, &filled(&before, 0.0), &mut state, &cfg, 0).unwrap();
        let mut kinds = Vec::new();
        before.visit("", &mut |_, k, _| kinds.push(k));
        for ((a, b), k) in tensors(&after).iter().zip(tensors(&before)).zip(kinds) {
            for (x, y) in a.data().iter().zip(b.data()) {
                match k {
                    ParamKind::Bias => assert_eq!(x, y),
                    ParamKind::Weight => assert_eq!(*x, y + -(0.05 * (0.01 * y))),
                }
            }
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let p = toy_params();
        let mut g = filled(&p, 0.0);
        g.spatial.w_h[2].data_mut()[0] = f64::NAN;
        let mut q = p.clone();
        let err = sgd_step(&mut q, &g, &mut SgdState::new(&p), &TrainConfig::default(), 0).unwrap_err();
        match err {
            Error::NonFiniteGradient(name) => assert_eq!(name, "spatial.w_ho"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn momentum_matches_scalar_oracle() {
        // f(θ) = ½·k·θ² on every entry, so g = kθ.
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let k = 2.0;
        let mut p = toy_params();
        let mut state = SgdState::new(&p);
        let theta0: Vec<f64> = tensors(&p).iter().flat_map(|t| t.data().to_vec()).collect();
        for it in 0..2 {
            let mut g = p.clone();
            g.visit_mut("", &mut |_, _, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            sgd_step(&mut p, &g, &mut state, &cfg, it).unwrap();
        }
        let got: Vec<f64> = tensors(&p).iter().flat_map(|t| t.data().to_vec()).collect();
        for (t0, t2) in theta0.iter().zip(got) {
            let v1 = -0.05 * k * t0;
            let t1 = t0 + v1;
            let v2 = 0.9 * v1 - 0.05 * k * t1;
            assert!((t2 - (t1 + v2)).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_step_reduces_convex_quadratic() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        // f = ½ Σ 3θ², curvature 3 < 2/lr = 40
        let f = |p: &ResRnnParams| tensors(p).iter().map(|t| 1.5 * t.sum_squares()).sum::<f64>();
        let mut p = toy_params();
        let mut g = p.clone();
        g.visit_mut("", &mut |_, _, t| t.data_mut().iter_mut().for_each(|v| *v *= 3.0));
        let before = f(&p);
        let mut state = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut state, &cfg, 0).unwrap();
        assert!(f(&p) < before);
    }

    #[test]
    fn clip_bounds_update() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: Some(1e-3),
            ..TrainConfig::default()
        };
        let before = toy_params();
        let mut after = before.clone();
        sgd_step(&mut after, &filled(&before, 10.0), &mut SgdState::new(&before), &cfg, 0).unwrap();
        let moved: f64 = tensors(&after)
            .iter()
            .zip(tensors(&before))
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect::<Vec<_>>())
            .sum();
        assert!((moved.sqrt() - 0.05 * 1e-3).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            TrainConfig { gamma: 1.0, ..TrainConfig::default() },
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_subjects: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
