//! Parameter registry, Xavier initialization, Adam, and a finite-difference
//! gradient checker.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, uniquely named set of trainable tensors. Iteration order is
/// registration order, which fixes both optimizer update order and
/// checkpoint layout.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Tensor {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        assert!(tensor.is_trainable(), "registered tensor must be trainable");
        self.entries.push((name, tensor.clone()));
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, t)| {
                let (r, c) = t.shape();
                r * c
            })
            .sum()
    }
}

/// Uniform Xavier/Glorot initialization: entries drawn from
/// `U(-b, b)` with `b = sqrt(6 / (rows + cols))`.
pub fn xavier_fill<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Seeded standalone variant of [`xavier_fill`].
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    xavier_fill(rows, cols, &mut rng)
}

/// Adam with bias correction. Moment buffers are kept in parameter
/// registration order; the learning rate is supplied per step so the
/// trainer can drive its milestone schedule.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|(_, t)| {
                let (r, c) = t.shape();
                Array2::zeros((r, c))
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every registered parameter. Parameters whose
    /// gradient is absent are treated as zero-gradient; with fresh moment
    /// buffers they stay bit-identical.
    pub fn step(&mut self, params: &ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let g = p.grad_or_zeros();
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name} at optimizer step {t}"
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mut vals = p.values_mut();
            for ((x, &mi), &vi) in vals.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Options for [`grad_check`].
///
/// `floor` guards the relative-error denominator: entries whose analytic
/// and numeric gradients are both below it are compared on an absolute
/// scale, which is all central differences can resolve there.
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Cap on checked entries per parameter; larger parameters are sampled
    /// without replacement under `seed`.
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            sample_cap: 200,
            seed: 0x5eed,
        }
    }
}

pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_err: f64,
    pub total_entries: usize,
    pub worst_param: String,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must rebuild the loss graph from the current parameter values and
/// be deterministic (no dropout, no running-statistics updates; run the
/// model in `Phase::Frozen`).
pub fn grad_check<F>(mut f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    params.zero_grads();
    let loss = f()?;
    if loss.shape() != (1, 1) {
        return Err(Error::Config("grad_check: loss must be 1 x 1".into()));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    loss.backward();
    let analytic: Vec<Array2<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut per_param = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut total = 0usize;

    for (pi, (name, p)) in params.iter().enumerate() {
        let (r, c) = p.shape();
        let size = r * c;
        let picks: Vec<usize> = if size <= opts.sample_cap {
            (0..size).collect()
        } else {
            // Sample without replacement via a seeded partial shuffle.
            let mut idx: Vec<usize> = (0..size).collect();
            for i in 0..opts.sample_cap {
                let j = rng.gen_range(i..size);
                idx.swap(i, j);
            }
            idx.truncate(opts.sample_cap);
            idx
        };

        let mut param_max = 0.0f64;
        for &flat in &picks {
            let (i, j) = (flat / c, flat % c);
            p.nudge(i, j, opts.h);
            let up = f()?.item();
            p.nudge(i, j, -2.0 * opts.h);
            let down = f()?.item();
            p.nudge(i, j, opts.h);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite loss while perturbing {name}[{i},{j}]"
                )));
            }
            let fd = (up - down) / (2.0 * opts.h);
            let ad = analytic[pi][[i, j]];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(opts.floor);
            if rel > param_max {
                param_max = rel;
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i},{j}]");
            }
        }
        total += picks.len();
        per_param.push(ParamCheck {
            name: name.to_string(),
            entries: picks.len(),
            max_rel_err: param_max,
        });
    }

    Ok(GradCheckReport {
        tol: opts.tol,
        max_rel_err,
        total_entries: total,
        worst_param,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_respects_the_fan_bound_and_seed() {
        let w = xavier_init(64, 192, 9);
        let bound = (6.0f64 / (64.0 + 192.0)).sqrt();
        assert!(w.iter().all(|&v| v.abs() < bound));
        // Not degenerate, and reproducible.
        assert!(w.iter().any(|&v| v.abs() > bound * 0.5));
        assert_eq!(w, xavier_init(64, 192, 9));
        assert_ne!(w, xavier_init(64, 192, 10));
    }

    #[test]
    fn adam_first_step_moves_by_almost_exactly_lr() {
        // With g = 1 the bias-corrected first step is
        // -lr * 1 / (1 + 1e-8), i.e. ~ -0.1 at lr = 0.1.
        let mut params = ParamSet::new();
        let p = params.register("w", Tensor::param(Array2::zeros((1, 1))));
        let mut adam = Adam::new(&params);
        let loss = p.mul(&Tensor::scalar(1.0)).unwrap().sum_all();
        loss.backward();
        adam.step(&params, 0.1).unwrap();
        let moved = p.value_at(0, 0);
        assert!((moved + 0.1).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn adam_leaves_parameters_with_zero_gradient_unchanged() {
        let mut params = ParamSet::new();
        let used = params.register("used", Tensor::param(Array2::ones((1, 2))));
        let unused = params.register("unused", Tensor::param(Array2::ones((2, 2))));
        let mut adam = Adam::new(&params);
        let loss = used.sum_all();
        loss.backward();
        adam.step(&params, 0.05).unwrap();
        assert!(unused.values().iter().all(|&v| v == 1.0));
        assert!(used.values().iter().all(|&v| v != 1.0));
    }

    #[test]
    fn adam_reports_the_parameter_with_a_non_finite_gradient() {
        let mut params = ParamSet::new();
        let p = params.register("head.w", Tensor::param(Array2::ones((1, 1))));
        let mut adam = Adam::new(&params);
        let bad = p.affine(0.0, 0.0).ln(); // ln(0) = -inf in forward, grad 1/0
        bad.sum_all().backward();
        let err = adam.step(&params, 0.1).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("head.w"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_accepts_a_correct_graph_and_reports_entry_counts() {
        let mut params = ParamSet::new();
        let a = params.register("a", Tensor::param(xavier_init(3, 5, 1)));
        let b = params.register("b", Tensor::param(xavier_init(5, 4, 2)));
        let w = Tensor::constant(xavier_init(3, 4, 3));
        let report = grad_check(
            || Ok(a.matmul(&b)?.tanh().mul(&w)?.sum_all()),
            &params,
            &GradCheckOptions {
                tol: 1e-6,
                floor: 1e-6,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.total_entries, 15 + 20);
    }

    #[test]
    fn grad_check_samples_large_parameters_under_the_cap() {
        let mut params = ParamSet::new();
        let a = params.register("big", Tensor::param(xavier_init(30, 40, 4)));
        let report = grad_check(
            || Ok(a.sum_all()),
            &params,
            &GradCheckOptions {
                sample_cap: 50,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert_eq!(report.total_entries, 50);
        assert!(report.passed());
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        // Forward computes x^2 but we pretend the gradient is 1 by routing
        // through a constant detach-like copy.
        let mut params = ParamSet::new();
        let x = params.register("x", Tensor::param(Array2::from_elem((1, 1), 0.7)));
        let report = grad_check(
            || {
                // f(x) = x^2 in value, but graph sees x * const(x): d/dx = x, not 2x.
                let frozen = Tensor::scalar(x.item());
                Ok(x.mul(&frozen)?.sum_all())
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.worst_param.contains('x'));
    }
}
