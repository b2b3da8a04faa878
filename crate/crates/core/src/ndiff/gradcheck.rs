use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::stack::{LayerStack, Mode, StackInput};
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// A parameter fails when its worst relative error reaches this.
    pub tolerance: f64,
    /// Elements checked per tensor; small tensors are checked fully.
    pub samples_per_tensor: usize,
    /// Seed for the subsampling choice.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 32,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric gradient at the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out.push_str(&format!(
                "{}: checked {}/{}, max rel err {:.3e} (analytic {:.6e}, numeric {:.6e}, index {})\n",
                p.name, p.checked, p.total, p.max_rel_error, p.analytic, p.numeric, p.worst_index
            ));
        }
        out.push_str(&format!(
            "overall max rel err {:.3e}, tolerance {:.1e}: {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.pass { "pass" } else { "FAIL" }
        ));
        out
    }
}

/// Compares analytic gradients against central finite differences in
/// `f64`. `trainable` lists the parameter names to perturb; a model with
/// no trainable parameters yields an empty, passing report.
///
/// Relative error per element:
/// `|ga - gfd| / max(|ga|, |gfd|, 1e-5, resolution / tolerance)`.
/// The absolute floor absorbs roundoff whenever the true gradient is
/// near zero. The resolution term is what the probe itself can resolve:
/// each loss evaluation carries roundoff of order `|loss| * ulp`, so
/// after dividing by `2 * eps` the difference quotient is only good to
/// about `|loss| * ulp / eps` (times a small factor for accumulated
/// arithmetic). Disagreements below that are indistinguishable from
/// exact agreement and must not fail the check; anything a bug would
/// produce, being proportional to the gradient itself, still does.
pub fn gradient_check(
    params: &ParameterStore<f64>,
    trainable: &[String],
    loss_fn: impl Fn(&ParameterStore<f64>) -> Result<f64>,
    grad_fn: impl Fn(&ParameterStore<f64>) -> Result<ParameterStore<f64>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = grad_fn(params)?;
    for (name, g) in analytic.iter() {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite analytic gradient in {name}")));
        }
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at the check point".into()));
    }
    let resolution = 32.0 * base.abs() * f64::EPSILON / cfg.eps;
    let floor = 1e-5f64.max(resolution / cfg.tolerance);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        pass: true,
    };
    let mut names = trainable.to_vec();
    names.sort();
    names.dedup();
    for name in &names {
        let total = params.get(name)?.len();
        let indices = pick_indices(total, cfg.samples_per_tensor, cfg.seed, name);
        let ga_tensor = analytic.get(name)?;
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            total,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let orig = work.get(name)?.data()[idx];
            work.get_mut(name)?.data_mut()[idx] = orig + cfg.eps;
            let plus = loss_fn(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig - cfg.eps;
            let minus = loss_fn(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing {name}[{idx}]"
                )));
            }
            let gfd = (plus - minus) / (2.0 * cfg.eps);
            let ga = ga_tensor.data()[idx];
            let rel = (ga - gfd).abs() / ga.abs().max(gfd.abs()).max(floor);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = idx;
                check.analytic = ga;
                check.numeric = gfd;
            }
        }
        if check.max_rel_error > report.max_rel_error {
            report.max_rel_error = check.max_rel_error;
        }
        if check.max_rel_error >= cfg.tolerance {
            report.pass = false;
        }
        report.params.push(check);
    }
    Ok(report)
}

fn pick_indices(total: usize, samples: usize, seed: u64, name: &str) -> Vec<usize> {
    if total <= samples {
        return (0..total).collect();
    }
    let mut h = seed;
    for b in name.bytes() {
        h = h.wrapping_mul(0x100000001b3).wrapping_add(b as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(&mut rng);
    let mut picked: Vec<usize> = all.into_iter().take(samples).collect();
    picked.sort();
    picked
}

/// Gradient check for a [`LayerStack`] against the loss
/// `0.5 * sum((y - target)^2)` with a seeded random target. Dropout masks
/// are reseeded identically on every evaluation so the loss is a
/// deterministic function of the parameters.
pub fn check_stack(
    stack: &LayerStack,
    params: &ParameterStore<f64>,
    input: &StackInput<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mask_seed = cfg.seed ^ 0xd50f;
    let forward = |ps: &ParameterStore<f64>| -> Result<(Tensor<f64>, _)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let inp = match input {
            StackInput::Seq(t) => StackInput::Seq(*t),
            StackInput::Tokens(t) => StackInput::Tokens(*t),
        };
        stack.forward_cached(ps, inp, Mode::Train, &mut rng)
    };
    let (y0, _) = forward(params)?;
    let target = {
        use rand::Rng;
        let mut trng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a26);
        let data = (0..y0.len()).map(|_| trng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(y0.shape(), data)?
    };
    let loss_fn = |ps: &ParameterStore<f64>| -> Result<f64> {
        let (y, _) = forward(ps)?;
        Ok(y.data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| 0.5 * (a - b) * (a - b))
            .sum())
    };
    let grad_fn = |ps: &ParameterStore<f64>| -> Result<ParameterStore<f64>> {
        let (y, cache) = forward(ps)?;
        let mut dy = y.clone();
        for (d, &t) in dy.data_mut().iter_mut().zip(target.data()) {
            *d -= t;
        }
        let mut grads = zeros_for(ps, &stack.trainable_names())?;
        stack.backward(ps, &mut grads, &cache, &dy)?;
        Ok(grads)
    };
    gradient_check(params, &stack.trainable_names(), loss_fn, grad_fn, cfg)
}

/// Builds a zeroed gradient store holding exactly `names`.
pub fn zeros_for(
    params: &ParameterStore<f64>,
    names: &[String],
) -> Result<ParameterStore<f64>> {
    let mut g = ParameterStore::new();
    for n in names {
        g.insert(n.clone(), Tensor::zeros(params.get(n)?.shape()));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::layers::Act;
    use crate::ndiff::stack::{LayerConfig, LayerKind};

    fn run(stack: LayerStack, rows: usize, cols: usize) -> GradCheckReport {
        let params = stack.seeded_init::<f64>(123);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..rows * cols)
            .map(|_| {
                use rand::Rng;
                rng.gen_range(-1.0..1.0)
            })
            .collect();
        let x = Tensor::from_vec(&[rows, cols], data).unwrap();
        let cfg = GradCheckConfig::default();
        check_stack(&stack, &params, &StackInput::Seq(&x), &cfg).unwrap()
    }

    #[test]
    fn fully_connected_passes() {
        let stack = LayerStack::new(vec![LayerConfig::new(
            "fc",
            LayerKind::FullyConnected { input: 3, output: 4 },
        )]);
        let r = run(stack, 2, 3);
        assert!(r.pass, "{}", r.render());
        // affine map in f64: essentially exact
        assert!(r.max_rel_error < 1e-6, "{}", r.render());
    }

    #[test]
    fn conv_bn_act_passes() {
        let stack = LayerStack::new(vec![
            LayerConfig::new("c", LayerKind::Conv1d { in_ch: 3, out_ch: 4, kernel: 3 }),
            LayerConfig::new("b", LayerKind::BatchNorm { channels: 4 }),
            LayerConfig::new("a", LayerKind::Activation(Act::Gelu)),
        ]);
        let r = run(stack, 4, 3);
        assert!(r.pass, "{}", r.render());
    }

    #[test]
    fn recurrent_passes() {
        let stack = LayerStack::new(vec![LayerConfig::new(
            "r",
            LayerKind::Recurrent { input: 3, hidden: 4 },
        )]);
        let r = run(stack, 5, 3);
        assert!(r.pass, "{}", r.render());
    }

    #[test]
    fn birecurrent_passes() {
        let stack = LayerStack::new(vec![LayerConfig::new(
            "r",
            LayerKind::BiRecurrent { input: 2, hidden: 3 },
        )]);
        let r = run(stack, 4, 2);
        assert!(r.pass, "{}", r.render());
    }

    #[test]
    fn dropout_passes_with_fixed_masks() {
        let stack = LayerStack::new(vec![
            LayerConfig::new("fc", LayerKind::FullyConnected { input: 3, output: 5 }),
            LayerConfig::new("d", LayerKind::Dropout { p: 0.4 }),
        ]);
        let r = run(stack, 3, 3);
        assert!(r.pass, "{}", r.render());
    }

    #[test]
    fn embedding_stack_passes() {
        let stack = LayerStack::new(vec![
            LayerConfig::new("e", LayerKind::Embedding { vocab: 6, dim: 3 }),
            LayerConfig::new("fc", LayerKind::FullyConnected { input: 3, output: 2 }),
        ]);
        let params = stack.seeded_init::<f64>(5);
        let tokens = vec![0usize, 3, 5, 3];
        let cfg = GradCheckConfig::default();
        let r = check_stack(&stack, &params, &StackInput::Tokens(&tokens), &cfg).unwrap();
        assert!(r.pass, "{}", r.render());
    }

    #[test]
    fn frozen_stack_yields_empty_report() {
        let stack = LayerStack::new(vec![
            LayerConfig::new("a", LayerKind::Activation(Act::Tanh)),
            LayerConfig::new("d", LayerKind::Dropout { p: 0.2 }),
        ]);
        let params = stack.seeded_init::<f64>(5);
        let x = Tensor::from_vec(&[2, 3], vec![0.1; 6]).unwrap();
        let cfg = GradCheckConfig::default();
        let r = check_stack(&stack, &params, &StackInput::Seq(&x), &cfg).unwrap();
        assert!(r.pass);
        assert!(r.params.is_empty());
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sabotage: gradient closure doubles one entry
        let mut ps = ParameterStore::<f64>::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        let trainable = vec!["w".to_string()];
        let loss = |p: &ParameterStore<f64>| {
            let w = p.get("w")?;
            Ok(w.data()[0] * w.data()[0] + w.data()[1])
        };
        let grad = |p: &ParameterStore<f64>| {
            let w = p.get("w")?;
            let mut g = ParameterStore::new();
            g.insert(
                "w",
                Tensor::from_vec(&[2], vec![4.0 * w.data()[0], 1.0]).unwrap(),
            );
            Ok(g)
        };
        let r = gradient_check(&ps, &trainable, loss, grad, &GradCheckConfig::default()).unwrap();
        assert!(!r.pass, "{}", r.render());
    }
}
