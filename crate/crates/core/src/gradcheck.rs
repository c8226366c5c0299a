//! Central finite differences against reverse-mode gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::nn::{Ctx, ParamId, ParamStore};

/// Absolute gradients below this are compared as if they were this large,
/// so near-zero pairs are not judged on rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub required_fraction: f64,
    pub probes: Vec<ProbeResult>,
    /// (checked, passed) per top-level parameter prefix.
    pub per_group: BTreeMap<String, (usize, usize)>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.probes.len()
    }

    pub fn passed_count(&self) -> usize {
        self.probes.iter().filter(|p| p.rel_error < self.tolerance).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.probes.is_empty() {
            0.0
        } else {
            self.passed_count() as f64 / self.probes.len() as f64
        }
    }

    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.pass_fraction() >= self.required_fraction
    }

    pub fn worst(&self, n: usize) -> Vec<&ProbeResult> {
        let mut v: Vec<&ProbeResult> = self.probes.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v.truncate(n);
        v
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {}/{} probes within rel. error {:e} ({:.1}%, need {:.0}%)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.passed_count(),
            self.checked(),
            self.tolerance,
            100.0 * self.pass_fraction(),
            100.0 * self.required_fraction
        );
        for (group, (n, ok)) in &self.per_group {
            s.push_str(&format!("  {group:<10} {ok}/{n}\n"));
        }
        for p in self.worst(3) {
            s.push_str(&format!(
                "  worst: {}[{}] analytic {:.6e} numeric {:.6e} rel {:.2e}\n",
                p.name, p.index, p.analytic, p.numeric, p.rel_error
            ));
        }
        s
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub required_fraction: f64,
    pub seed: u64,
    /// Forward in training mode (batch statistics).
    pub training: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 200, step: 1e-4, tolerance: 1e-3, required_fraction: 0.95, seed: 0, training: true }
    }
}

fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Probe `opts.samples` scalar parameters, spread evenly over top-level groups,
/// and compare d(loss)/d(param) with a central difference.
pub fn check_gradients(
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
    loss_fn: impl Fn(&Ctx<'_, f64>) -> Var<f64>,
) -> GradCheckReport {
    let g = Graph::new();
    let ctx = Ctx::new(&g, params, opts.training);
    let loss = loss_fn(&ctx);
    let mut grads = g.backward(&loss);
    let analytic = ctx.param_grads(&mut grads);
    drop(ctx);

    let mut groups: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
    for id in params.trainable_ids() {
        groups.entry(group_of(&params.entry(id).name)).or_default().push(id);
    }
    let group_list: Vec<(String, Vec<ParamId>)> = groups.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes = Vec::with_capacity(opts.samples);
    let mut per_group: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut work = params.clone();
    for s in 0..opts.samples {
        if group_list.is_empty() {
            break;
        }
        let (group, ids) = &group_list[s % group_list.len()];
        // Pick an element uniformly over the group's scalars.
        let total: usize = ids.iter().map(|&id| params.get(id).numel()).sum();
        let mut k = rng.random_range(0..total);
        let mut chosen = ids[0];
        for &id in ids {
            let n = params.get(id).numel();
            if k < n {
                chosen = id;
                break;
            }
            k -= n;
        }
        let original = params.get(chosen).data()[k];
        let eval = |work: &ParamStore<f64>| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, work, opts.training);
            loss_fn(&ctx).value().item()
        };
        work.get_mut(chosen).data_mut()[k] = original + opts.step;
        let plus = eval(&work);
        work.get_mut(chosen).data_mut()[k] = original - opts.step;
        let minus = eval(&work);
        work.get_mut(chosen).data_mut()[k] = original;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[chosen.0].as_ref().map(|t| t.data()[k]).unwrap_or(0.0);
        let r = rel_error(a, numeric);
        let e = per_group.entry(group.clone()).or_default();
        e.0 += 1;
        if r < opts.tolerance {
            e.1 += 1;
        }
        probes.push(ProbeResult {
            name: params.entry(chosen).name.clone(),
            index: k,
            analytic: a,
            numeric,
            rel_error: r,
        });
    }
    GradCheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        required_fraction: opts.required_fraction,
        probes,
        per_group,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Scope};
    use crate::tensor::Tensor;

    #[test]
    fn linear_tanh_passes_and_tight_tolerance_fails() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut Scope::new(&mut store, &mut rng, "m"), "lin", 3, 2, true);
        let x = Tensor::from_f64(&[4, 3], &[0.1, -0.2, 0.3, 0.5, 0.4, -0.1, 0.0, 0.9, -0.7, 0.2, 0.2, 0.2]);
        let loss = |ctx: &Ctx<'_, f64>| {
            let y = ctx.g.tanh(&lin.forward(ctx, &ctx.constant(x.clone())));
            ctx.g.sum_all(&ctx.g.mul(&y, &y))
        };
        let report = check_gradients(&store, &GradCheckOptions { samples: 40, ..Default::default() }, loss);
        assert!(report.passed(), "{}", report.summary());
        let strict = GradCheckOptions { samples: 40, tolerance: 1e-12, ..Default::default() };
        assert!(!check_gradients(&store, &strict, loss).passed());
    }
}
