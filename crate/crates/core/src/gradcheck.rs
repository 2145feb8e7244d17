//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every check owns a [`ParamStore`] of inputs and a closure building a graph
//! over them. Non-scalar outputs are contracted with a fixed random tensor so
//! every output element contributes to the checked loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::components::{Architecture, Component, ComponentConfig, ComponentKind, FusionModel, ModelSpec, Task};
use crate::error::Result;
use crate::grouping::{plan_grouping, SignalSpec};
use crate::masking::{apply_masks, l1_penalty_node};
use crate::tensor::{Bindings, Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE && self.checked > 0
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_err={:.2e} checked={} skipped={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.checked,
            self.skipped
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph, &Bindings) -> Result<Var> + 'a;

fn scalar_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let v = g.value(out);
    if v.len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights: Vec<f64> = (0..v.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(v.shape().to_vec(), weights)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn evaluate(store: &ParamStore, build: &Build, seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = build(&mut g, &p)?;
    let loss = scalar_loss(&mut g, out, seed)?;
    Ok((g.value(loss).item().expect("scalar loss"), g.relu_pattern()))
}

/// Compares analytic and numeric gradients for every scalar in `store`.
/// A point is skipped when some ReLU input changes sign between the two
/// perturbed evaluations, i.e. a kink lies inside the difference stencil.
pub fn check(name: &str, store: &ParamStore, build: &Build) -> Result<CheckResult> {
    let seed = name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = build(&mut g, &p)?;
    let loss = scalar_loss(&mut g, out, seed)?;
    let mut grads = g.backward(loss)?;
    let analytic = p.gradients(&mut grads);

    let mut work = store.clone();
    let mut result = CheckResult { name: name.to_string(), max_error: 0.0, checked: 0, skipped: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.get(id).len() {
            let x = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x + STEP;
            let (up, up_pattern) = evaluate(&work, build, seed)?;
            work.get_mut(id).data_mut()[i] = x - STEP;
            let (down, down_pattern) = evaluate(&work, build, seed)?;
            work.get_mut(id).data_mut()[i] = x;
            if up_pattern != down_pattern {
                result.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[k].data()[i], numeric);
            result.max_error = result.max_error.max(err);
            result.checked += 1;
        }
    }
    Ok(result)
}

struct Inputs {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Inputs { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn random(&mut self, shape: &[usize]) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        self.store.add(format!("in{}", self.store.len()), Tensor::new(shape.to_vec(), data).unwrap());
    }
}

fn op_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    macro_rules! op {
        ($name:expr, [$($shape:expr),*], |$g:ident, $x:ident| $body:expr) => {{
            let mut inp = Inputs::new(out.len() as u64 + 1);
            $( inp.random(&$shape); )*
            let n = inp.store.len();
            let build = |$g: &mut Graph, p: &Bindings| -> Result<Var> {
                let $x: Vec<Var> = (0..n).map(|i| p.var(crate::tensor::ParamId(i))).collect();
                $body
            };
            out.push(check($name, &inp.store, &build)?);
        }};
    }
    op!("matmul", [[3, 4], [4, 2]], |g, x| g.matmul(x[0], x[1]));
    op!("bmm", [[2, 3, 4], [2, 4, 2]], |g, x| g.bmm(x[0], x[1], false));
    op!("bmm_transposed", [[2, 3, 4], [2, 5, 4]], |g, x| g.bmm(x[0], x[1], true));
    op!("add", [[2, 3], [2, 3]], |g, x| g.add(x[0], x[1]));
    op!("sub", [[2, 3], [2, 3]], |g, x| g.sub(x[0], x[1]));
    op!("mul", [[2, 3], [2, 3]], |g, x| g.mul(x[0], x[1]));
    op!("add_trailing", [[2, 3, 4], [4]], |g, x| g.add_trailing(x[0], x[1]));
    op!("mul_trailing", [[2, 3, 4], [3, 4]], |g, x| g.mul_trailing(x[0], x[1]));
    op!("scale", [[5]], |g, x| g.scale(x[0], -1.7));
    op!("scale_by", [[2, 3], [1]], |g, x| g.scale_by(x[0], x[1]));
    op!("relu", [[4, 5]], |g, x| g.relu(x[0]));
    op!("sigmoid", [[4, 5]], |g, x| g.sigmoid(x[0]));
    op!("tanh", [[4, 5]], |g, x| g.tanh(x[0]));
    op!("softmax", [[3, 6]], |g, x| g.softmax(x[0]));
    op!("conv1d", [[2, 16, 3], [5, 3, 4]], |g, x| g.conv1d(x[0], x[1], 2));
    op!("conv1d_valid", [[1, 9, 2], [4, 2, 3]], |g, x| g.conv1d(x[0], x[1], 0));
    op!("mean_time", [[2, 7, 3]], |g, x| g.mean_time(x[0]));
    op!("weighted_time_sum", [[2, 7, 3], [2, 7]], |g, x| g.weighted_time_sum(x[0], x[1]));
    op!("concat", [[2, 3], [2, 1], [2, 4]], |g, x| g.concat(&x));
    op!("layer_norm", [[3, 6]], |g, x| g.layer_norm(x[0], 1e-5));
    op!("slice_last", [[2, 3, 6]], |g, x| g.slice_last(x[0], 1, 4));
    op!("gather_time", [[2, 4, 3]], |g, x| g.gather_time(x[0], &[1, 0, 0, 1, 2, 3, 3]));
    op!("time_step", [[2, 4, 3]], |g, x| g.time_step(x[0], 2));
    op!("lstm_cell", [[3, 8], [3, 2]], |g, x| g.lstm_cell(x[0], Some(x[1])));
    op!("lstm_cell_first", [[3, 8]], |g, x| g.lstm_cell(x[0], None));
    op!("reshape", [[2, 6]], |g, x| g.reshape(x[0], &[3, 4]));
    op!("sum", [[3, 3]], |g, x| Ok(g.sum(x[0])));
    op!("mean", [[3, 3]], |g, x| g.mean(x[0]));
    op!("mse", [[6, 1], [6, 1]], |g, x| g.mse(x[0], x[1]));
    op!("cross_entropy", [[5, 4]], |g, x| g.cross_entropy(x[0], &[0, 3, 1, 1, 2]));
    op!("bce_with_logits", [[5, 1]], |g, x| g.bce_with_logits(x[0], &[1.0, 0.0, 0.0, 1.0, 1.0]));
    op!("apply_masks", [[2, 5, 3], [3]], |g, x| {
        let m = g.scale(x[1], 1.0)?;
        apply_masks(g, x[0], m)
    });
    op!("l1_penalty", [[4], [2]], |g, x| Ok(l1_penalty_node(g, &x, 0.05)?.unwrap()));
    Ok(out)
}

/// Toy-size configuration used for the component checks.
pub fn toy_config(kind: ComponentKind) -> ComponentConfig {
    ComponentConfig {
        kind,
        hidden: if kind == ComponentKind::Transformer { 6 } else { 5 },
        kernel: 3,
        layers: if matches!(kind, ComponentKind::Lstm | ComponentKind::Transformer) { 1 } else { 2 },
        heads: 2,
    }
}

fn component_check(kind: ComponentKind) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::new(vec![2, 16, 2], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let comp = Component::new(&toy_config(kind), 2, &mut store, "c", &mut rng)?;
    let build = |g: &mut Graph, p: &Bindings| comp.forward(g, p, p[x]);
    check(&format!("component/{kind}"), &store, &build)
}

/// Full MultiWave model with masks and baseline on a multirate pair.
fn fusion_check() -> Result<CheckResult> {
    let signals = vec![SignalSpec::new("fast", 16.0, 16), SignalSpec::new("slow", 6.0, 6)];
    let plan = plan_grouping(&signals, 2)?;
    let spec = ModelSpec {
        architecture: Architecture::MultiWave { plan, wavelet: "haar".into(), masks: true, add_baseline: true, init_mask: 0.5 },
        component: toy_config(ComponentKind::Mlp),
        signals,
        task: Task::Regression,
        seed: 3,
    };
    let model = FusionModel::build(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Vec<Tensor>> = (0..2)
        .map(|_| {
            let series = vec![
                (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ];
            model.featurize(&series)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[Tensor]> = samples.iter().map(|s| s.as_slice()).collect();
    let batch = crate::components::stack_batch(&refs)?;
    let target = Tensor::new(vec![2, 1], vec![0.3, -0.8])?;
    let masks = model.mask_params();
    let build = |g: &mut Graph, p: &Bindings| -> Result<Var> {
        let slots: Vec<Var> = batch.iter().map(|t| g.constant(t.clone())).collect();
        let y = model.forward(g, p, &slots)?;
        let t = g.constant(target.clone());
        let task = g.mse(y, t)?;
        let mvars: Vec<Var> = masks.iter().map(|m| p[*m]).collect();
        match l1_penalty_node(g, &mvars, 0.05)? {
            Some(pen) => g.add(task, pen),
            None => Ok(task),
        }
    };
    check("model/multiwave-masked", &model.store, &build)
}

/// Every op, every component kind, and one assembled model.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut results = op_checks()?;
    for kind in ComponentKind::ALL {
        results.push(component_check(kind)?);
    }
    results.push(fusion_check()?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_passes_and_tolerance_is_tight() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![0.4, -1.2]));
        let build = |g: &mut Graph, p: &Bindings| g.tanh(p[x]);
        assert!(check("tanh", &store, &build).unwrap().passed());
        assert!(relative_error(1.0, 1.001) > TOLERANCE);
    }

    #[test]
    fn suite_passes() {
        for r in run_suite().unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn relu_kinks_are_skipped() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![0.0, 0.5]));
        let build = |g: &mut Graph, p: &Bindings| g.relu(p.var(crate::tensor::ParamId(0)));
        let r = check("relu", &store, &build).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
    }
}
