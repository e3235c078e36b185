//! Backpropagation through time, global-norm clipping and the central
//! finite-difference oracle used to check it.

use crate::error::{Error, Result};
use crate::math::{Matrix, Nonlinearity, Vector};
use crate::model::{
    frame_add_outer, Frame, HiddenState, ModelConfig, Network, OutputHead, OutputIdx, ParamSet, StepTrace,
    TransitionIdx,
};
use crate::par::{self, Execution};

/// One gradient buffer per parameter, in `ParamSet` order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    names: Vec<String>,
    grads: Vec<Matrix>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            names: params.iter().map(|p| p.name.clone()).collect(),
            grads: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.grads[i])
    }

    pub fn by_index(&self, i: usize) -> &Matrix {
        &self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    /// L2 norm over all entries of all parameters jointly.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(s));
    }

    /// Element-wise sum, in parameter order.
    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("gradient sets have different parameters"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Debug)]
pub struct Backprop {
    pub grads: GradSet,
    pub total_nll: f64,
    pub step_nll: Vec<f64>,
    pub final_state: HiddenState,
}

/// Gradient of the summed next-step loss over one (sub)sequence.
///
/// The forward pass starts from `h0`, but no gradient flows back into it:
/// consecutive chunks are truncated at their boundary.
pub fn bptt(
    params: &ParamSet,
    config: &ModelConfig,
    inputs: &[Frame],
    targets: &[Frame],
    h0: &HiddenState,
) -> Result<Backprop> {
    let net = Network::new(config, params)?;
    h0.check(config)?;
    if inputs.len() != targets.len() {
        return Err(Error::config(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let mut traces: Vec<StepTrace> = Vec::with_capacity(inputs.len());
    let mut step_nll = Vec::with_capacity(inputs.len());
    // same arithmetic as `Network::run`, keeping every activation
    let mut state = h0.levels.clone();
    for (t, (x, y)) in inputs.iter().zip(targets).enumerate() {
        net.check_input(x)?;
        net.check_target(y)?;
        let mut trace = StepTrace::default();
        net.transition_into(x, &state, &mut trace);
        let z = net.logits_into(trace.levels.last().unwrap(), &mut trace.out_inter);
        let nll = net.head_loss(z, y, &mut trace);
        if !nll.is_finite() {
            return Err(Error::Diverged { timestep: t });
        }
        step_nll.push(nll);
        state.clone_from(&trace.levels);
        traces.push(trace);
    }
    let total_nll = step_nll.iter().fold(0.0, |acc, v| acc + v);
    let mut grads = GradSet::zeros_like(params);
    backward(&net, inputs, targets, h0, &traces, &mut grads);
    Ok(Backprop {
        grads,
        total_nll,
        step_nll,
        final_state: HiddenState { levels: state },
    })
}

fn scale_by_derivative(nl: Nonlinearity, grad: &mut [f64], activation: &[f64]) {
    if nl != Nonlinearity::Identity {
        for (g, &a) in grad.iter_mut().zip(activation) {
            *g *= nl.derivative_from_output(a);
        }
    }
}

fn add_into(dst: &mut Matrix, v: &[f64]) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(v) {
        *d += s;
    }
}

fn logit_gradient(head: OutputHead, probs: &[f64], target: &Frame) -> Vector {
    let mut dz = probs.to_vec();
    match (head, target) {
        (OutputHead::Softmax, Frame::Symbol(s)) => dz[*s] -= 1.0,
        (OutputHead::Softmax, Frame::MultiHot(idx)) => {
            let k = idx.len() as f64;
            dz.iter_mut().for_each(|v| *v *= k);
            idx.iter().for_each(|&i| dz[i] -= 1.0);
        }
        (OutputHead::Softmax, Frame::Dense(t)) => {
            let mass: f64 = t.iter().sum();
            for (d, ti) in dz.iter_mut().zip(t) {
                *d = *d * mass - ti;
            }
        }
        (OutputHead::Bernoulli, Frame::Symbol(s)) => dz[*s] -= 1.0,
        (OutputHead::Bernoulli, Frame::MultiHot(idx)) => idx.iter().for_each(|&i| dz[i] -= 1.0),
        (OutputHead::Bernoulli, Frame::Dense(t)) => {
            for (d, ti) in dz.iter_mut().zip(t) {
                *d -= ti;
            }
        }
    }
    dz
}

fn backward(
    net: &Network<'_>,
    inputs: &[Frame],
    targets: &[Frame],
    h0: &HiddenState,
    traces: &[StepTrace],
    g: &mut GradSet,
) {
    let cfg = net.config();
    let params = net.params();
    let m = |i: usize| &params.by_index(i).value;
    let hidden = cfg.hidden_dim;
    let n_levels = cfg.state_levels();
    let mut dh_next: Vec<Vector> = vec![vec![0.0; hidden]; n_levels];

    for t in (0..traces.len()).rev() {
        let tr = &traces[t];
        let h_prev: &[Vector] = if t == 0 { &h0.levels } else { &traces[t - 1].levels };
        let x = &inputs[t];
        let h_top = tr.levels.last().unwrap();

        let dz = logit_gradient(cfg.output_head, &tr.probs, &targets[t]);
        let mut dh_top = vec![0.0; hidden];
        match net.output_idx() {
            OutputIdx::Shallow { v, by } => {
                add_into(&mut g.grads[by], &dz);
                g.grads[v].add_outer(h_top, &dz);
                m(v).mul_acc(&dz, &mut dh_top);
            }
            OutputIdx::Deep { v1, bo, v2, by } => {
                add_into(&mut g.grads[by], &dz);
                g.grads[v2].add_outer(&tr.out_inter, &dz);
                let mut d_o = vec![0.0; cfg.output_inter_dim];
                m(v2).mul_acc(&dz, &mut d_o);
                scale_by_derivative(cfg.output_inter_nl, &mut d_o, &tr.out_inter);
                add_into(&mut g.grads[bo], &d_o);
                g.grads[v1].add_outer(h_top, &d_o);
                m(v1).mul_acc(&d_o, &mut dh_top);
            }
        }

        match net.transition_idx() {
            TransitionIdx::Stacked(levels) => {
                let mut dh = std::mem::replace(&mut dh_next, vec![vec![0.0; hidden]; n_levels]);
                for (a, b) in dh[n_levels - 1].iter_mut().zip(&dh_top) {
                    *a += b;
                }
                for l in (0..n_levels).rev() {
                    let li = levels[l];
                    let mut dpre = std::mem::take(&mut dh[l]);
                    scale_by_derivative(cfg.hidden_nl, &mut dpre, &tr.levels[l]);
                    add_into(&mut g.grads[li.b], &dpre);
                    g.grads[li.w].add_outer(&h_prev[l], &dpre);
                    if l == 0 {
                        frame_add_outer(x, &mut g.grads[li.u], &dpre);
                    } else {
                        g.grads[li.u].add_outer(&tr.levels[l - 1], &dpre);
                        m(li.u).mul_acc(&dpre, &mut dh[l - 1]);
                    }
                    m(li.w).mul_acc(&dpre, &mut dh_next[l]);
                }
            }
            TransitionIdx::Deep(d) => {
                let mut dpre = std::mem::replace(&mut dh_next[0], vec![0.0; hidden]);
                for (a, b) in dpre.iter_mut().zip(&dh_top) {
                    *a += b;
                }
                scale_by_derivative(cfg.hidden_nl, &mut dpre, &tr.levels[0]);
                add_into(&mut g.grads[d.bh], &dpre);
                g.grads[d.w2].add_outer(&tr.inter, &dpre);
                let next = &mut dh_next[0];
                if let Some((sh, sx)) = d.shortcut {
                    g.grads[sh].add_outer(&h_prev[0], &dpre);
                    frame_add_outer(x, &mut g.grads[sx], &dpre);
                    m(sh).mul_acc(&dpre, next);
                }
                let mut d_inter = vec![0.0; cfg.transition_inter_dim];
                m(d.w2).mul_acc(&dpre, &mut d_inter);
                scale_by_derivative(cfg.transition_inter_nl, &mut d_inter, &tr.inter);
                add_into(&mut g.grads[d.b1], &d_inter);
                g.grads[d.w1].add_outer(&h_prev[0], &d_inter);
                frame_add_outer(x, &mut g.grads[d.u], &d_inter);
                m(d.w1).mul_acc(&d_inter, next);
            }
        }
    }
}

/// Rescales `g` so its global norm is at most `threshold`.
///
/// A norm within one part in 10¹² of the threshold counts as already
/// clipped, which makes clipping idempotent under rounding.
pub fn clip_gradients_in_place(g: &mut GradSet, threshold: f64) -> f64 {
    let n = g.global_norm();
    if n > threshold * (1.0 + 1e-12) {
        g.scale(threshold / n);
    }
    n
}

pub fn clip_gradients(g: &GradSet, threshold: f64) -> GradSet {
    let mut out = g.clone();
    clip_gradients_in_place(&mut out, threshold);
    out
}

/// Summed loss of a sequence, the objective seen by the finite-difference
/// oracle.
pub fn objective(params: &ParamSet, config: &ModelConfig, inputs: &[Frame], targets: &[Frame], h0: &HiddenState) -> Result<f64> {
    let net = Network::new(config, params)?;
    let mut total = 0.0;
    net.run(inputs, targets, h0, |_, nll, _| total += nll)?;
    Ok(total)
}

/// Central differences `(J(θ+εeᵢ) − J(θ−εeᵢ)) / 2ε` for every scalar
/// parameter.
pub fn finite_difference_grad(
    params: &ParamSet,
    config: &ModelConfig,
    inputs: &[Frame],
    targets: &[Frame],
    h0: &HiddenState,
    eps: f64,
) -> Result<GradSet> {
    finite_difference_grad_with(params, config, inputs, targets, h0, eps, Execution::default())
}

pub fn finite_difference_grad_with(
    params: &ParamSet,
    config: &ModelConfig,
    inputs: &[Frame],
    targets: &[Frame],
    h0: &HiddenState,
    eps: f64,
    exec: Execution,
) -> Result<GradSet> {
    if eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    // surfaces config errors once instead of per coordinate
    objective(params, config, inputs, targets, h0)?;
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |k| (i, k)))
        .collect();
    let values = par::map_with(
        exec,
        &coords,
        || params.clone(),
        |work, &(i, k)| -> Result<f64> {
            let orig = params.by_index(i).value.as_slice()[k];
            work.by_index_mut(i).value.as_mut_slice()[k] = orig + eps;
            let plus = objective(work, config, inputs, targets, h0);
            work.by_index_mut(i).value.as_mut_slice()[k] = orig - eps;
            let minus = objective(work, config, inputs, targets, h0);
            work.by_index_mut(i).value.as_mut_slice()[k] = orig;
            Ok((plus? - minus?) / (2.0 * eps))
        },
    );
    let mut out = GradSet::zeros_like(params);
    for (&(i, k), v) in coords.iter().zip(values) {
        out.grads[i].as_mut_slice()[k] = v?;
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, 1e−8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

pub fn compare(analytic: &GradSet, numeric: &GradSet) -> Result<GradCheckReport> {
    if analytic.names != numeric.names {
        return Err(Error::config("gradient sets have different parameters"));
    }
    let params = analytic
        .iter()
        .zip(numeric.grads.iter())
        .map(|((name, a), n)| {
            let (worst_index, max_rel_error) = a
                .as_slice()
                .iter()
                .zip(n.as_slice())
                .map(|(x, y)| relative_error(*x, *y))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            ParamCheck {
                name: name.to_string(),
                max_rel_error,
                worst_index,
            }
        })
        .collect();
    Ok(GradCheckReport { params })
}
