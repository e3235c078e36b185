//! Architectures and the per-timestep computation for the conventional,
//! deep-transition, deep-output and stacked recurrent networks.
//!
//! Every affine map carries a bias. Parameter names are shared between an
//! architecture and the one it is warm-started from, so pretrained tensors
//! can be copied across by name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, softmax_in_place, softplus, sigmoid, Matrix, Nonlinearity, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Conventional RNN: one affine map plus nonlinearity per transition.
    Rnn,
    /// Deep transition: one intermediate layer between consecutive states.
    Dt,
    /// Deep transition with shortcut paths from `h_{t-1}` and `x_t`.
    Dts,
    /// Deep transition plus deep output.
    Dot,
    Dots,
    /// Stacked RNN; the output reads the top level only.
    Srnn,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Rnn,
        Architecture::Dt,
        Architecture::Dts,
        Architecture::Dot,
        Architecture::Dots,
        Architecture::Srnn,
    ];

    pub fn has_deep_transition(self) -> bool {
        matches!(
            self,
            Architecture::Dt | Architecture::Dts | Architecture::Dot | Architecture::Dots
        )
    }

    pub fn has_shortcuts(self) -> bool {
        matches!(self, Architecture::Dts | Architecture::Dots)
    }

    pub fn has_deep_output(self) -> bool {
        matches!(self, Architecture::Dot | Architecture::Dots)
    }

    /// The shallower model this one is pretrained from, if any.
    pub fn warm_start_parent(self) -> Option<Architecture> {
        match self {
            Architecture::Srnn => Some(Architecture::Rnn),
            Architecture::Dots => Some(Architecture::Dts),
            Architecture::Dot => Some(Architecture::Dt),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Rnn => "rnn",
            Architecture::Dt => "dt",
            Architecture::Dts => "dts",
            Architecture::Dot => "dot",
            Architecture::Dots => "dots",
            Architecture::Srnn => "srnn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    /// Categorical distribution over symbols.
    Softmax,
    /// Independent Bernoulli per output dimension (piano-roll frames).
    Bernoulli,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Softmax => "softmax",
            OutputHead::Bernoulli => "bernoulli",
        }
    }
}

impl FromStr for OutputHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(OutputHead::Softmax),
            "bernoulli" | "sigmoid" => Ok(OutputHead::Bernoulli),
            _ => Err(Error::config(format!("unknown output head `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    /// Width of the intermediate layer of the deep transition (0 if unused).
    pub transition_inter_dim: usize,
    /// Width of the intermediate layer of the deep output (0 if unused).
    pub output_inter_dim: usize,
    /// Recurrent levels; only meaningful for `srnn`.
    pub levels: usize,
    pub hidden_nl: Nonlinearity,
    pub transition_inter_nl: Nonlinearity,
    pub output_inter_nl: Nonlinearity,
    pub output_head: OutputHead,
}

impl ModelConfig {
    /// A config with sigmoid units everywhere and unused sizes zeroed.
    pub fn new(architecture: Architecture, input_dim: usize, output_dim: usize, hidden_dim: usize) -> Self {
        ModelConfig {
            architecture,
            input_dim,
            output_dim,
            hidden_dim,
            transition_inter_dim: 0,
            output_inter_dim: 0,
            levels: if architecture == Architecture::Srnn { 2 } else { 1 },
            hidden_nl: Nonlinearity::Sigmoid,
            transition_inter_nl: Nonlinearity::Sigmoid,
            output_inter_nl: Nonlinearity::Sigmoid,
            output_head: OutputHead::Softmax,
        }
    }

    pub fn with_transition_inter(mut self, dim: usize) -> Self {
        self.transition_inter_dim = dim;
        self
    }

    pub fn with_output_inter(mut self, dim: usize) -> Self {
        self.output_inter_dim = dim;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.output_head = head;
        self
    }

    pub fn with_hidden_nl(mut self, nl: Nonlinearity) -> Self {
        self.hidden_nl = nl;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture;
        let bad = |msg: &str| Err(Error::config(format!("{arch}: {msg}")));
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return bad("input, output and hidden sizes must be positive");
        }
        if arch.has_deep_transition() != (self.transition_inter_dim > 0) {
            return bad(if arch.has_deep_transition() {
                "transition_inter_dim must be > 0"
            } else {
                "transition_inter_dim must be 0"
            });
        }
        if arch.has_deep_output() != (self.output_inter_dim > 0) {
            return bad(if arch.has_deep_output() {
                "output_inter_dim must be > 0"
            } else {
                "output_inter_dim must be 0"
            });
        }
        match arch {
            Architecture::Srnn if self.levels < 2 => bad("a stacked network needs at least 2 levels"),
            Architecture::Srnn => Ok(()),
            _ if self.levels != 1 => bad("levels must be 1 for non-stacked architectures"),
            _ => Ok(()),
        }
    }

    pub fn state_levels(&self) -> usize {
        if self.architecture == Architecture::Srnn {
            self.levels
        } else {
            1
        }
    }
}

/// What a parameter connects; drives initialization and warm starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Reads the input frame `x_t` (including the `S_x` shortcut).
    InputToHidden,
    /// Connects two hidden-typed activations (recurrent, intermediate
    /// transition layers, `S_h`, inter-level maps).
    HiddenToHidden,
    /// Hidden state straight to the output logits.
    HiddenToOutput,
    /// Hidden state to the deep-output intermediate layer.
    HiddenToOutputInter,
    /// Deep-output intermediate layer to the logits.
    OutputInterToOutput,
    /// Bias of a layer; `nl` is that layer's nonlinearity (`None` for the
    /// output logits).
    Bias {
        nl: Option<Nonlinearity>,
        transition: bool,
    },
}

impl Role {
    pub fn is_transition(self) -> bool {
        match self {
            Role::InputToHidden | Role::HiddenToHidden => true,
            Role::Bias { transition, .. } => transition,
            _ => false,
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Role::Bias { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Biases are stored as `1 x n` matrices.
    pub value: Matrix,
    pub lr_multiplier: f64,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix, role: Role) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param {
            name,
            value,
            lr_multiplier: 1.0,
            role,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a Param;
    type IntoIter = std::slice::Iter<'a, Param>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// Allocates every tensor the architecture needs, zero-filled, and returns
/// the exact scalar parameter count.
pub fn build(config: &ModelConfig) -> Result<(ParamSet, usize)> {
    config.validate()?;
    let c = config;
    let mut ps = ParamSet::default();
    let hidden_bias = Role::Bias {
        nl: Some(c.hidden_nl),
        transition: true,
    };
    if c.architecture.has_deep_transition() {
        let t = c.transition_inter_dim;
        ps.push("U", Matrix::zeros(c.input_dim, t), Role::InputToHidden)?;
        ps.push("W_1", Matrix::zeros(c.hidden_dim, t), Role::HiddenToHidden)?;
        ps.push(
            "b_1",
            Matrix::zeros(1, t),
            Role::Bias {
                nl: Some(c.transition_inter_nl),
                transition: true,
            },
        )?;
        ps.push("W_2", Matrix::zeros(t, c.hidden_dim), Role::HiddenToHidden)?;
        ps.push("b_h", Matrix::zeros(1, c.hidden_dim), hidden_bias)?;
        if c.architecture.has_shortcuts() {
            ps.push("S_h", Matrix::zeros(c.hidden_dim, c.hidden_dim), Role::HiddenToHidden)?;
            ps.push("S_x", Matrix::zeros(c.input_dim, c.hidden_dim), Role::InputToHidden)?;
        }
    } else {
        for level in 1..=c.state_levels() {
            let (u, w, b) = level_names(level);
            let (fan_in, role) = if level == 1 {
                (c.input_dim, Role::InputToHidden)
            } else {
                (c.hidden_dim, Role::HiddenToHidden)
            };
            ps.push(u, Matrix::zeros(fan_in, c.hidden_dim), role)?;
            ps.push(w, Matrix::zeros(c.hidden_dim, c.hidden_dim), Role::HiddenToHidden)?;
            ps.push(b, Matrix::zeros(1, c.hidden_dim), hidden_bias)?;
        }
    }
    let output_bias = Role::Bias {
        nl: None,
        transition: false,
    };
    if c.architecture.has_deep_output() {
        let o = c.output_inter_dim;
        ps.push("V_1", Matrix::zeros(c.hidden_dim, o), Role::HiddenToOutputInter)?;
        ps.push(
            "b_o",
            Matrix::zeros(1, o),
            Role::Bias {
                nl: Some(c.output_inter_nl),
                transition: false,
            },
        )?;
        ps.push("V_2", Matrix::zeros(o, c.output_dim), Role::OutputInterToOutput)?;
    } else {
        ps.push("V", Matrix::zeros(c.hidden_dim, c.output_dim), Role::HiddenToOutput)?;
    }
    ps.push("b_y", Matrix::zeros(1, c.output_dim), output_bias)?;
    let count = ps.scalar_count();
    Ok((ps, count))
}

fn level_names(level: usize) -> (String, String, String) {
    if level == 1 {
        ("U".into(), "W".into(), "b_h".into())
    } else {
        (format!("U_{level}"), format!("W_{level}"), format!("b_h_{level}"))
    }
}

/// One timestep of input or target.
#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    /// One-hot symbol index.
    Symbol(usize),
    /// Multi-hot vector given by its active indices (piano-roll frame).
    MultiHot(Vec<usize>),
    Dense(Vector),
}

impl Frame {
    fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            Frame::Symbol(s) => *s < dim,
            Frame::MultiHot(idx) => idx.iter().all(|&i| i < dim),
            Frame::Dense(v) => v.len() == dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("frame does not fit dimension {dim}: {self:?}")))
        }
    }

    /// `acc += Uᵀx`.
    #[inline]
    fn tmul_acc(&self, u: &Matrix, acc: &mut [f64]) {
        match self {
            Frame::Symbol(s) => axpy(1.0, u.row(*s), acc),
            Frame::MultiHot(idx) => {
                for &i in idx {
                    axpy(1.0, u.row(i), acc);
                }
            }
            Frame::Dense(x) => u.tmul_acc(x, acc),
        }
    }

    /// `grad += x ⊗ delta`.
    #[inline]
    fn add_outer(&self, grad: &mut Matrix, delta: &[f64]) {
        match self {
            Frame::Symbol(s) => axpy(1.0, delta, grad.row_mut(*s)),
            Frame::MultiHot(idx) => {
                for &i in idx {
                    axpy(1.0, delta, grad.row_mut(i));
                }
            }
            Frame::Dense(x) => grad.add_outer(x, delta),
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vector {
        match self {
            Frame::Symbol(s) => {
                let mut v = vec![0.0; dim];
                v[*s] = 1.0;
                v
            }
            Frame::MultiHot(idx) => {
                let mut v = vec![0.0; dim];
                idx.iter().for_each(|&i| v[i] = 1.0);
                v
            }
            Frame::Dense(v) => v.clone(),
        }
    }
}

/// Per-level hidden activations carried between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub levels: Vec<Vector>,
}

impl HiddenState {
    pub fn zeros(config: &ModelConfig) -> Self {
        HiddenState {
            levels: vec![vec![0.0; config.hidden_dim]; config.state_levels()],
        }
    }

    pub fn top(&self) -> &[f64] {
        self.levels.last().expect("hidden state has at least one level")
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.levels.len() != config.state_levels()
            || self.levels.iter().any(|h| h.len() != config.hidden_dim)
        {
            return Err(Error::config(format!(
                "hidden state has {} level(s) of sizes {:?}; model expects {} x {}",
                self.levels.len(),
                self.levels.iter().map(Vec::len).collect::<Vec<_>>(),
                config.state_levels(),
                config.hidden_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub distribution: Vector,
    pub new_state: HiddenState,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub distributions: Vec<Vector>,
    pub final_state: HiddenState,
    /// Loss of each prediction step, in order.
    pub step_nll: Vec<f64>,
    pub total_nll: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LevelIdx {
    pub(crate) u: usize,
    pub(crate) w: usize,
    pub(crate) b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeepIdx {
    pub(crate) u: usize,
    pub(crate) w1: usize,
    pub(crate) b1: usize,
    pub(crate) w2: usize,
    pub(crate) bh: usize,
    pub(crate) shortcut: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub(crate) enum TransitionIdx {
    Stacked(Vec<LevelIdx>),
    Deep(DeepIdx),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum OutputIdx {
    Shallow { v: usize, by: usize },
    Deep { v1: usize, bo: usize, v2: usize, by: usize },
}

/// Activations of one timestep, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub(crate) struct StepTrace {
    /// New hidden state, one vector per level.
    pub levels: Vec<Vector>,
    /// Deep-transition intermediate activation.
    pub inter: Vector,
    /// Deep-output intermediate activation.
    pub out_inter: Vector,
    /// Softmax probabilities or Bernoulli means.
    pub probs: Vector,
}

/// A parameter set bound to its config with tensor positions resolved.
pub struct Network<'a> {
    config: &'a ModelConfig,
    params: &'a ParamSet,
    transition: TransitionIdx,
    output: OutputIdx,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamSet) -> Result<Self> {
        config.validate()?;
        let (skeleton, _) = build(config)?;
        for p in skeleton.iter() {
            let have = params
                .get(&p.name)
                .ok_or_else(|| Error::config(format!("missing parameter `{}`", p.name)))?;
            if have.value.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    have.value.shape(),
                    p.value.shape()
                )));
            }
        }
        let idx = |n: &str| params.index_of(n).expect("checked against skeleton");
        let transition = if config.architecture.has_deep_transition() {
            TransitionIdx::Deep(DeepIdx {
                u: idx("U"),
                w1: idx("W_1"),
                b1: idx("b_1"),
                w2: idx("W_2"),
                bh: idx("b_h"),
                shortcut: config
                    .architecture
                    .has_shortcuts()
                    .then(|| (idx("S_h"), idx("S_x"))),
            })
        } else {
            TransitionIdx::Stacked(
                (1..=config.state_levels())
                    .map(|l| {
                        let (u, w, b) = level_names(l);
                        LevelIdx {
                            u: idx(&u),
                            w: idx(&w),
                            b: idx(&b),
                        }
                    })
                    .collect(),
            )
        };
        let output = if config.architecture.has_deep_output() {
            OutputIdx::Deep {
                v1: idx("V_1"),
                bo: idx("b_o"),
                v2: idx("V_2"),
                by: idx("b_y"),
            }
        } else {
            OutputIdx::Shallow {
                v: idx("V"),
                by: idx("b_y"),
            }
        };
        Ok(Network {
            config,
            params,
            transition,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    #[inline]
    fn m(&self, i: usize) -> &Matrix {
        &self.params.by_index(i).value
    }

    #[inline]
    fn bias(&self, i: usize) -> &[f64] {
        self.params.by_index(i).value.as_slice()
    }

    /// Writes the new hidden state (and intermediate activations) into
    /// `trace`.
    pub(crate) fn transition_into(&self, x: &Frame, h_prev: &[Vector], trace: &mut StepTrace) {
        let c = self.config;
        trace.levels.resize(h_prev.len(), Vec::new());
        match &self.transition {
            TransitionIdx::Stacked(levels) => {
                for (l, li) in levels.iter().enumerate() {
                    let mut pre = self.bias(li.b).to_vec();
                    self.m(li.w).tmul_acc(&h_prev[l], &mut pre);
                    if l == 0 {
                        x.tmul_acc(self.m(li.u), &mut pre);
                    } else {
                        self.m(li.u).tmul_acc(&trace.levels[l - 1], &mut pre);
                    }
                    c.hidden_nl.apply_in_place(&mut pre);
                    trace.levels[l] = pre;
                }
            }
            TransitionIdx::Deep(d) => {
                let h = &h_prev[0];
                let mut inter = self.bias(d.b1).to_vec();
                self.m(d.w1).tmul_acc(h, &mut inter);
                x.tmul_acc(self.m(d.u), &mut inter);
                c.transition_inter_nl.apply_in_place(&mut inter);
                let mut pre = self.bias(d.bh).to_vec();
                self.m(d.w2).tmul_acc(&inter, &mut pre);
                if let Some((sh, sx)) = d.shortcut {
                    self.m(sh).tmul_acc(h, &mut pre);
                    x.tmul_acc(self.m(sx), &mut pre);
                }
                c.hidden_nl.apply_in_place(&mut pre);
                trace.inter = inter;
                trace.levels[0] = pre;
            }
        }
    }

    /// Output logits from the top-level state; fills `out_inter` for deep
    /// outputs.
    pub(crate) fn logits_into(&self, h_top: &[f64], out_inter: &mut Vector) -> Vector {
        match self.output {
            OutputIdx::Shallow { v, by } => {
                let mut z = self.bias(by).to_vec();
                self.m(v).tmul_acc(h_top, &mut z);
                z
            }
            OutputIdx::Deep { v1, bo, v2, by } => {
                let mut o = self.bias(bo).to_vec();
                self.m(v1).tmul_acc(h_top, &mut o);
                self.config.output_inter_nl.apply_in_place(&mut o);
                let mut z = self.bias(by).to_vec();
                self.m(v2).tmul_acc(&o, &mut z);
                *out_inter = o;
                z
            }
        }
    }

    /// Turns logits into the head distribution (stored in `trace.probs`) and
    /// returns the loss against `target`.
    pub(crate) fn head_loss(&self, mut z: Vector, target: &Frame, trace: &mut StepTrace) -> f64 {
        match self.config.output_head {
            OutputHead::Softmax => {
                let z_target = match target {
                    Frame::Symbol(s) => Some(z[*s]),
                    _ => None,
                };
                let lse = softmax_in_place(&mut z);
                let loss = match (target, z_target) {
                    (_, Some(zt)) => lse - zt,
                    (Frame::Dense(t), None) => t
                        .iter()
                        .zip(&z)
                        .filter(|(ti, _)| **ti != 0.0)
                        .map(|(ti, p)| -ti * p.ln())
                        .sum(),
                    (Frame::MultiHot(idx), None) => idx.iter().map(|&i| -z[i].ln()).sum(),
                    (Frame::Symbol(_), None) => unreachable!(),
                };
                trace.probs = z;
                loss
            }
            OutputHead::Bernoulli => {
                let mut loss = 0.0;
                match target {
                    Frame::Dense(t) => {
                        for (zk, tk) in z.iter().zip(t) {
                            loss += softplus(*zk) - tk * zk;
                        }
                    }
                    _ => {
                        for zk in &z {
                            loss += softplus(*zk);
                        }
                        match target {
                            Frame::Symbol(s) => loss -= z[*s],
                            Frame::MultiHot(idx) => idx.iter().for_each(|&i| loss -= z[i]),
                            Frame::Dense(_) => unreachable!(),
                        }
                    }
                }
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
                trace.probs = z;
                loss
            }
        }
    }

    pub(crate) fn check_input(&self, x: &Frame) -> Result<()> {
        x.check_dim(self.config.input_dim)
    }

    pub(crate) fn check_target(&self, y: &Frame) -> Result<()> {
        y.check_dim(self.config.output_dim)
    }

    pub fn step_transition(&self, x: &Frame, h_prev: &HiddenState) -> Result<HiddenState> {
        h_prev.check(self.config)?;
        self.check_input(x)?;
        let mut trace = StepTrace::default();
        self.transition_into(x, &h_prev.levels, &mut trace);
        Ok(HiddenState {
            levels: trace.levels,
        })
    }

    pub fn step_output(&self, h: &HiddenState) -> Result<Vector> {
        h.check(self.config)?;
        let mut trace = StepTrace::default();
        let mut z = self.logits_into(h.top(), &mut trace.out_inter);
        match self.config.output_head {
            OutputHead::Softmax => {
                softmax_in_place(&mut z);
            }
            OutputHead::Bernoulli => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        Ok(z)
    }

    /// Runs the network over `inputs`, scoring each step against the
    /// matching entry of `targets`.
    pub fn forward(&self, inputs: &[Frame], targets: &[Frame], h0: &HiddenState) -> Result<ForwardOutput> {
        let mut distributions = Vec::with_capacity(inputs.len());
        let mut step_nll = Vec::with_capacity(inputs.len());
        let final_state = self.run(inputs, targets, h0, |_, nll, probs| {
            step_nll.push(nll);
            distributions.push(probs.to_vec());
        })?;
        let total_nll = step_nll.iter().fold(0.0, |acc, v| acc + v);
        Ok(ForwardOutput {
            distributions,
            final_state,
            step_nll,
            total_nll,
        })
    }

    /// Streaming forward pass: calls `on_step(t, nll, distribution)` for
    /// each step and returns the final state.
    pub fn run<F>(&self, inputs: &[Frame], targets: &[Frame], h0: &HiddenState, mut on_step: F) -> Result<HiddenState>
    where
        F: FnMut(usize, f64, &[f64]),
    {
        h0.check(self.config)?;
        if inputs.len() != targets.len() {
            return Err(Error::config(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let mut state = h0.levels.clone();
        let mut trace = StepTrace::default();
        for (t, (x, y)) in inputs.iter().zip(targets).enumerate() {
            self.check_input(x)?;
            self.check_target(y)?;
            self.transition_into(x, &state, &mut trace);
            std::mem::swap(&mut state, &mut trace.levels);
            let z = self.logits_into(state.last().unwrap(), &mut trace.out_inter);
            let nll = self.head_loss(z, y, &mut trace);
            if !nll.is_finite() {
                return Err(Error::Diverged { timestep: t });
            }
            on_step(t, nll, &trace.probs);
        }
        Ok(HiddenState { levels: state })
    }

    pub(crate) fn params(&self) -> &ParamSet {
        self.params
    }

    pub(crate) fn transition_idx(&self) -> &TransitionIdx {
        &self.transition
    }

    pub(crate) fn output_idx(&self) -> OutputIdx {
        self.output
    }
}

pub(crate) fn frame_add_outer(x: &Frame, grad: &mut Matrix, delta: &[f64]) {
    x.add_outer(grad, delta);
}

pub fn step_transition(params: &ParamSet, config: &ModelConfig, x: &Frame, h_prev: &HiddenState) -> Result<HiddenState> {
    Network::new(config, params)?.step_transition(x, h_prev)
}

pub fn step_output(params: &ParamSet, config: &ModelConfig, h: &HiddenState) -> Result<Vector> {
    Network::new(config, params)?.step_output(h)
}

/// Operator-framework alias of [`step_transition`]: `x ⊕ h`.
pub fn plus_op(params: &ParamSet, config: &ModelConfig, x: &Frame, h: &HiddenState) -> Result<HiddenState> {
    step_transition(params, config, x, h)
}

/// Operator-framework alias of [`step_output`]: `▷ h`.
pub fn predict_op(params: &ParamSet, config: &ModelConfig, h: &HiddenState) -> Result<Vector> {
    step_output(params, config, h)
}

pub fn forward(
    params: &ParamSet,
    config: &ModelConfig,
    inputs: &[Frame],
    targets: &[Frame],
    h0: &HiddenState,
) -> Result<ForwardOutput> {
    Network::new(config, params)?.forward(inputs, targets, h0)
}

/// Next-step prediction over a whole sequence: inputs are `frames[..n-1]`,
/// targets `frames[1..]`.
pub fn forward_sequence(params: &ParamSet, config: &ModelConfig, frames: &[Frame], h0: &HiddenState) -> Result<ForwardOutput> {
    if frames.is_empty() {
        return forward(params, config, &[], &[], h0);
    }
    forward(params, config, &frames[..frames.len() - 1], &frames[1..], h0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{affine, apply, gaussian_matrix, Rng};

    fn music_rnn() -> ModelConfig {
        ModelConfig::new(Architecture::Rnn, 88, 88, 600).with_head(OutputHead::Bernoulli)
    }

    #[test]
    fn nottingham_rnn_count_is_exact() {
        let (ps, count) = build(&music_rnn()).unwrap();
        assert_eq!(count, 88 * 600 + 600 * 600 + 600 * 88 + 600 + 88);
        assert_eq!(count, 466_288);
        assert!(ps.iter().all(|p| p.value.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(Architecture::Srnn, 3, 3, 4).with_levels(1).validate().is_err());
        assert!(ModelConfig::new(Architecture::Dt, 3, 3, 4).validate().is_err());
        assert!(ModelConfig::new(Architecture::Rnn, 3, 3, 4).with_transition_inter(2).validate().is_err());
        assert!(ModelConfig::new(Architecture::Dot, 3, 3, 4).with_transition_inter(2).validate().is_err());
        assert!(ModelConfig::new(Architecture::Dot, 3, 3, 4)
            .with_transition_inter(2)
            .with_output_inter(2)
            .validate()
            .is_ok());
        assert!(build(&ModelConfig::new(Architecture::Srnn, 3, 3, 4).with_levels(1)).is_err());
    }

    #[test]
    fn zero_rnn_state_is_half_for_sigmoid() {
        let cfg = ModelConfig::new(Architecture::Rnn, 3, 3, 4);
        let (ps, _) = build(&cfg).unwrap();
        let h = step_transition(&ps, &cfg, &Frame::Symbol(1), &HiddenState::zeros(&cfg)).unwrap();
        assert_eq!(h.levels, vec![vec![0.5; 4]]);
    }

    #[test]
    fn dts_pure_shortcut_path() {
        let cfg = ModelConfig::new(Architecture::Dts, 3, 3, 4).with_transition_inter(5);
        let (mut ps, _) = build(&cfg).unwrap();
        let mut s = Matrix::identity(4);
        s.scale(0.7);
        ps.get_mut("S_h").unwrap().value = s;
        let h_prev = HiddenState {
            levels: vec![vec![0.1, -0.4, 2.0, 0.0]],
        };
        let h = step_transition(&ps, &cfg, &Frame::Symbol(0), &h_prev).unwrap();
        let want: Vec<f64> = h_prev.levels[0].iter().map(|v| sigmoid(0.7 * v)).collect();
        assert_eq!(h.levels[0], want);
    }

    fn randomize(ps: &mut ParamSet, seed: u64, std: f64) {
        let mut rng = Rng::new(seed);
        for p in ps.iter_mut() {
            let (r, c) = p.value.shape();
            p.value = gaussian_matrix(&mut rng, r, c, std);
        }
    }

    // Standard-orientation copy of a stored (fan_in x fan_out) matrix.
    fn std_form(ps: &ParamSet, name: &str) -> Matrix {
        ps.get(name).unwrap().value.transpose()
    }

    fn vecp(ps: &ParamSet, name: &str) -> Vec<f64> {
        ps.get(name).unwrap().value.as_slice().to_vec()
    }

    #[test]
    fn dt_transition_matches_composed_affine_oracle() {
        let cfg = ModelConfig::new(Architecture::Dt, 3, 3, 4).with_transition_inter(5);
        let (mut ps, _) = build(&cfg).unwrap();
        randomize(&mut ps, 7, 0.8);
        let x = vec![0.3, -1.2, 0.5];
        let h_prev = vec![0.1, 0.9, -0.3, 0.4];
        // inter = φ(W_1ᵀh + Uᵀx + b_1) written as two separate affine maps
        let wh = affine(&std_form(&ps, "W_1"), &h_prev, &vecp(&ps, "b_1")).unwrap();
        let ux = affine(&std_form(&ps, "U"), &x, &[0.0; 5]).unwrap();
        let pre: Vec<f64> = wh.iter().zip(&ux).map(|(a, b)| a + b).collect();
        let inter = apply(Nonlinearity::Sigmoid, &pre);
        let h = apply(
            Nonlinearity::Sigmoid,
            &affine(&std_form(&ps, "W_2"), &inter, &vecp(&ps, "b_h")).unwrap(),
        );
        let got = step_transition(&ps, &cfg, &Frame::Dense(x), &HiddenState { levels: vec![h_prev] }).unwrap();
        for (a, b) in got.levels[0].iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_heads() {
        let cfg = ModelConfig::new(Architecture::Rnn, 4, 4, 3);
        let (ps, _) = build(&cfg).unwrap();
        let y = step_output(&ps, &cfg, &HiddenState::zeros(&cfg)).unwrap();
        assert_eq!(y, vec![0.25; 4]);
        let cfg = cfg.with_head(OutputHead::Bernoulli);
        let y = step_output(&ps, &cfg, &HiddenState::zeros(&cfg)).unwrap();
        assert_eq!(y, vec![0.5; 4]);
    }

    #[test]
    fn dot_output_matches_composed_oracle() {
        let cfg = ModelConfig::new(Architecture::Dot, 3, 4, 5)
            .with_transition_inter(4)
            .with_output_inter(6);
        let (mut ps, _) = build(&cfg).unwrap();
        randomize(&mut ps, 19, 0.6);
        let h = vec![0.2, -0.5, 0.9, 0.1, 0.3];
        let o = apply(
            Nonlinearity::Sigmoid,
            &affine(&std_form(&ps, "V_1"), &h, &vecp(&ps, "b_o")).unwrap(),
        );
        let z = affine(&std_form(&ps, "V_2"), &o, &vecp(&ps, "b_y")).unwrap();
        let want = crate::math::softmax(&z);
        let got = step_output(&ps, &cfg, &HiddenState { levels: vec![h] }).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_losses() {
        let cfg = ModelConfig::new(Architecture::Rnn, 4, 4, 3);
        let (ps, _) = build(&cfg).unwrap();
        let out = forward(&ps, &cfg, &[Frame::Symbol(0)], &[Frame::Symbol(2)], &HiddenState::zeros(&cfg)).unwrap();
        assert!((out.total_nll - 4f64.ln()).abs() < 1e-15);

        let cfg = ModelConfig::new(Architecture::Rnn, 88, 88, 3).with_head(OutputHead::Bernoulli);
        let (ps, _) = build(&cfg).unwrap();
        let frames = vec![Frame::MultiHot(vec![60, 64]), Frame::MultiHot(vec![3]), Frame::MultiHot(vec![])];
        let out = forward_sequence(&ps, &cfg, &frames, &HiddenState::zeros(&cfg)).unwrap();
        assert_eq!(out.step_nll.len(), 2);
        for v in out.step_nll {
            assert!((v - 88.0 * std::f64::consts::LN_2).abs() < 1e-10);
        }
    }

    #[test]
    fn frame_dimension_is_checked() {
        let cfg = ModelConfig::new(Architecture::Rnn, 4, 4, 3);
        let (ps, _) = build(&cfg).unwrap();
        let err = forward(&ps, &cfg, &[Frame::Symbol(4)], &[Frame::Symbol(0)], &HiddenState::zeros(&cfg));
        assert!(matches!(err, Err(Error::Config(_))));
        let bad_state = HiddenState { levels: vec![vec![0.0; 2]] };
        assert!(step_transition(&ps, &cfg, &Frame::Symbol(0), &bad_state).is_err());
    }

    #[test]
    fn nan_is_reported_with_timestep() {
        let cfg = ModelConfig::new(Architecture::Rnn, 2, 2, 2).with_hidden_nl(Nonlinearity::Identity);
        let (mut ps, _) = build(&cfg).unwrap();
        ps.get_mut("b_y").unwrap().value.set(0, 0, f64::NAN);
        let xs = vec![Frame::Symbol(0), Frame::Symbol(1)];
        let err = forward(&ps, &cfg, &xs, &xs, &HiddenState::zeros(&cfg)).unwrap_err();
        assert!(matches!(err, Error::Diverged { timestep: 0 }));
    }

    #[test]
    fn operator_facade_matches_steps() {
        let cfg = ModelConfig::new(Architecture::Dots, 3, 3, 4)
            .with_transition_inter(4)
            .with_output_inter(3);
        let (mut ps, _) = build(&cfg).unwrap();
        randomize(&mut ps, 3, 0.5);
        let mut rng = Rng::new(8);
        let mut h = HiddenState::zeros(&cfg);
        for _ in 0..50 {
            let x = Frame::Dense((0..3).map(|_| rng.normal()).collect());
            let a = plus_op(&ps, &cfg, &x, &h).unwrap();
            let b = step_transition(&ps, &cfg, &x, &h).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.levels[0].len(), h.levels[0].len());
            let y = predict_op(&ps, &cfg, &a).unwrap();
            let full = forward(&ps, &cfg, &[x.clone()], &[Frame::Dense(vec![1.0, 0.0, 0.0])], &h).unwrap();
            assert_eq!(y, full.distributions[0]);
            h = a;
        }
    }
}
