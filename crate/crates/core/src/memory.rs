//! The sparse hierarchical memory layer.
//!
//! A layer holds `N` parent cells (rows of a matrix `P`) and, for each
//! parent `i`, `c` child cells split into keys `K_i` and values `V_i`. For a
//! single position vector `x`:
//!
//! 1. parents are scored by `P·x`, turned into probabilities with a softmax,
//!    and the `K` most probable parents are selected;
//! 2. each selected parent attends over its own children:
//!    `v_i = V_iᵀ softmax(K_i·x)`;
//! 3. the child representations are mixed with the selected parents'
//!    probabilities renormalized to sum to one, and the mixture is added
//!    back to `x`.
//!
//! Neither softmax applies a temperature or `1/√d` scaling, no bias terms
//! accompany the inner products, and no normalization layer follows the
//! residual add.
//!
//! Renormalizing `p[i] / Σ_{j∈S} p[j]` cancels the global softmax
//! denominator, so the mixing weights are computed directly as a softmax
//! over the selected logits. Two consequences follow: the weights cannot
//! underflow to a zero total, and the output (and hence every gradient) is
//! independent of unselected parents. Gradients for parent rows and child
//! matrices outside the selection are exactly zero.
//!
//! Parent selection is treated as a piecewise-constant function of the
//! input during differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward, softmax_in_place, topk_indices, Matrix, Rng, Vector};
use crate::tensors::{join, ParamSet};

/// Shape of one memory layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpartanConfig {
    /// Hidden dimensionality, shared with the host encoder.
    pub d: usize,
    pub num_parents: usize,
    pub children_per_parent: usize,
    /// Number of parents consulted per position.
    pub top_k: usize,
}

impl SpartanConfig {
    pub const DEFAULT_PARENTS: usize = 16;
    pub const DEFAULT_CHILDREN: usize = 3;
    pub const DEFAULT_TOP_K: usize = 8;

    /// Default memory shape (16 parents, 3 children each, top-8) at
    /// dimensionality `d`.
    pub fn with_dim(d: usize) -> Self {
        SpartanConfig {
            d,
            num_parents: Self::DEFAULT_PARENTS,
            children_per_parent: Self::DEFAULT_CHILDREN,
            top_k: Self::DEFAULT_TOP_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("memory dimensionality d must be >= 1".into()));
        }
        if self.children_per_parent == 0 {
            return Err(Error::Config("children_per_parent must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_parents {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= top_k <= num_parents ({}), got {}",
                self.num_parents, self.top_k
            )));
        }
        Ok(())
    }

    /// Scalars held by one layer: `(N + 2·N·c)·d`.
    pub fn num_params(&self) -> usize {
        (self.num_parents + 2 * self.num_parents * self.children_per_parent) * self.d
    }

    /// Matrix-vector multiply-accumulates per position: parent scoring over
    /// all `N` parents plus key and value products for the `K` selected.
    pub fn macs_per_position(&self) -> u64 {
        (self.num_parents * self.d + 2 * self.top_k * self.children_per_parent * self.d) as u64
    }
}

/// Trainable state of one memory layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpartanLayerParams {
    config: SpartanConfig,
    /// `N × d`, one row per parent cell.
    pub parents: Matrix,
    /// `N` matrices of shape `c × d`.
    pub child_keys: Vec<Matrix>,
    /// `N` matrices of shape `c × d`.
    pub child_values: Vec<Matrix>,
}

/// Cached activations of one position, consumed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vector,
    /// Raw parent scores `P·x`.
    pub parent_logits: Vector,
    /// Softmax over all parents.
    pub parent_probs: Vector,
    /// Selected parent indices, ascending.
    pub selected: Vec<usize>,
    /// Child attention of each selected parent, aligned with `selected`.
    pub child_attn: Vec<Vector>,
    /// `v_i` of each selected parent, aligned with `selected`.
    pub child_outputs: Vec<Vector>,
    /// Renormalized parent weights, aligned with `selected`.
    pub agg_weights: Vector,
    pub output: Vector,
}

impl ForwardTrace {
    /// Recomputes `input + Σ agg_weights[s]·child_outputs[s]`.
    pub fn replay_output(&self) -> Vector {
        let mut out = self.input.clone();
        for (w, v) in self.agg_weights.iter().zip(&self.child_outputs) {
            axpy(*w, v, &mut out);
        }
        out
    }
}

/// Gradients of a scalar loss with respect to a layer's parameters and its
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct SpartanGradients {
    pub params: SpartanLayerParams,
    pub d_input: Vector,
}

impl SpartanLayerParams {
    /// All-zero parameters.
    pub fn zeros(config: SpartanConfig) -> Result<Self> {
        config.validate()?;
        let (n, c, d) = (config.num_parents, config.children_per_parent, config.d);
        Ok(SpartanLayerParams {
            config,
            parents: Matrix::zeros(n, d),
            child_keys: (0..n).map(|_| Matrix::zeros(c, d)).collect(),
            child_values: (0..n).map(|_| Matrix::zeros(c, d)).collect(),
        })
    }

    /// Parents and keys drawn from `N(0, 1/d)`; values zero, which makes the
    /// fresh layer an exact identity map.
    pub fn init(config: SpartanConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let std = 1.0 / (config.d as f64).sqrt();
        p.parents = Matrix::gaussian(config.num_parents, config.d, std, rng);
        for k in &mut p.child_keys {
            *k = Matrix::gaussian(config.children_per_parent, config.d, std, rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &SpartanConfig {
        &self.config
    }

    /// Same parameters with a different sparsity level.
    pub fn with_top_k(&self, top_k: usize) -> Result<Self> {
        let config = SpartanConfig { top_k, ..self.config };
        config.validate()?;
        Ok(SpartanLayerParams {
            config,
            ..self.clone()
        })
    }

    fn check_input(&self, op: &'static str, x: &[f64]) -> Result<()> {
        if x.len() != self.config.d {
            return Err(Error::shape(op, self.config.d, x.len()));
        }
        Ok(())
    }

    /// Parent probabilities and the top-`K` selection for input `x`.
    pub fn choose_parents(&self, x: &[f64]) -> Result<(Vector, Vec<usize>)> {
        self.check_input("choose_parents", x)?;
        let mut probs = self.parents.matvec(x)?;
        softmax_in_place(&mut probs);
        let selected = topk_indices(&probs, self.config.top_k)?;
        Ok((probs, selected))
    }

    /// Child representation `v_i` of parent `i` and its child attention.
    pub fn child_representation(&self, i: usize, x: &[f64]) -> Result<(Vector, Vector)> {
        if i >= self.config.num_parents {
            return Err(Error::Parameter(format!(
                "parent index {i} out of range for {} parents",
                self.config.num_parents
            )));
        }
        self.check_input("child_representation", x)?;
        Ok(self.child_unchecked(i, x))
    }

    fn child_unchecked(&self, i: usize, x: &[f64]) -> (Vector, Vector) {
        let mut attn = Vector::zeros(self.config.children_per_parent);
        self.child_keys[i].matvec_into(x, &mut attn);
        softmax_in_place(&mut attn);
        let mut v = Vector::zeros(self.config.d);
        self.child_values[i].matvec_t_acc(&attn, &mut v);
        (v, attn)
    }

    /// Full forward pass for one position, keeping the trace.
    pub fn forward_position(&self, x: &[f64]) -> Result<(Vector, ForwardTrace)> {
        self.check_input("forward_position", x)?;
        let parent_logits = self.parents.matvec(x)?;
        let mut parent_probs = parent_logits.clone();
        softmax_in_place(&mut parent_probs);
        let selected = topk_indices(&parent_probs, self.config.top_k)?;

        let mut agg_weights: Vector = selected.iter().map(|&i| parent_logits[i]).collect::<Vec<_>>().into();
        softmax_in_place(&mut agg_weights);

        let mut output = Vector::from(x);
        let mut child_attn = Vec::with_capacity(selected.len());
        let mut child_outputs = Vec::with_capacity(selected.len());
        for (&i, &w) in selected.iter().zip(agg_weights.iter()) {
            let (v, attn) = self.child_unchecked(i, x);
            axpy(w, &v, &mut output);
            child_attn.push(attn);
            child_outputs.push(v);
        }

        let trace = ForwardTrace {
            input: Vector::from(x),
            parent_logits,
            parent_probs,
            selected,
            child_attn,
            child_outputs,
            agg_weights,
            output: output.clone(),
        };
        Ok((output, trace))
    }

    /// Applies the layer independently to every position with shared
    /// parameters. Routing is decided per position.
    pub fn forward_sequence(&self, xs: &[Vector]) -> Result<(Vec<Vector>, Vec<ForwardTrace>)> {
        let mut outputs = Vec::with_capacity(xs.len());
        let mut traces = Vec::with_capacity(xs.len());
        for x in xs {
            let (o, t) = self.forward_position(x)?;
            outputs.push(o);
            traces.push(t);
        }
        Ok((outputs, traces))
    }

    /// Inference-only forward pass writing into `out`. Performs the same
    /// multiply-accumulates as [`forward_position`](Self::forward_position)
    /// but folds the parent weights into the value products instead of
    /// materializing each `v_i`.
    pub fn infer_into(&self, x: &[f64], out: &mut [f64]) {
        let cfg = &self.config;
        debug_assert_eq!(x.len(), cfg.d);
        let mut logits = vec![0.0; cfg.num_parents];
        self.parents.matvec_into(x, &mut logits);
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        let selected = topk_indices(&probs, cfg.top_k).expect("top_k validated at construction");

        let mut weights: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
        softmax_in_place(&mut weights);

        out.copy_from_slice(x);
        let mut coeffs = vec![0.0; cfg.children_per_parent];
        for (&i, &w) in selected.iter().zip(&weights) {
            self.child_keys[i].matvec_into(x, &mut coeffs);
            softmax_in_place(&mut coeffs);
            coeffs.iter_mut().for_each(|a| *a *= w);
            self.child_values[i].matvec_t_acc(&coeffs, out);
        }
    }

    /// Dense reference: every parent contributes with its full softmax
    /// probability. Equal to the sparse layer when `K = N`.
    pub fn dense_reference_forward(&self, x: &[f64]) -> Result<Vector> {
        self.check_input("dense_reference_forward", x)?;
        let mut probs = self.parents.matvec(x)?;
        softmax_in_place(&mut probs);
        let mut out = Vector::from(x);
        for (i, &p) in probs.iter().enumerate() {
            let mut attn = self.child_keys[i].matvec(x)?;
            softmax_in_place(&mut attn);
            let mut coeffs = attn.into_inner();
            coeffs.iter_mut().for_each(|a| *a *= p);
            self.child_values[i].matvec_t_acc(&coeffs, &mut out);
        }
        Ok(out)
    }

    fn check_trace(&self, trace: &ForwardTrace, d_output: &[f64]) -> Result<()> {
        let cfg = &self.config;
        let consistent = trace.input.dim() == cfg.d
            && trace.output.dim() == cfg.d
            && trace.parent_probs.dim() == cfg.num_parents
            && trace.selected.len() == cfg.top_k
            && trace.selected.iter().all(|&i| i < cfg.num_parents)
            && trace.child_attn.len() == cfg.top_k
            && trace.child_attn.iter().all(|a| a.dim() == cfg.children_per_parent)
            && trace.child_outputs.len() == cfg.top_k
            && trace.agg_weights.dim() == cfg.top_k;
        if !consistent {
            return Err(Error::Consistency(
                "forward trace does not match the layer configuration".into(),
            ));
        }
        if d_output.len() != cfg.d {
            return Err(Error::shape("backward_position", cfg.d, d_output.len()));
        }
        Ok(())
    }

    /// Exact reverse-mode gradients for one position.
    pub fn backward_position(&self, trace: &ForwardTrace, d_output: &[f64]) -> Result<SpartanGradients> {
        let mut grads = SpartanLayerParams::zeros(self.config)?;
        let mut d_input = Vector::zeros(self.config.d);
        self.backward_accumulate(trace, d_output, &mut grads, &mut d_input)?;
        Ok(SpartanGradients {
            params: grads,
            d_input,
        })
    }

    /// Adds this position's parameter gradients into `grads` and its input
    /// gradient into `d_input`.
    pub fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        d_output: &[f64],
        grads: &mut SpartanLayerParams,
        d_input: &mut [f64],
    ) -> Result<()> {
        self.check_trace(trace, d_output)?;
        if grads.config != self.config || d_input.len() != self.config.d {
            return Err(Error::Consistency("gradient buffers do not match the layer".into()));
        }
        let x = trace.input.as_slice();
        let g = d_output;
        let c = self.config.children_per_parent;

        // Residual.
        axpy(1.0, g, d_input);

        // Mixing weights: o = Σ w_s v_s with w = softmax(selected logits).
        let dw: Vec<f64> = trace.child_outputs.iter().map(|v| dot(g, v)).collect();
        let mut dz = vec![0.0; dw.len()];
        softmax_backward(&trace.agg_weights, &dw, &mut dz);

        let mut da = vec![0.0; c];
        let mut ds = vec![0.0; c];
        for (slot, &i) in trace.selected.iter().enumerate() {
            let w = trace.agg_weights[slot];
            let attn = &trace.child_attn[slot];

            // Parent logit z_i = P_i · x.
            axpy(dz[slot], x, grads.parents.row_mut(i));
            axpy(dz[slot], self.parents.row(i), d_input);

            // v_i = V_iᵀ a with upstream w·g.
            grads.child_values[i].add_outer(w, attn, g);
            self.child_values[i].matvec_into(g, &mut da);
            da.iter_mut().for_each(|v| *v *= w);

            // a = softmax(K_i x).
            softmax_backward(attn, &da, &mut ds);
            grads.child_keys[i].add_outer(1.0, &ds, x);
            self.child_keys[i].matvec_t_acc(&ds, d_input);
        }
        Ok(())
    }
}

/// Renormalized aggregation from global parent probabilities:
/// `Z = Σ_{i∈S} p[i]`, weights `p[i]/Z`, output `Σ weights·v_i`.
///
/// The layer itself computes the same weights as a softmax over the
/// selected logits; this form is kept for direct use and as a cross-check.
pub fn aggregate(parent_probs: &[f64], selected: &[usize], child_outputs: &[Vector]) -> Result<(Vector, Vector)> {
    if selected.is_empty() || selected.len() != child_outputs.len() {
        return Err(Error::shape("aggregate", selected.len(), child_outputs.len()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= parent_probs.len()) {
        return Err(Error::Parameter(format!("selected parent {bad} out of range")));
    }
    let d = child_outputs[0].dim();
    if child_outputs.iter().any(|v| v.dim() != d) {
        return Err(Error::Shape {
            op: "aggregate",
            expected: format!("child outputs of dim {d}"),
            got: "mixed dimensions".into(),
        });
    }
    let z: f64 = selected.iter().map(|&i| parent_probs[i]).sum();
    if z == 0.0 {
        return Err(Error::DegenerateSelection);
    }
    let weights: Vector = selected.iter().map(|&i| parent_probs[i] / z).collect::<Vec<_>>().into();
    let mut o = Vector::zeros(d);
    for (w, v) in weights.iter().zip(child_outputs) {
        axpy(*w, v, &mut o);
    }
    Ok((o, weights))
}

impl ParamSet for SpartanLayerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.parents.visit(&join(prefix, "parents"), f);
        self.child_keys.visit(&join(prefix, "child_keys"), f);
        self.child_values.visit(&join(prefix, "child_values"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.parents.visit_mut(&join(prefix, "parents"), f);
        self.child_keys.visit_mut(&join(prefix, "child_keys"), f);
        self.child_values.visit_mut(&join(prefix, "child_values"), f);
    }
}
