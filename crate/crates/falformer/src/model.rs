//! The network: input projection + GELU, learnable CLS token, a stack of
//! pre-norm layers of (LayerNorm -> attention -> residual), a final
//! LayerNorm on the CLS row and a linear classifier over it.
//!
//! `forward` records the whole computation on an autodiff tape and returns a
//! `ForwardTrace` holding per-layer intermediates for backprop and
//! inspection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    build_multi_head, AttentionMode, AttentionParams, FactorVars, HeadVars, NystromFactors, Pinv,
};
use crate::autodiff::{Tape, Var};
use crate::clustering::{kmeans, SegmentAssignment};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// LayerNorm epsilon, fixed across the whole model.
pub const LN_EPS: f64 = 1e-5;

/// Hyperparameters of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input feature dimension of the bags.
    pub d_f: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Segment budget for landmark construction.
    pub n_segments: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub attention_mode: AttentionMode,
    pub pinv: Pinv,
    /// Seed for the per-bag K-means segmentation.
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
    /// Re-run K-means on every layer's normalized tokens instead of reusing
    /// the assignment computed on the projected inputs.
    pub recluster_per_layer: bool,
    /// Cluster the raw d_f features instead of the projected tokens.
    pub cluster_raw_features: bool,
}

impl ModelConfig {
    pub fn new(d_f: usize, n_classes: usize) -> Self {
        ModelConfig {
            d_f,
            d_model: 768,
            layers: 2,
            n_segments: 256,
            heads: 8,
            n_classes,
            attention_mode: AttentionMode::Falsa,
            pinv: Pinv::Iterative { iters: 6 },
            kmeans_seed: 0,
            kmeans_iters: 50,
            recluster_per_layer: false,
            cluster_raw_features: false,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0
            || self.d_model == 0
            || self.layers == 0
            || self.n_segments == 0
            || self.heads == 0
        {
            return Err(Error::InvalidArg(
                "d_f, d_model, layers, segments and heads must all be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArg("need at least two classes".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if let Pinv::Iterative { iters } = self.pinv {
            if iters == 0 {
                return Err(Error::InvalidArg("pinv_iters must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Learnable tensors of one layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub attn: AttentionParams,
}

/// All learnable tensors.
///
/// The canonical tensor order (used by the checkpoint format, the optimizer
/// and the gradient container) is: input_w, input_b, cls, then per layer
/// [ln_gamma, ln_beta, per head (wq, wk, wv), wo], then final_gamma,
/// final_beta, cls_w, cls_b.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub cls: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Matrix,
    pub final_beta: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

impl ModelParams {
    pub fn tensor_list(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.input_w, &self.input_b, &self.cls];
        for layer in &self.layers {
            out.push(&layer.ln_gamma);
            out.push(&layer.ln_beta);
            for h in 0..layer.attn.heads() {
                out.push(&layer.attn.wq[h]);
                out.push(&layer.attn.wk[h]);
                out.push(&layer.attn.wv[h]);
            }
            out.push(&layer.attn.wo);
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out.push(&self.cls_w);
        out.push(&self.cls_b);
        out
    }

    pub fn tensor_list_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.input_w, &mut self.input_b, &mut self.cls];
        for layer in &mut self.layers {
            out.push(&mut layer.ln_gamma);
            out.push(&mut layer.ln_beta);
            let heads = layer.attn.wq.len();
            let (wq, wk, wv) = (&mut layer.attn.wq, &mut layer.attn.wk, &mut layer.attn.wv);
            let mut q_iter = wq.iter_mut();
            let mut k_iter = wk.iter_mut();
            let mut v_iter = wv.iter_mut();
            for _ in 0..heads {
                out.push(q_iter.next().unwrap());
                out.push(k_iter.next().unwrap());
                out.push(v_iter.next().unwrap());
            }
            out.push(&mut layer.attn.wo);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    /// Human-readable names in canonical tensor order.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut out = vec!["input_w".into(), "input_b".into(), "cls".into()];
        for l in 0..config.layers {
            out.push(format!("layer{l}.ln_gamma"));
            out.push(format!("layer{l}.ln_beta"));
            for h in 0..config.heads {
                out.push(format!("layer{l}.head{h}.wq"));
                out.push(format!("layer{l}.head{h}.wk"));
                out.push(format!("layer{l}.head{h}.wv"));
            }
            out.push(format!("layer{l}.wo"));
        }
        out.push("final_gamma".into());
        out.push("final_beta".into());
        out.push("cls_w".into());
        out.push("cls_b".into());
        out
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let check = |m: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::ConfigMismatch(format!(
                    "{what} must be {rows}x{cols}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        check(&self.input_w, config.d_f, config.d_model, "input_w")?;
        check(&self.input_b, 1, config.d_model, "input_b")?;
        check(&self.cls, 1, config.d_model, "cls")?;
        if self.layers.len() != config.layers {
            return Err(Error::ConfigMismatch(format!(
                "expected {} layers, got {}",
                config.layers,
                self.layers.len()
            )));
        }
        for layer in &self.layers {
            check(&layer.ln_gamma, 1, config.d_model, "ln_gamma")?;
            check(&layer.ln_beta, 1, config.d_model, "ln_beta")?;
            layer.attn.validate(config.d_model)?;
        }
        check(&self.final_gamma, 1, config.d_model, "final_gamma")?;
        check(&self.final_beta, 1, config.d_model, "final_beta")?;
        check(&self.cls_w, config.d_model, config.n_classes, "cls_w")?;
        check(&self.cls_b, 1, config.n_classes, "cls_b")?;
        Ok(())
    }
}

/// Deterministic seeded initialization: fan-in-scaled uniform for linear
/// maps, ones/zeros for LayerNorm, N(0, 0.02) for the CLS token.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform_fan_in = |rows: usize, cols: usize| -> Matrix {
        let bound = (6.0 / rows as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
    };
    let input_w = uniform_fan_in(config.d_f, config.d_model);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let attn = AttentionParams {
            wq: (0..config.heads)
                .map(|_| uniform_fan_in(config.d_model, config.d_head()))
                .collect(),
            wk: (0..config.heads)
                .map(|_| uniform_fan_in(config.d_model, config.d_head()))
                .collect(),
            wv: (0..config.heads)
                .map(|_| uniform_fan_in(config.d_model, config.d_head()))
                .collect(),
            wo: uniform_fan_in(config.d_model, config.d_model),
        };
        layers.push(LayerParams {
            ln_gamma: Matrix::from_fn(1, config.d_model, |_, _| 1.0),
            ln_beta: Matrix::zeros(1, config.d_model),
            attn,
        });
    }
    let cls_w = uniform_fan_in(config.d_model, config.n_classes);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let cls = Matrix::from_fn(1, config.d_model, |_, _| normal.sample(&mut rng));
    Ok(ModelParams {
        input_w,
        input_b: Matrix::zeros(1, config.d_model),
        cls,
        layers,
        final_gamma: Matrix::from_fn(1, config.d_model, |_, _| 1.0),
        final_beta: Matrix::zeros(1, config.d_model),
        cls_w,
        cls_b: Matrix::zeros(1, config.n_classes),
    })
}

/// Tape handles of every parameter, in canonical tensor order.
pub(crate) struct ParamVars {
    pub ordered: Vec<Var>,
}

/// Everything one forward pass produced, retained for backprop and
/// inspection.
pub struct ForwardTrace {
    pub(crate) tape: Tape,
    pub(crate) param_vars: ParamVars,
    /// H^(0) .. H^(L), each (N+1) x d_model.
    pub h_vars: Vec<Var>,
    pub h_prime_vars: Vec<Var>,
    pub logits_var: Var,
    pub logits: Vec<f64>,
    /// Per-layer, per-head factors (empty in exact mode).
    pub factor_vars: Vec<Vec<FactorVars>>,
    /// Segment assignment used by each layer (falsa mode only).
    pub assignments: Vec<SegmentAssignment>,
    pub config: ModelConfig,
    pub n_tokens: usize,
}

impl ForwardTrace {
    pub fn h(&self, i: usize) -> &Matrix {
        self.tape.value(self.h_vars[i])
    }

    pub fn h_prime(&self, i: usize) -> &Matrix {
        self.tape.value(self.h_prime_vars[i])
    }

    /// Materialized Nystrom factors for one layer.
    pub fn factors(&self, layer: usize) -> Vec<NystromFactors> {
        self.factor_vars[layer]
            .iter()
            .map(|fv| NystromFactors {
                f: self.tape.value(fv.f).clone(),
                a: self.tape.value(fv.a).clone(),
                b: self.tape.value(fv.b).clone(),
            })
            .collect()
    }
}

fn register_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    let ordered = params
        .tensor_list()
        .into_iter()
        .map(|m| tape.leaf(m.clone()))
        .collect();
    ParamVars { ordered }
}

struct ParamVarView<'a> {
    vars: &'a [Var],
    config: &'a ModelConfig,
}

impl<'a> ParamVarView<'a> {
    fn input_w(&self) -> Var {
        self.vars[0]
    }
    fn input_b(&self) -> Var {
        self.vars[1]
    }
    fn cls(&self) -> Var {
        self.vars[2]
    }
    fn layer_base(&self, l: usize) -> usize {
        3 + l * (3 + 3 * self.config.heads)
    }
    fn ln_gamma(&self, l: usize) -> Var {
        self.vars[self.layer_base(l)]
    }
    fn ln_beta(&self, l: usize) -> Var {
        self.vars[self.layer_base(l) + 1]
    }
    fn head(&self, l: usize, h: usize) -> HeadVars {
        let base = self.layer_base(l) + 2 + 3 * h;
        HeadVars {
            wq: self.vars[base],
            wk: self.vars[base + 1],
            wv: self.vars[base + 2],
        }
    }
    fn wo(&self, l: usize) -> Var {
        self.vars[self.layer_base(l) + 2 + 3 * self.config.heads]
    }
    fn final_gamma(&self) -> Var {
        self.vars[self.vars.len() - 4]
    }
    fn final_beta(&self) -> Var {
        self.vars[self.vars.len() - 3]
    }
    fn cls_w(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }
    fn cls_b(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

/// Forward pass over a raw token matrix (N x d_f patch embeddings).
///
/// In falsa mode the segment assignment is computed once on the projected
/// non-CLS tokens of H^(0) (or the raw features, per config) and reused in
/// every layer; `pinned_assignment` overrides it, which the gradient checker
/// uses to hold segment IDs constant across perturbations.
pub fn forward_tokens(
    tokens: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
    pinned_assignment: Option<&SegmentAssignment>,
) -> Result<ForwardTrace> {
    config.validate()?;
    params.validate(config)?;
    if tokens.rows() == 0 {
        return Err(Error::EmptyInput("bag has no tokens"));
    }
    if tokens.cols() != config.d_f {
        return Err(Error::ConfigMismatch(format!(
            "bag feature dim {} does not match model d_f {}",
            tokens.cols(),
            config.d_f
        )));
    }
    let n = tokens.rows();
    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params);
    let view = ParamVarView {
        vars: &param_vars.ordered,
        config,
    };

    let input = tape.leaf(tokens.clone());
    let proj = tape.matmul(input, view.input_w())?;
    let proj_b = tape.add_bias_row(proj, view.input_b())?;
    let act = tape.gelu(proj_b);
    let h0 = tape.concat_rows(view.cls(), act)?;

    let mut assignments: Vec<SegmentAssignment> = Vec::new();
    let base_assignment = if config.attention_mode == AttentionMode::Falsa {
        Some(match pinned_assignment {
            Some(a) => a.clone(),
            None => {
                let cluster_input = if config.cluster_raw_features {
                    tokens.clone()
                } else {
                    tape.value(act).clone()
                };
                kmeans(
                    &cluster_input,
                    config.n_segments.min(n),
                    config.kmeans_seed,
                    config.kmeans_iters,
                )?
            }
        })
    } else {
        None
    };

    let mut h_vars = vec![h0];
    let mut h_prime_vars = Vec::new();
    let mut factor_vars = Vec::new();
    let mut h = h0;
    for l in 0..config.layers {
        let h_prime = tape.layer_norm(h, view.ln_gamma(l), view.ln_beta(l), LN_EPS)?;
        h_prime_vars.push(h_prime);
        let layer_assignment = match (&base_assignment, config.recluster_per_layer) {
            (Some(_), true) if pinned_assignment.is_none() => {
                let normed = tape.value(h_prime).slice_rows(1, n);
                Some(kmeans(
                    &normed,
                    config.n_segments.min(n),
                    config.kmeans_seed,
                    config.kmeans_iters,
                )?)
            }
            (Some(a), _) => Some(a.clone()),
            (None, _) => None,
        };
        let heads: Vec<HeadVars> = (0..config.heads).map(|hh| view.head(l, hh)).collect();
        let built = build_multi_head(
            &mut tape,
            h_prime,
            &heads,
            view.wo(l),
            config.attention_mode,
            layer_assignment.as_ref(),
            config.n_segments,
            config.pinv,
        )?;
        if let Some(a) = layer_assignment {
            assignments.push(a);
        }
        factor_vars.push(built.factors);
        h = tape.add(h, built.output)?;
        h_vars.push(h);
    }

    let cls_row = tape.slice_rows(h, 0, 1);
    let cls_normed = tape.layer_norm(cls_row, view.final_gamma(), view.final_beta(), LN_EPS)?;
    let logits_mm = tape.matmul(cls_normed, view.cls_w())?;
    let logits_var = tape.add_bias_row(logits_mm, view.cls_b())?;
    let logits = tape.value(logits_var).row(0).to_vec();
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model logits"));
    }

    Ok(ForwardTrace {
        tape,
        param_vars,
        h_vars,
        h_prime_vars,
        logits_var,
        logits,
        factor_vars,
        assignments,
        config: config.clone(),
        n_tokens: n,
    })
}

/// Stable softmax of a logit slice.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Class probabilities and the argmax label (lowest index wins ties).
pub fn predict_tokens(
    tokens: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(usize, Vec<f64>)> {
    let trace = forward_tokens(tokens, params, config, None)?;
    let probs = softmax_vec(&trace.logits);
    let mut label = 0;
    let mut best = probs[0];
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > best {
            best = p;
            label = i;
        }
    }
    Ok((label, probs))
}

/// Forward pass over one feature bag.
pub fn forward(
    bag: &crate::data::FeatureBag,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardTrace> {
    forward_tokens(&bag.tokens, params, config, None)
}

/// Predicted label and class probabilities for one feature bag.
pub fn predict(
    bag: &crate::data::FeatureBag,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(usize, Vec<f64>)> {
    predict_tokens(&bag.tokens, params, config)
}
