//! Multilayer perceptron policy with exact derivatives.
//!
//! Every derivative in the crate goes through one computation description: a
//! forward pass that optionally carries a tangent (forward mode, giving `J v`)
//! and a single reverse sweep over that same record. The reverse sweep yields
//! input adjoints (`Jᵀ w`) and parameter gradients of any scalar built from the
//! policy output and its tangent, which is what the AAJR and spectral penalties
//! need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, dot, Matrix};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn d1<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

    fn d2<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -(T::one() + T::one()) * t * (T::one() - t * t)
            }
            Activation::Identity => T::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

/// Policy parameters: an ordered stack of affine layers with smooth activations.
///
/// Invariants (checked by [`Mlp::new`]): layer dimensions chain, all entries
/// are finite and the last activation is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("policy.layers", "at least one layer is required"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.rows() == 0 || layer.weight.cols() == 0 {
                return Err(Error::config(
                    format!("policy.layers[{k}].weight"),
                    "layer dimensions must be positive",
                ));
            }
            check_dim("layer bias length", layer.weight.rows(), layer.bias.len())?;
            if k > 0 {
                check_dim(
                    "layer input size (must equal previous output size)",
                    layers[k - 1].weight.rows(),
                    layer.weight.cols(),
                )?;
            }
            if !layer.weight.is_finite() || !all_finite(&layer.bias) {
                return Err(Error::numeric(format!("policy layer {k} parameters")));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::config(
                "policy.activations",
                "the final layer activation must be identity",
            ));
        }
        Ok(Self { layers })
    }

    /// Seeded initialization: every weight and bias uniform in `[-a, a]`, `a = 1/sqrt(fan_in)`.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("policy.dims", "need at least input and output sizes"));
        }
        check_dim("activation count", dims.len() - 1, activations.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| T::of(rng.gen_range(-a..=a)));
                let bias = (0..fan_out).map(|_| T::of(rng.gen_range(-a..=a))).collect();
                Layer {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Single identity-activation layer `z = W s + b`.
    pub fn linear(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        Self::new(vec![Layer {
            weight,
            bias,
            activation: Activation::Identity,
        }])
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.rows()))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * (l.weight.cols() + 1))
            .sum()
    }

    /// Multiplies every weight and bias by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.scaled(c),
                    bias: l.bias.iter().map(|&b| b * c).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// `π(s)`.
    pub fn forward(&self, state: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(state, None)?.output)
    }

    /// `J(s) v`, forward mode.
    pub fn jvp(&self, state: &[T], direction: &[T]) -> Result<Vec<T>> {
        check_dim("jvp direction", self.input_dim(), direction.len())?;
        let trace = self.trace(state, Some(direction))?;
        Ok(trace.output_tangent.expect("tangent requested"))
    }

    /// `π(s)` and `J(s) v` from one pass.
    pub fn forward_jvp(&self, state: &[T], direction: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        check_dim("jvp direction", self.input_dim(), direction.len())?;
        let trace = self.trace(state, Some(direction))?;
        Ok((trace.output, trace.output_tangent.expect("tangent requested")))
    }

    /// `J(s)ᵀ w`, reverse mode.
    pub fn vjp(&self, state: &[T], cotangent: &[T]) -> Result<Vec<T>> {
        check_dim("vjp cotangent", self.output_dim(), cotangent.len())?;
        let trace = self.trace(state, None)?;
        Ok(trace.backward(cotangent, None, None))
    }

    /// Dense Jacobian assembled column by column from [`Mlp::jvp`]. Diagnostic use only.
    pub fn jacobian(&self, state: &[T]) -> Result<Matrix<T>> {
        let d = self.input_dim();
        let mut jac = Matrix::zeros(self.output_dim(), d);
        let mut e = vec![T::zero(); d];
        for j in 0..d {
            e[j] = T::one();
            let col = self.jvp(state, &e)?;
            for (i, v) in col.into_iter().enumerate() {
                jac.set(i, j, v);
            }
            e[j] = T::zero();
        }
        Ok(jac)
    }

    /// Records the forward pass (and the tangent pass when `direction` is set).
    pub fn trace(&self, state: &[T], direction: Option<&[T]>) -> Result<Trace<'_, T>> {
        check_dim("policy input", self.input_dim(), state.len())?;
        if !all_finite(state) {
            return Err(Error::numeric("policy input state"));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut tangents = Vec::with_capacity(n);
        let mut pre_tangents = Vec::with_capacity(n);
        let mut x = state.to_vec();
        let mut xdot = direction.map(<[T]>::to_vec);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut p = layer.weight.matvec(&x)?;
            for (pi, &bi) in p.iter_mut().zip(&layer.bias) {
                *pi += bi;
            }
            if !all_finite(&p) {
                return Err(Error::numeric(format!("layer {k} pre-activation")));
            }
            let next: Vec<T> = p.iter().map(|&v| layer.activation.apply(v)).collect();
            let next_dot = match &xdot {
                Some(xd) => {
                    let pd = layer.weight.matvec(xd)?;
                    let nd: Vec<T> = pd
                        .iter()
                        .zip(&p)
                        .map(|(&d, &v)| layer.activation.d1(v) * d)
                        .collect();
                    if !all_finite(&nd) {
                        return Err(Error::numeric(format!("layer {k} tangent")));
                    }
                    pre_tangents.push(pd);
                    Some(nd)
                }
                None => None,
            };
            inputs.push(x);
            tangents.push(xdot);
            pre.push(p);
            x = next;
            xdot = next_dot;
        }
        Ok(Trace {
            mlp: self,
            inputs,
            tangents,
            pre,
            pre_tangents,
            output: x,
            output_tangent: xdot,
        })
    }

    /// Adds the gradient of `probe` at the current parameters into `grads` and
    /// returns the probe's value.
    pub fn accumulate_gradient(&self, probe: &Probe<'_, T>, grads: &mut Gradients<T>) -> Result<T> {
        let trace = self.trace(probe.state, probe.direction)?;
        let tangent = trace.output_tangent.as_deref().unwrap_or(&[]);
        let pv = (probe.objective)(&trace.output, tangent);
        if !pv.value.is_finite() || !all_finite(&pv.d_output) || !all_finite(&pv.d_tangent) {
            return Err(Error::numeric("probe objective"));
        }
        check_dim("probe output adjoint", self.output_dim(), pv.d_output.len())?;
        let tan_seed = if probe.direction.is_some() {
            check_dim("probe tangent adjoint", self.output_dim(), pv.d_tangent.len())?;
            Some(pv.d_tangent.as_slice())
        } else {
            None
        };
        trace.backward(&pv.d_output, tan_seed, Some(grads));
        Ok(pv.value)
    }

    /// Gradient with respect to every weight and bias of `Σ_i f_i(π(s_i), J(s_i) u_i)`.
    pub fn param_gradient(&self, probes: &[Probe<'_, T>]) -> Result<(T, Gradients<T>)> {
        let mut grads = Gradients::zeros_like(self);
        let mut total = T::zero();
        for (i, probe) in probes.iter().enumerate() {
            total += self.accumulate_gradient(probe, &mut grads).map_err(|e| match e {
                Error::Numeric { location } => Error::numeric(format!("probe {i}: {location}")),
                other => other,
            })?;
        }
        grads.ensure_finite()?;
        Ok((total, grads))
    }

    /// Plain gradient descent step `θ ← θ − lr · grad`.
    pub fn descend(&mut self, grads: &Gradients<T>, lr: T) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &gw) in layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * gw;
            }
            for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Flat parameter vector in layer order, row-major weights then bias.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(&self, flat: &[T]) -> Result<Self> {
        check_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w: Vec<T> = it.by_ref().take(l.weight.rows() * l.weight.cols()).collect();
                let b: Vec<T> = it.by_ref().take(l.bias.len()).collect();
                Ok(Layer {
                    weight: Matrix::from_row_major(l.weight.rows(), l.weight.cols(), w)?,
                    bias: b,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            dims: self.dims(),
            activations: self.activations(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        if ck.dims.len() != ck.layers.len() + 1 || ck.activations.len() != ck.layers.len() {
            return Err(Error::config(
                "checkpoint",
                "dims must have one more entry than layers and activations",
            ));
        }
        let layers = ck
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                Ok(Layer {
                    weight: Matrix::from_row_major(ck.dims[k + 1], ck.dims[k], l.weight)?,
                    bias: l.bias,
                    activation: ck.activations[k],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

/// On-disk policy: `{ "dims", "activations", "layers": [{ "weight", "bias" }] }` with
/// row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub layers: Vec<CheckpointLayer<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct CheckpointLayer<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Value of a scalar objective at `(z, ż)` together with its partials.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeValue<T> {
    pub value: T,
    pub d_output: Vec<T>,
    /// Empty when the probe carries no direction.
    pub d_tangent: Vec<T>,
}

/// Objective callback of a [`Probe`]: `(output, tangent) ↦ value and partials`.
pub type ProbeObjective<'a, T> = dyn Fn(&[T], &[T]) -> ProbeValue<T> + Sync + 'a;

/// One term `f(π(s), J(s) u)` of a parameter-space objective. The direction is a
/// constant: no gradient flows through it.
pub struct Probe<'a, T> {
    pub state: &'a [T],
    pub direction: Option<&'a [T]>,
    pub objective: &'a ProbeObjective<'a, T>,
}

/// Parameter-shaped gradient, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradient<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += alpha * y;
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|x| *x *= alpha);
            l.bias.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .map(|l| l.weight.frobenius_sq() + dot(&l.bias, &l.bias))
            .sum::<T>()
            .sqrt()
    }

    fn ensure_finite(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            l.weight.ensure_finite(|| format!("gradient of layer {k} weight"))?;
            if !all_finite(&l.bias) {
                return Err(Error::numeric(format!("gradient of layer {k} bias")));
            }
        }
        Ok(())
    }
}

/// Recorded forward (and optional tangent) pass.
pub struct Trace<'a, T> {
    mlp: &'a Mlp<T>,
    inputs: Vec<Vec<T>>,
    tangents: Vec<Option<Vec<T>>>,
    pre: Vec<Vec<T>>,
    pre_tangents: Vec<Vec<T>>,
    pub output: Vec<T>,
    pub output_tangent: Option<Vec<T>>,
}

impl<T: Scalar> Trace<'_, T> {
    /// Reverse sweep. `out_seed` is the adjoint of the output, `tan_seed` the adjoint
    /// of the output tangent (ignored when no tangent was traced). Parameter
    /// gradients are accumulated into `grads` when given; the return value is the
    /// adjoint of the input state.
    pub fn backward(
        &self,
        out_seed: &[T],
        tan_seed: Option<&[T]>,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Vec<T> {
        let with_tangent = tan_seed.is_some() && self.output_tangent.is_some();
        let mut x_bar = out_seed.to_vec();
        let mut xdot_bar = if with_tangent {
            tan_seed.map(<[T]>::to_vec)
        } else {
            None
        };
        for k in (0..self.mlp.layers.len()).rev() {
            let layer = &self.mlp.layers[k];
            let act = layer.activation;
            let p = &self.pre[k];
            let mut p_bar: Vec<T> = p.iter().zip(&x_bar).map(|(&v, &a)| act.d1(v) * a).collect();
            let pdot_bar = xdot_bar.as_ref().map(|xdb| {
                let pd = &self.pre_tangents[k];
                for ((pb, &v), (&d, &b)) in p_bar.iter_mut().zip(p).zip(pd.iter().zip(xdb)) {
                    *pb += act.d2(v) * d * b;
                }
                p.iter().zip(xdb).map(|(&v, &b)| act.d1(v) * b).collect::<Vec<T>>()
            });
            if let Some(g) = grads.as_deref_mut() {
                let lg = &mut g.layers[k];
                lg.weight.add_outer(T::one(), &p_bar, &self.inputs[k]);
                for (b, &pb) in lg.bias.iter_mut().zip(&p_bar) {
                    *b += pb;
                }
                if let (Some(pdb), Some(xd)) = (&pdot_bar, &self.tangents[k]) {
                    lg.weight.add_outer(T::one(), pdb, xd);
                }
            }
            x_bar = layer.weight.matvec_t(&p_bar).expect("trace dimensions are consistent");
            xdot_bar = pdot_bar
                .map(|pdb| layer.weight.matvec_t(&pdb).expect("trace dimensions are consistent"));
        }
        x_bar
    }
}
