//! Parameters and the layer building blocks shared by every network module.

use super::{mismatch, Result, Scalar, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (BatchNorm running statistics) are stored but not optimized.
    pub trainable: bool,
}

/// Ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(mismatch("assign", self.entries.len(), other.entries.len()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(mismatch("assign", &a.name, &b.name));
            }
            a.tensor = b.tensor.clone();
        }
        Ok(())
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, v) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(&v);
        }
    }
}

/// Training or inference behavior of BatchNorm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape bound lazily to a parameter store.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    pub mode: Mode,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable_grads: bool,
    stat_updates: Vec<(ParamId, Vec<T>)>,
    /// Overrides the BatchNorm momentum of every layer in this pass.
    pub stat_momentum: Option<f64>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `mode` selects BatchNorm behavior; parameters are differentiable leaves.
    pub fn new(params: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            params,
            bound: vec![None; params.len()],
            trainable_grads: true,
            stat_updates: Vec::new(),
            stat_momentum: None,
        }
    }

    /// Inference context: parameters are recorded as constants.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        let mut c = Self::new(params, Mode::Eval);
        c.trainable_grads = false;
        c
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let e = &self.params.entries[id.0];
        let v = self
            .tape
            .leaf(e.tensor.clone(), self.trainable_grads && e.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn record_stats(&mut self, id: ParamId, values: Vec<T>) {
        self.stat_updates.push((id, values));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradient per parameter, `None` for parameters the pass never touched.
    pub fn param_grads(&self, grads: &super::Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.filter(|v| grads.reached(*v)).map(|v| grads.get(v)))
            .collect()
    }
}

/// Affine layer `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±sqrt(1 / d_in)`, bias zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let bound = (1.0 / d_in.max(1) as f64).sqrt();
        let w: Vec<f64> = rng
            .uniform(d_in * d_out)
            .into_iter()
            .map(|u| (2.0 * u - 1.0) * bound)
            .collect();
        let w = store.add(
            format!("{name}.w"),
            Tensor::from_f64(vec![d_in, d_out], &w).expect("weight shape"),
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]), true));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w)?;
        let b = self.b.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.linear(x, w, b)
    }
}

/// Stack of linear layers with ReLU between consecutive layers and none at
/// the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut RngStream) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = ctx.tape.relu(h)?;
            }
            h = l.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// Per-channel batch normalization with running statistics.
///
/// In training mode statistics are taken over all rows of the input, i.e.
/// over batch and points flattened together.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![d]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(vec![d], T::one()),
                false,
            ),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = T::from_f64(ctx.stat_momentum.unwrap_or(self.momentum));
                let keep = T::one() - m;
                let rm = ctx.params().get(self.running_mean).data();
                let rv = ctx.params().get(self.running_var).data();
                let new_mean = rm.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
                let new_var = rv.iter().zip(&var).map(|(&r, &b)| keep * r + m * b).collect();
                ctx.record_stats(self.running_mean, new_mean);
                ctx.record_stats(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.params().get(self.running_mean).data().to_vec();
                let var = ctx.params().get(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}
