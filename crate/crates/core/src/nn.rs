//! Parameter registry and the small layer bundles built on top of it.
//!
//! Parameters live outside any tape in a [`ParamStore`]; each training step
//! leafs them onto a fresh tape (a [`TapeBinding`]) and reads gradients back
//! by id after the sweep. Registration order is stable and doubles as the
//! serialization order for checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stable handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// All learnable tensors of a model, in declaration order.
#[derive(Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::invalid("params", format!("duplicate name {name}")));
        }
        self.entries.push(Param { name, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.entries.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Leaf every parameter onto `tape` with gradients enabled.
    pub fn bind(&self, tape: &mut Tape<F>) -> TapeBinding {
        TapeBinding {
            vars: self
                .entries
                .iter()
                .map(|p| tape.leaf(p.value.clone(), true))
                .collect(),
        }
    }
}

/// The tape variables of one `bind` call, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct TapeBinding {
    vars: Vec<Var>,
}

impl TapeBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// All bound variables, in parameter declaration order.
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    /// Bind externally created leaves (declaration order). Lets gradient
    /// probes substitute their own perturbed tensors for the stored values.
    pub fn from_vars(vars: Vec<Var>) -> TapeBinding {
        TapeBinding { vars }
    }
}

/// Uniform init scaled by fan-in: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
/// Draws happen at f64 and are cast down, so f32 and f64 models built from
/// the same seed see the same underlying sample sequence.
pub fn uniform_fan_in<F: Real>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if fan_in == 0 {
        return Err(Error::invalid("init", "zero fan-in"));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Uniform init with relu gain: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
/// For weights feeding a relu; preserves activation variance through deep
/// stacks where the plain fan-in bound would shrink it ~6x per layer.
pub fn relu_uniform_fan_in<F: Real>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if fan_in == 0 {
        return Err(Error::invalid("init", "zero fan-in"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Fully connected layer: weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn create<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            uniform_fan_in(vec![out_width, in_width], in_width, rng)?,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_width])?)?;
        Ok(LinearParams { w, b })
    }

    /// Like [`LinearParams::create`] but with relu-gain init, for hidden
    /// layers whose output feeds a relu.
    pub fn create_relu<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            relu_uniform_fan_in(vec![out_width, in_width], in_width, rng)?,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_width])?)?;
        Ok(LinearParams { w, b })
    }

    /// `x`: `[n, in]` -> `[n, out]`
    pub fn apply<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        x: Var,
    ) -> Result<Var> {
        let wt = tape.transpose2d(binding.var(self.w))?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, binding.var(self.b))
    }
}

/// Convolution layer: weight `[co, ci, kh, kw]`, bias `[co]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn create<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_chans: usize,
        out_chans: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_chans * kernel * kernel;
        // every conv in this architecture feeds a relu
        let w = store.add(
            format!("{name}.w"),
            relu_uniform_fan_in(vec![out_chans, in_chans, kernel, kernel], fan_in, rng)?,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_chans])?)?;
        Ok(ConvParams { w, b, stride, padding })
    }

    /// `x`: `[ci, h, w]` -> `[co, ho, wo]`
    pub fn apply<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        x: Var,
    ) -> Result<Var> {
        let y = tape.conv2d(x, binding.var(self.w), self.stride, self.padding)?;
        tape.add_chan(y, binding.var(self.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("a", Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert!(store.add("a", Tensor::zeros(vec![2]).unwrap()).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a: Tensor<f64> = uniform_fan_in(vec![4, 9], 9, &mut r1).unwrap();
        let b: Tensor<f64> = uniform_fan_in(vec![4, 9], 9, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        let bound = 1.0 / 3.0;
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn f32_init_matches_f64_draws() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f64> = uniform_fan_in(vec![3, 3], 3, &mut r1).unwrap();
        let b: Tensor<f32> = uniform_fan_in(vec![3, 3], 3, &mut r2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y);
        }
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = LinearParams::create(&mut store, &mut rng, "head", 2, 3).unwrap();
        *store.get_mut(lin.w) =
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        *store.get_mut(lin.b) = Tensor::new(vec![3], vec![0.5, -0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let y = lin.apply(&mut tape, &binding, x).unwrap();
        assert_eq!(tape.value(y).data(), &[50.5, 109.5, 170.0]);
    }
}
