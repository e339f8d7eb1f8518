//! Parameterised building blocks bound to a [`ParamStore`].

use rand::Rng;

use crate::conv::{ConvSpec, PadMode};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A tape plus the parameter values it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Ctx { tape, params }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        self.tape.param(name, self.params.get(name)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`.
    He,
    /// `N(0, std²)`.
    Normal(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::He => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            spec: ConvSpec::new(PadMode::Zero, 1),
            bias: true,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Conv2d {
            spec: ConvSpec::depthwise(PadMode::Zero, channels),
            ..Self::new(name, channels, channels, kernel)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.spec.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch / self.spec.groups, self.kernel, self.kernel]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, rng: &mut R) {
        let fan_in = self.in_ch / self.spec.groups * self.kernel * self.kernel;
        store.insert(self.weight_name(), init_tensor(self.weight_shape(), fan_in, init, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_ch]));
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv2d(ctx.param(&self.weight_name())?, self.spec)?;
        if self.bias {
            y.add_channels(ctx.param(&self.bias_name())?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: Init, bias: f64, rng: &mut R) {
        store.insert(
            format!("{}.w", self.name),
            init_tensor(vec![self.out_dim, self.in_dim], self.in_dim, init, rng),
        );
        store.insert(format!("{}.b", self.name), Tensor::full(vec![self.out_dim], bias));
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.fully_connected(
            ctx.param(&format!("{}.w", self.name))?,
            ctx.param(&format!("{}.b", self.name))?,
        )
    }
}
