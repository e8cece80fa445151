//! Parameterized layers over the tape: each owns `ParamId`s inside a
//! caller-provided [`ParamStore`] and binds them on every forward call.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var, LAYER_NORM_EPS};

/// `y = x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), &[d_out]));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        Linear { weight, bias: None, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// 1-D convolution over `[B, C, L]` with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel],
            c_in * kernel,
            rng,
        );
        let bias = store.add_zeros(&format!("{name}.bias"), &[c_out]);
        Conv1d { weight, bias, stride, padding }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv1d(x, w, self.stride, self.padding)?;
        tape.add_axis(y, b, 1)
    }
}

/// Transposed 1-D convolution over `[B, C, L]`; weight is `[C_in, C_out, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            &format!("{name}.weight"),
            &[c_in, c_out, kernel],
            c_out * kernel,
            rng,
        );
        let bias = store.add_zeros(&format!("{name}.bias"), &[c_out]);
        ConvTranspose1d { weight, bias, stride, padding }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv1d_transpose(x, w, self.stride, self.padding)?;
        tape.add_axis(y, b, 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(&format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(&format!("{name}.bias"), &[dim]),
            dim,
        }
    }

    /// Normalizes the last axis.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Normalizes the channel axis of a `[B, C, L]` tensor.
    pub fn forward_channels(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t = tape.permute(x, &[0, 2, 1])?;
        let n = self.forward(tape, store, t)?;
        tape.permute(n, &[0, 2, 1])
    }
}
