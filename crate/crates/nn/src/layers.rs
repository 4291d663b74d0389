//! Parameterized layers. A layer value only carries its configuration and
//! parameter-name prefix; weights live in a [`ParamStore`] and are bound into
//! a [`Graph`] on each forward call.

use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_shape<T: Real>(
    g: &Graph<T>,
    x: Var,
    layer: &str,
    rank: usize,
    dim: usize,
    expected: usize,
) -> Result<(), NnError> {
    let s = g.shape(x);
    if s.len() != rank || s[dim] != expected {
        return Err(NnError::Shape {
            layer: layer.to_string(),
            expected: format!("rank {rank} with dim[{dim}] = {expected}"),
            got: s.to_vec(),
        });
    }
    Ok(())
}

/// `y = x·W + b` on `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), NnError> {
        store.insert(self.w(), init.fan_in(&self.w(), &[self.input, self.output], self.input))?;
        store.insert(self.b(), Tensor::zeros(&[self.output]))?;
        Ok(())
    }

    /// Weights and bias set to zero, so the layer outputs zeros until trained.
    pub fn register_zeroed<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), NnError> {
        store.insert(self.w(), Tensor::zeros(&[self.input, self.output]))?;
        store.insert(self.b(), Tensor::zeros(&[self.output]))?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        check_shape(g, x, &self.name, 2, 1, self.input)?;
        let w = g.param(store, &self.w())?;
        let b = g.param(store, &self.b())?;
        let xw = g.matmul(x, w);
        let b = g.reshape(b, &[1, self.output]);
        Ok(g.add(xw, b))
    }
}

/// 2-D convolution on NCHW tensors with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, input: usize, output: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            kernel,
            stride,
            pad,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), NnError> {
        let w = format!("{}.w", self.name);
        let fan_in = self.input * self.kernel * self.kernel;
        store.insert(&w, init.fan_in(&w, &[self.output, self.input, self.kernel, self.kernel], fan_in))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.output]))?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        check_shape(g, x, &self.name, 4, 1, self.input)?;
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.conv2d(x, w, self.stride, self.pad);
        let b = g.reshape(b, &[1, self.output, 1, 1]);
        Ok(g.add(y, b))
    }
}

/// Transposed 2-D convolution; weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, input: usize, output: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            kernel,
            stride,
            pad,
        }
    }

    /// Stride-1 layer whose output has the same spatial size as its input.
    pub fn same(name: impl Into<String>, input: usize, output: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "size-preserving transposed conv needs an odd kernel");
        Self::new(name, input, output, kernel, 1, kernel / 2)
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), NnError> {
        let w = format!("{}.w", self.name);
        // Each output pixel sums over in·k·k / stride² contributions.
        let fan_in = self.input * self.kernel * self.kernel / (self.stride * self.stride);
        store.insert(&w, init.fan_in(&w, &[self.input, self.output, self.kernel, self.kernel], fan_in))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.output]))?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        check_shape(g, x, &self.name, 4, 1, self.input)?;
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.conv_transpose2d(x, w, self.stride, self.pad);
        let b = g.reshape(b, &[1, self.output, 1, 1]);
        Ok(g.add(y, b))
    }
}

/// Recurrent state of an [`LstmCell`] for a batch of `N` rows.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), NnError> {
        let h4 = 4 * self.hidden;
        let wx = format!("{}.wx", self.name);
        let wh = format!("{}.wh", self.name);
        store.insert(&wx, init.fan_in(&wx, &[self.input, h4], self.input))?;
        store.insert(&wh, init.fan_in(&wh, &[self.hidden, h4], self.hidden))?;
        // Forget-gate bias of 1 keeps early gradients flowing through c.
        let mut b = vec![T::zero(); h4];
        b[self.hidden..2 * self.hidden].iter_mut().for_each(|v| *v = T::one());
        store.insert(format!("{}.b", self.name), Tensor::new(&[h4], b)?)?;
        Ok(())
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        LstmState { h, c }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState, NnError> {
        check_shape(g, x, &self.name, 2, 1, self.input)?;
        check_shape(g, state.h, &self.name, 2, 1, self.hidden)?;
        let wx = g.param(store, &format!("{}.wx", self.name))?;
        let wh = g.param(store, &format!("{}.wh", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let hd = self.hidden;
        let a = g.matmul(x, wx);
        let r = g.matmul(state.h, wh);
        let z = g.add(a, r);
        let b = g.reshape(b, &[1, 4 * hd]);
        let z = g.add(z, b);
        let i = g.slice(z, 1, 0, hd);
        let f = g.slice(z, 1, hd, hd);
        let cc = g.slice(z, 1, 2 * hd, hd);
        let o = g.slice(z, 1, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cc);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        Ok(LstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new("id", 3, 3);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        store.insert("id.w", Tensor::new(&[3, 3], eye).unwrap()).unwrap();
        store.insert("id.b", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new("refine.fc", 4, 2);
        lin.register(&mut store, &Init::new(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 5]));
        let err = lin.forward(&mut g, &store, x).unwrap_err().to_string();
        assert!(err.contains("refine.fc"), "{err}");
    }

    #[test]
    fn transposed_conv_of_single_pixel_copies_kernel() {
        // 1×1 input of value 1 through a 5×5 kernel with no padding → the kernel.
        let kernel: Vec<f64> = (0..25).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut store = ParamStore::new();
        store.insert("t.w", Tensor::new(&[1, 1, 5, 5], kernel.clone()).unwrap()).unwrap();
        store.insert("t.b", Tensor::zeros(&[1])).unwrap();
        let layer = ConvTranspose2d::new("t", 1, 1, 5, 1, 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5]);
        assert_eq!(g.value(y).data(), &kernel[..]);
    }

    #[test]
    fn same_padding_preserves_grid() {
        let mut store = ParamStore::<f32>::new();
        let layer = ConvTranspose2d::same("d", 3, 4, 5);
        layer.register(&mut store, &Init::new(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 16, 12]));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 16, 12]);
    }
}
