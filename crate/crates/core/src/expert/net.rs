//! Small fully connected score network with hand-derived reverse-mode gradients.
//!
//! Input is the state vector concatenated with a fixed embedding of the normalized
//! noise level; hidden layers use the SiLU activation so the field stays C¹ in `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::Scalar;

/// Number of sinusoidal frequencies in the noise-level embedding.
pub const EMBED_FREQS: usize = 4;
/// Width of the embedding: the centred level plus a sine/cosine pair per frequency.
pub const EMBED_WIDTH: usize = 1 + 2 * EMBED_FREQS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    /// Offset of the `n_in x n_out` weight block (row per input).
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet<T> {
    dim: usize,
    hidden: Vec<usize>,
    layout: Vec<LayerLayout>,
    params: Vec<T>,
}

#[inline]
fn silu<T: Scalar>(x: T) -> (T, T) {
    let s = crate::scalar::logistic(x);
    (x * s, s * (T::one() + x * (T::one() - s)))
}

/// Embeds a noise level normalized to `[0, 1]` over the native range.
pub fn embed_level<T: Scalar>(level: T, out: &mut [T]) {
    let two = T::lit(2.0);
    out[0] = two * level - T::one();
    let mut freq = T::PI();
    for k in 0..EMBED_FREQS {
        let (s, c) = (freq * level).sin_cos();
        out[1 + 2 * k] = s;
        out[2 + 2 * k] = c;
        freq = freq * two;
    }
}

/// Forward activations kept for the backward pass.
pub struct Tape<T> {
    /// Input to each layer.
    inputs: Vec<Vec<T>>,
    /// SiLU derivative at each hidden pre-activation.
    dact: Vec<Vec<T>>,
}

impl<T: Scalar> ScoreNet<T> {
    pub fn layout_for(dim: usize, hidden: &[usize]) -> (Vec<LayerLayout>, usize) {
        let mut sizes = vec![dim + EMBED_WIDTH];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let mut off = 0;
        let layout = sizes
            .windows(2)
            .map(|w| {
                let l = LayerLayout { n_in: w[0], n_out: w[1], w_off: off, b_off: off + w[0] * w[1] };
                off += w[0] * w[1] + w[1];
                l
            })
            .collect();
        (layout, off)
    }

    pub fn zeros(dim: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        let (layout, n) = Self::layout_for(dim, hidden);
        Ok(Self { dim, hidden: hidden.to_vec(), layout, params: vec![T::zero(); n] })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dim, hidden)?;
        let mut r = rng::stream(seed, &[tag::INIT]);
        for l in net.layout.clone() {
            let scale = T::lit(1.0 / (l.n_in as f64).sqrt());
            for w in &mut net.params[l.w_off..l.w_off + l.n_in * l.n_out] {
                *w = scale * rng::normal::<T, _>(&mut r);
            }
        }
        Ok(net)
    }

    pub fn from_params(dim: usize, hidden: &[usize], params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(dim, hidden)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// All layer widths from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.layout[0].n_in];
        v.extend(self.layout.iter().map(|l| l.n_out));
        v
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    /// Parameters in declaration order: per layer, weights then biases.
    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn input(&self, z: &[T], level: T) -> Result<Vec<T>> {
        if z.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: z.len() });
        }
        let mut x = vec![T::zero(); self.dim + EMBED_WIDTH];
        x[..self.dim].copy_from_slice(z);
        embed_level(level, &mut x[self.dim..]);
        Ok(x)
    }

    fn affine(&self, l: &LayerLayout, x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.params[l.b_off..l.b_off + l.n_out]);
        let w = &self.params[l.w_off..l.w_off + l.n_in * l.n_out];
        for (xi, row) in x.iter().zip(w.chunks_exact(l.n_out)) {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += *xi * wij;
            }
        }
    }

    /// Raw network output at normalized level `level`.
    pub fn forward(&self, z: &[T], level: T, out: &mut [T]) -> Result<()> {
        let mut x = self.input(z, level)?;
        let last = self.layout.len() - 1;
        for (k, l) in self.layout.iter().enumerate() {
            let mut y = vec![T::zero(); l.n_out];
            self.affine(l, &x, &mut y);
            if k < last {
                y.iter_mut().for_each(|v| *v = silu(*v).0);
                x = y;
            } else {
                out.copy_from_slice(&y);
            }
        }
        Ok(())
    }

    pub fn forward_taped(&self, z: &[T], level: T, out: &mut [T]) -> Result<Tape<T>> {
        let mut x = self.input(z, level)?;
        let last = self.layout.len() - 1;
        let mut tape = Tape { inputs: Vec::with_capacity(self.layout.len()), dact: Vec::new() };
        for (k, l) in self.layout.iter().enumerate() {
            let mut y = vec![T::zero(); l.n_out];
            self.affine(l, &x, &mut y);
            if k < last {
                let mut d = vec![T::zero(); l.n_out];
                for (v, dv) in y.iter_mut().zip(d.iter_mut()) {
                    let (a, da) = silu(*v);
                    *v = a;
                    *dv = da;
                }
                tape.inputs.push(std::mem::replace(&mut x, y));
                tape.dact.push(d);
            } else {
                out.copy_from_slice(&y);
                tape.inputs.push(std::mem::take(&mut x));
            }
        }
        Ok(tape)
    }

    /// Reverse pass from an output cotangent.
    ///
    /// Returns the cotangent of the state input `z`; when `param_grad` is given the
    /// parameter gradient is accumulated into it.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_out: &[T],
        mut param_grad: Option<&mut [T]>,
        grad_z: &mut [T],
    ) {
        let last = self.layout.len() - 1;
        let mut g = grad_out.to_vec();
        for k in (0..self.layout.len()).rev() {
            let l = &self.layout[k];
            if k < last {
                for (gv, &d) in g.iter_mut().zip(&tape.dact[k]) {
                    *gv *= d;
                }
            }
            let x = &tape.inputs[k];
            if let Some(pg) = param_grad.as_deref_mut() {
                let gw = &mut pg[l.w_off..l.w_off + l.n_in * l.n_out];
                for (xi, row) in x.iter().zip(gw.chunks_exact_mut(l.n_out)) {
                    for (r, &gj) in row.iter_mut().zip(&g) {
                        *r += *xi * gj;
                    }
                }
                for (b, &gj) in pg[l.b_off..l.b_off + l.n_out].iter_mut().zip(&g) {
                    *b += gj;
                }
            }
            // Layer 0 only needs the state columns.
            let n_in = if k == 0 { self.dim } else { l.n_in };
            let w = &self.params[l.w_off..l.w_off + l.n_in * l.n_out];
            let mut gin = vec![T::zero(); n_in];
            for (gi, row) in gin.iter_mut().zip(w.chunks_exact(l.n_out)) {
                *gi = dot4(row, &g);
            }
            g = gin;
        }
        grad_z.copy_from_slice(&g);
    }

    /// Raw output plus `p^T (∂raw/∂z)` for each probe.
    pub fn forward_vjp(&self, z: &[T], level: T, probes: &[T], out: &mut [T], vjps: &mut [T]) -> Result<()> {
        let tape = self.forward_taped(z, level, out)?;
        let d = self.dim;
        for (p, v) in probes.chunks(d).zip(vjps.chunks_mut(d)) {
            self.backward(&tape, p, None, v);
        }
        Ok(())
    }

    /// Maps `n` inputs independently; rows of `zs` and `out` are length `dim`.
    pub fn forward_batch(&self, zs: &[T], levels: &[T], out: &mut [T]) -> Result<()> {
        let d = self.dim;
        if zs.len() != levels.len() * d {
            return Err(Error::Shape { expected: levels.len() * d, got: zs.len() });
        }
        for ((z, &lv), o) in zs.chunks(d).zip(levels).zip(out.chunks_mut(d)) {
            self.forward(z, lv, o)?;
        }
        Ok(())
    }
}

#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Uniform in `[-1, 1]`; used by tests that need random nets with large biases.
pub fn randomize_params<T: Scalar, R: Rng>(net: &mut ScoreNet<T>, scale: f64, r: &mut R) {
    for p in net.params_mut() {
        *p = T::lit(scale * (2.0 * r.random::<f64>() - 1.0));
    }
}
