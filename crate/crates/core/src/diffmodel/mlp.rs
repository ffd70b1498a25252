//! Multilayer perceptron kernels with hand-written reverse mode.
//!
//! Parameters live in one flat vector laid out layer by layer as
//! `W1, b1, W2, b2, ..., WL, bL, E`, where each `W` is row-major
//! `[out][in]` and `E` is the `[num_prompts][prompt_embed_dim]` prompt
//! embedding table.

use serde::{Deserialize, Serialize};

use crate::num::sigmoid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub num_prompts: usize,
    pub prompt_embed_dim: usize,
    /// Number of sinusoidal frequencies for the log-SNR embedding (two features each).
    pub time_freqs: usize,
}

impl Arch {
    /// Two SiLU layers of width 64, an 8-wide prompt embedding and 8 time frequencies.
    pub fn toy(dim: usize, num_prompts: usize) -> Self {
        Self {
            dim,
            hidden: vec![64, 64],
            num_prompts,
            prompt_embed_dim: 8,
            time_freqs: 8,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 2 * self.time_freqs + self.prompt_embed_dim
    }

    /// Widths of every layer boundary, input first and output last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn num_params(&self) -> usize {
        let w = self.widths();
        w.windows(2).map(|p| p[1] * p[0] + p[1]).sum::<usize>() + self.num_prompts * self.prompt_embed_dim
    }

    /// `(weight offset, bias offset, in, out)` for every layer.
    pub(crate) fn layers(&self) -> Vec<Layer> {
        let w = self.widths();
        let mut off = 0;
        w.windows(2)
            .map(|p| {
                let l = Layer {
                    w: off,
                    b: off + p[1] * p[0],
                    fan_in: p[0],
                    fan_out: p[1],
                };
                off = l.b + p[1];
                l
            })
            .collect()
    }

    pub(crate) fn embedding_offset(&self) -> usize {
        self.num_params() - self.num_prompts * self.prompt_embed_dim
    }

    pub(crate) fn frequencies(&self) -> Vec<f64> {
        let f = self.time_freqs;
        if f == 1 {
            return vec![1.0];
        }
        // Geometric ladder from 0.05 to 4 rad per unit of log-SNR.
        let (lo, hi) = (0.05f64.ln(), 4.0f64.ln());
        (0..f)
            .map(|k| (lo + (hi - lo) * k as f64 / (f - 1) as f64).exp())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[inline]
fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
fn silu_prime(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Reusable per-thread buffers: pre-activations and activations of every layer.
pub(crate) struct Workspace {
    layers: Vec<Layer>,
    freqs: Vec<f64>,
    emb_off: usize,
    emb_dim: usize,
    dim: usize,
    /// `acts[0]` is the network input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub out: Vec<f64>,
    grad_h: Vec<f64>,
    grad_a: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Arch) -> Self {
        let widths = arch.widths();
        let n = widths.len();
        let widest = *widths.iter().max().unwrap_or(&1);
        Self {
            layers: arch.layers(),
            freqs: arch.frequencies(),
            emb_off: arch.embedding_offset(),
            emb_dim: arch.prompt_embed_dim,
            dim: arch.dim,
            acts: widths[..n - 1].iter().map(|&w| vec![0.0; w]).collect(),
            pre: widths[1..n - 1].iter().map(|&w| vec![0.0; w]).collect(),
            out: vec![0.0; arch.dim],
            grad_h: vec![0.0; widest],
            grad_a: vec![0.0; widest],
        }
    }

    /// Forward pass; the result is left in `self.out`.
    pub fn forward(&mut self, theta: &[f64], xt: &[f64], prompt: usize, log_snr: f64) {
        let input = &mut self.acts[0];
        input[..self.dim].copy_from_slice(xt);
        let f = self.freqs.len();
        for (k, w) in self.freqs.iter().enumerate() {
            let (s, c) = (log_snr * w).sin_cos();
            input[self.dim + k] = s;
            input[self.dim + f + k] = c;
        }
        let e = self.emb_off + prompt * self.emb_dim;
        input[self.dim + 2 * f..].copy_from_slice(&theta[e..e + self.emb_dim]);

        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let h_in = &head[l];
            let out: &mut [f64] = if l == last {
                &mut self.out
            } else {
                &mut self.pre[l]
            };
            affine(theta, layer, h_in, out);
            if l != last {
                for (h, &a) in tail[0].iter_mut().zip(self.pre[l].iter()) {
                    *h = silu(a);
                }
            }
        }
    }

    /// Accumulates `d(<g_out, out>)/d theta` into `grad`, for the input most
    /// recently passed to [`Self::forward`].
    pub fn backward(&mut self, theta: &[f64], prompt: usize, g_out: &[f64], grad: &mut [f64]) {
        let last = self.layers.len() - 1;
        self.grad_a[..g_out.len()].copy_from_slice(g_out);
        for l in (0..=last).rev() {
            let layer = self.layers[l];
            let h_in = &self.acts[l];
            let ga = &self.grad_a[..layer.fan_out];
            for (o, &g) in ga.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                for (r, &h) in row.iter_mut().zip(h_in) {
                    *r += g * h;
                }
                grad[layer.b + o] += g;
            }
            // Gradient with respect to this layer's input.
            let gh = &mut self.grad_h[..layer.fan_in];
            gh.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in ga.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &theta[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                for (v, &w) in gh.iter_mut().zip(row) {
                    *v += g * w;
                }
            }
            if l > 0 {
                for ((a, &g), &z) in self.grad_a[..layer.fan_in]
                    .iter_mut()
                    .zip(self.grad_h.iter())
                    .zip(self.pre[l - 1].iter())
                {
                    *a = g * silu_prime(z);
                }
            }
        }
        // Only the prompt-embedding slice of the input is a parameter.
        let first = self.layers[0].fan_in;
        let e = self.emb_off + prompt * self.emb_dim;
        let g_emb = &self.grad_h[first - self.emb_dim..first];
        for (g, &v) in grad[e..e + self.emb_dim].iter_mut().zip(g_emb) {
            *g += v;
        }
    }
}

fn affine(theta: &[f64], layer: &Layer, h: &[f64], out: &mut [f64]) {
    for (o, y) in out.iter_mut().enumerate() {
        let row = &theta[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
        let mut acc = theta[layer.b + o];
        for (&w, &x) in row.iter().zip(h) {
            acc += w * x;
        }
        *y = acc;
    }
}
