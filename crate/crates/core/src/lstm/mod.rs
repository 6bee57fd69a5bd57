//! LSTM autoencoder: single-layer encoder and decoder, zero-input decoder
//! conditioned on the encoder's final state, reversed-order reconstruction.
//!
//! All parameters live in one flat `f64` vector described by [`Layout`], so
//! gradients, Adam moments and checkpoints share the same indexing.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, relative_error, Differentiable, GradCheck, LinearStub};
pub use train::{train, train_with, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DayVector, FEATURE_COUNT};
use crate::par::Execution;
use kernels::{axpy, dot, Kernels, Portable};

const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub hidden: usize,
    pub input: usize,
}

/// Offsets of one LSTM cell's blocks (input weights, recurrent weights, bias).
#[derive(Debug, Clone, Copy)]
struct CellOffsets {
    w_x: usize,
    w_h: usize,
    bias: usize,
}

impl Layout {
    pub fn new(hidden: usize) -> Self {
        Layout {
            hidden,
            input: FEATURE_COUNT,
        }
    }

    fn cell_len(&self) -> usize {
        let g = GATES * self.hidden;
        g * self.input + g * self.hidden + g
    }

    fn cell(&self, which: usize) -> CellOffsets {
        let g = GATES * self.hidden;
        let base = which * self.cell_len();
        CellOffsets {
            w_x: base,
            w_h: base + g * self.input,
            bias: base + g * self.input + g * self.hidden,
        }
    }

    fn encoder(&self) -> CellOffsets {
        self.cell(0)
    }

    fn decoder(&self) -> CellOffsets {
        self.cell(1)
    }

    /// Output projection weights, `input × hidden` row-major.
    pub fn out_w(&self) -> usize {
        2 * self.cell_len()
    }

    pub fn out_b(&self) -> usize {
        self.out_w() + self.input * self.hidden
    }

    pub fn len(&self) -> usize {
        self.out_b() + self.input
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named blocks in storage order: (name, offset, rows, cols).
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let g = GATES * self.hidden;
        let (e, d) = (self.encoder(), self.decoder());
        vec![
            ("encoder.w_x", e.w_x, g, self.input),
            ("encoder.w_h", e.w_h, g, self.hidden),
            ("encoder.bias", e.bias, g, 1),
            ("decoder.w_x", d.w_x, g, self.input),
            ("decoder.w_h", d.w_h, g, self.hidden),
            ("decoder.bias", d.bias, g, 1),
            ("output.weight", self.out_w(), self.input, self.hidden),
            ("output.bias", self.out_b(), self.input, 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmAutoencoder {
    layout: Layout,
    params: Vec<f64>,
    pub seed: u64,
    /// Anomaly threshold on reconstruction error, once selected.
    pub threshold: Option<f64>,
}

#[inline(always)]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Windows per chunk in batched forward/backward passes and gradient reduction.
const CHUNK: usize = 8;

/// Activations of one step for a batch of sequences, sequence-major.
#[derive(Debug, Clone, Default)]
struct StepCache {
    // i, f, g, o after their nonlinearities, `4 * hidden` per sequence.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Forward activations for a batch of equal-length sequences.
#[derive(Debug, Clone, Default)]
pub(crate) struct Trace {
    enc: Vec<StepCache>,
    dec: Vec<StepCache>,
    /// Reconstructions aligned with the inputs (day order), one per sequence.
    recon: Vec<Vec<DayVector>>,
}

/// Copy day `t` of every window into a sequence-major input buffer.
fn gather_inputs(windows: &[&[DayVector]], t: usize, x: &mut [f64]) {
    for (s, w) in windows.iter().enumerate() {
        x[s * FEATURE_COUNT..(s + 1) * FEATURE_COUNT].copy_from_slice(&w[t]);
    }
}

impl LstmAutoencoder {
    /// Parameters drawn uniformly from `[-1/sqrt(H), 1/sqrt(H)]`.
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let layout = Layout::new(hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..layout.len()).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(LstmAutoencoder {
            layout,
            params,
            seed,
            threshold: None,
        })
    }

    pub fn from_params(hidden: usize, params: Vec<f64>, seed: u64) -> Result<Self> {
        let layout = Layout::new(hidden);
        if hidden == 0 || params.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters for hidden size {hidden}, got {}",
                layout.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        Ok(LstmAutoencoder {
            layout,
            params,
            seed,
            threshold: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Encoder input weights of one gate, `hidden × input` row-major.
    pub fn encoder_input_weights(&self, gate: Gate) -> (&[f64], (usize, usize)) {
        let (h, i) = (self.layout.hidden, self.layout.input);
        let start = self.layout.encoder().w_x + gate as usize * h * i;
        (&self.params[start..start + h * i], (h, i))
    }

    pub fn output_bias(&self) -> &[f64] {
        let o = self.layout.out_b();
        &self.params[o..o + self.layout.input]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let o = self.layout.out_b();
        let n = self.layout.input;
        &mut self.params[o..o + n]
    }

    /// One cell step for `b` sequences at once. Each weight row is applied to
    /// every sequence before moving on; each dot product keeps the
    /// single-sequence summation order, so results do not depend on `b`.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn cell_step<K: Kernels>(
        &self,
        cell: CellOffsets,
        b: usize,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        z: &mut [f64],
        out: &mut StepCache,
    ) {
        let (hd, inp) = (self.layout.hidden, self.layout.input);
        let g4 = GATES * hd;
        let p = &self.params;
        for r in 0..g4 {
            let wx = &p[cell.w_x + r * inp..cell.w_x + (r + 1) * inp];
            let wh = &p[cell.w_h + r * hd..cell.w_h + (r + 1) * hd];
            let bias = p[cell.bias + r];
            let mut s = 0;
            while s + 4 <= b {
                let hs = [0, 1, 2, 3].map(|q| &h_prev[(s + q) * hd..(s + q + 1) * hd]);
                let dh = K::dot4(wh, hs);
                for q in 0..4 {
                    z[(s + q) * g4 + r] = bias + dot(wx, &x[(s + q) * inp..(s + q + 1) * inp]) + dh[q];
                }
                s += 4;
            }
            for s in s..b {
                z[s * g4 + r] = bias + dot(wx, &x[s * inp..(s + 1) * inp]) + dot(wh, &h_prev[s * hd..(s + 1) * hd]);
            }
        }
        out.gates.resize(b * g4, 0.0);
        out.c.resize(b * hd, 0.0);
        out.tanh_c.resize(b * hd, 0.0);
        out.h.resize(b * hd, 0.0);
        for s in 0..b {
            let zs = &z[s * g4..(s + 1) * g4];
            let gates = &mut out.gates[s * g4..(s + 1) * g4];
            for j in 0..hd {
                let i = sigmoid(zs[j]);
                let f = sigmoid(zs[hd + j]);
                let g = zs[2 * hd + j].tanh();
                let o = sigmoid(zs[3 * hd + j]);
                gates[j] = i;
                gates[hd + j] = f;
                gates[2 * hd + j] = g;
                gates[3 * hd + j] = o;
                let c = f * c_prev[s * hd + j] + i * g;
                let tc = c.tanh();
                out.c[s * hd + j] = c;
                out.tanh_c[s * hd + j] = tc;
                out.h[s * hd + j] = o * tc;
            }
        }
    }

    #[inline(always)]
    fn project(&self, h: &[f64]) -> DayVector {
        let (hd, inp) = (self.layout.hidden, self.layout.input);
        let (ow, ob) = (self.layout.out_w(), self.layout.out_b());
        let mut y = [0.0; FEATURE_COUNT];
        for (f, yf) in y.iter_mut().enumerate().take(inp) {
            *yf = self.params[ob + f] + dot(&self.params[ow + f * hd..ow + (f + 1) * hd], h);
        }
        y
    }

    /// Forward pass over equal-length windows.
    pub(crate) fn trace(&self, windows: &[&[DayVector]]) -> Trace {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.trace_avx2(windows) };
        }
        self.trace_impl::<Portable>(windows)
    }

    /// Same code built with AVX2 enabled; see [`kernels`] for why results
    /// match the portable build bit for bit.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn trace_avx2(&self, windows: &[&[DayVector]]) -> Trace {
        self.trace_impl::<kernels::Avx2>(windows)
    }

    #[inline(always)]
    fn trace_impl<K: Kernels>(&self, windows: &[&[DayVector]]) -> Trace {
        let hd = self.layout.hidden;
        let b = windows.len();
        let t_len = windows.first().map_or(0, |w| w.len());
        debug_assert!(windows.iter().all(|w| w.len() == t_len));
        let mut z = vec![0.0; b * GATES * hd];
        let zeros_h = vec![0.0; b * hd];
        let zero_x = vec![0.0; b * FEATURE_COUNT];
        let mut x = vec![0.0; b * FEATURE_COUNT];
        let mut enc: Vec<StepCache> = vec![StepCache::default(); t_len];
        for t in 0..t_len {
            gather_inputs(windows, t, &mut x);
            let (before, rest) = enc.split_at_mut(t);
            let (h_prev, c_prev) = match before.last() {
                Some(s) => (s.h.as_slice(), s.c.as_slice()),
                None => (zeros_h.as_slice(), zeros_h.as_slice()),
            };
            self.cell_step::<K>(self.layout.encoder(), b, &x, h_prev, c_prev, &mut z, &mut rest[0]);
        }
        let mut dec: Vec<StepCache> = vec![StepCache::default(); t_len];
        let mut recon = vec![vec![[0.0; FEATURE_COUNT]; t_len]; b];
        for k in 0..t_len {
            let (before, rest) = dec.split_at_mut(k);
            let (h_prev, c_prev) = match before.last() {
                Some(s) => (s.h.as_slice(), s.c.as_slice()),
                None => match enc.last() {
                    Some(s) => (s.h.as_slice(), s.c.as_slice()),
                    None => (zeros_h.as_slice(), zeros_h.as_slice()),
                },
            };
            self.cell_step::<K>(self.layout.decoder(), b, &zero_x, h_prev, c_prev, &mut z, &mut rest[0]);
            for (s, r) in recon.iter_mut().enumerate() {
                r[t_len - 1 - k] = self.project(&rest[0].h[s * hd..(s + 1) * hd]);
            }
        }
        Trace { enc, dec, recon }
    }

    /// Reconstruction aligned day-for-day with the input.
    pub fn reconstruct(&self, window: &[DayVector]) -> Result<Vec<DayVector>> {
        check_finite(window)?;
        Ok(self.trace(&[window]).recon.swap_remove(0))
    }

    /// Mean squared error over all cells of the window.
    pub fn reconstruction_error(&self, window: &[DayVector]) -> Result<f64> {
        check_finite(window)?;
        Ok(self.error_unchecked(window))
    }

    pub(crate) fn error_unchecked(&self, window: &[DayVector]) -> f64 {
        let recon = self.trace(&[window]).recon.swap_remove(0);
        mse(window, &recon)
    }

    /// Errors of windows that may differ in length, batching runs of equal length.
    fn chunk_errors(&self, chunk: &[&[DayVector]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(chunk.len());
        for run in chunk.chunk_by(|a, b| a.len() == b.len()) {
            let trace = self.trace(run);
            out.extend(run.iter().zip(&trace.recon).map(|(w, r)| mse(w, r)));
        }
        out
    }

    pub(crate) fn errors_unchecked(&self, windows: &[&[DayVector]], exec: Execution) -> Vec<f64> {
        let chunks: Vec<&[&[DayVector]]> = windows.chunks(CHUNK).collect();
        exec.map(&chunks, |c| self.chunk_errors(c)).into_iter().flatten().collect()
    }

    /// Reconstruction errors for many windows, in input order.
    pub fn score_windows<W>(&self, windows: &[W], exec: Execution) -> Result<Vec<f64>>
    where
        W: AsRef<[DayVector]> + Sync,
    {
        for w in windows {
            check_finite(w.as_ref())?;
        }
        let refs: Vec<&[DayVector]> = windows.iter().map(|w| w.as_ref()).collect();
        Ok(self.errors_unchecked(&refs, exec))
    }

    /// Accumulate the gradient of `scale * sum_cells (recon - x)^2` over
    /// equal-length windows into `grad` and return the sum of their mean
    /// squared errors.
    pub(crate) fn accumulate_grad(&self, windows: &[&[DayVector]], scale: f64, grad: &mut [f64]) -> f64 {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.accumulate_grad_avx2(windows, scale, grad) };
        }
        self.accumulate_grad_impl::<Portable>(windows, scale, grad)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_grad_avx2(&self, windows: &[&[DayVector]], scale: f64, grad: &mut [f64]) -> f64 {
        self.accumulate_grad_impl::<kernels::Avx2>(windows, scale, grad)
    }

    #[inline(always)]
    fn accumulate_grad_impl<K: Kernels>(&self, windows: &[&[DayVector]], scale: f64, grad: &mut [f64]) -> f64 {
        let hd = self.layout.hidden;
        let inp = self.layout.input;
        let b = windows.len();
        let t_len = windows.first().map_or(0, |w| w.len());
        let trace = self.trace_impl::<K>(windows);
        let (ow, ob) = (self.layout.out_w(), self.layout.out_b());

        let mut dh = vec![0.0; b * hd];
        let mut dc = vec![0.0; b * hd];
        let mut dz = vec![0.0; b * GATES * hd];
        let zeros_h = vec![0.0; b * hd];
        let zero_x = vec![0.0; b * inp];
        let mut x = vec![0.0; b * inp];

        // Decoder, last step first. Step k reconstructs day t_len - 1 - k.
        for k in (0..t_len).rev() {
            let step = &trace.dec[k];
            let day = t_len - 1 - k;
            for s in 0..b {
                let target = &windows[s][day];
                let y = &trace.recon[s][day];
                let hs = &step.h[s * hd..(s + 1) * hd];
                let dhs = &mut dh[s * hd..(s + 1) * hd];
                for f in 0..inp {
                    let dy = 2.0 * (y[f] - target[f]) * scale;
                    grad[ob + f] += dy;
                    axpy(dy, hs, &mut grad[ow + f * hd..ow + (f + 1) * hd]);
                    axpy(dy, &self.params[ow + f * hd..ow + (f + 1) * hd], dhs);
                }
            }
            let (h_prev, c_prev) = if k > 0 {
                (trace.dec[k - 1].h.as_slice(), trace.dec[k - 1].c.as_slice())
            } else {
                match trace.enc.last() {
                    Some(s) => (s.h.as_slice(), s.c.as_slice()),
                    None => (zeros_h.as_slice(), zeros_h.as_slice()),
                }
            };
            self.cell_backward::<K>(self.layout.decoder(), b, step, &zero_x, h_prev, c_prev, &mut dh, &mut dc, &mut dz, grad);
        }

        // Encoder receives gradient only through its final state.
        for t in (0..t_len).rev() {
            gather_inputs(windows, t, &mut x);
            let step = &trace.enc[t];
            let (h_prev, c_prev) = if t > 0 {
                (trace.enc[t - 1].h.as_slice(), trace.enc[t - 1].c.as_slice())
            } else {
                (zeros_h.as_slice(), zeros_h.as_slice())
            };
            self.cell_backward::<K>(self.layout.encoder(), b, step, &x, h_prev, c_prev, &mut dh, &mut dc, &mut dz, grad);
        }

        windows.iter().zip(&trace.recon).map(|(w, r)| mse(w, r)).sum()
    }

    /// Backward through one cell step for `b` sequences. On entry `dh`/`dc`
    /// hold the gradient w.r.t. this step's outputs; on exit, w.r.t. its
    /// incoming state.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn cell_backward<K: Kernels>(
        &self,
        cell: CellOffsets,
        b: usize,
        step: &StepCache,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        dh: &mut [f64],
        dc: &mut [f64],
        dz: &mut [f64],
        grad: &mut [f64],
    ) {
        let hd = self.layout.hidden;
        let inp = self.layout.input;
        let g4 = GATES * hd;
        for s in 0..b {
            let gates = &step.gates[s * g4..(s + 1) * g4];
            let dzs = &mut dz[s * g4..(s + 1) * g4];
            for j in 0..hd {
                let q = s * hd + j;
                let i = gates[j];
                let f = gates[hd + j];
                let g = gates[2 * hd + j];
                let o = gates[3 * hd + j];
                let tc = step.tanh_c[q];
                let d_o = dh[q] * tc;
                let dct = dc[q] + dh[q] * o * (1.0 - tc * tc);
                let d_i = dct * g;
                let d_g = dct * i;
                let d_f = dct * c_prev[q];
                dc[q] = dct * f;
                dzs[j] = d_i * i * (1.0 - i);
                dzs[hd + j] = d_f * f * (1.0 - f);
                dzs[2 * hd + j] = d_g * (1.0 - g * g);
                dzs[3 * hd + j] = d_o * o * (1.0 - o);
            }
        }
        for r in 0..g4 {
            let mut d_bias = 0.0;
            let gx = cell.w_x + r * inp;
            for s in 0..b {
                let d = dz[s * g4 + r];
                d_bias += d;
                axpy(d, &x[s * inp..(s + 1) * inp], &mut grad[gx..gx + inp]);
            }
            grad[cell.bias + r] += d_bias;
            let gh = &mut grad[cell.w_h + r * hd..cell.w_h + (r + 1) * hd];
            let mut s = 0;
            while s + 4 <= b {
                let d = [0, 1, 2, 3].map(|q| dz[(s + q) * g4 + r]);
                let h = [0, 1, 2, 3].map(|q| &h_prev[(s + q) * hd..(s + q + 1) * hd]);
                K::axpy4(d, h, gh);
                s += 4;
            }
            for s in s..b {
                axpy(dz[s * g4 + r], &h_prev[s * hd..(s + 1) * hd], gh);
            }
        }
        // dh_prev = W_h^T dz, four weight rows per pass.
        dh.fill(0.0);
        let w_h = &self.params[cell.w_h..cell.w_h + g4 * hd];
        for r in (0..g4).step_by(4) {
            let w = [0, 1, 2, 3].map(|q| &w_h[(r + q) * hd..(r + q + 1) * hd]);
            for s in 0..b {
                let d = [0, 1, 2, 3].map(|q| dz[s * g4 + r + q]);
                K::axpy4(d, w, &mut dh[s * hd..(s + 1) * hd]);
            }
        }
    }

    /// Gradient of the mean batch reconstruction error, and that error.
    pub fn backprop_grads<W>(&self, batch: &[W], exec: Execution) -> Result<(f64, Vec<f64>)>
    where
        W: AsRef<[DayVector]> + Sync,
    {
        if batch.is_empty() {
            return Err(Error::InvalidInput("gradient of an empty batch".into()));
        }
        for w in batch {
            check_finite(w.as_ref())?;
        }
        Ok(self.batch_grad_unchecked(batch, exec))
    }

    /// Windows are processed in fixed-size chunks whose partial gradients are
    /// summed in chunk order, so the result does not depend on thread count.
    pub(crate) fn batch_grad_unchecked<W>(&self, batch: &[W], exec: Execution) -> (f64, Vec<f64>)
    where
        W: AsRef<[DayVector]> + Sync,
    {
        let n = batch.len();
        let refs: Vec<&[DayVector]> = batch.iter().map(|w| w.as_ref()).collect();
        let chunks: Vec<&[&[DayVector]]> = refs.chunks(CHUNK).collect();
        let partials = exec.map(&chunks, |chunk| {
            let mut g = vec![0.0; self.layout.len()];
            let mut loss = 0.0;
            for run in chunk.chunk_by(|a, b| a.len() == b.len()) {
                let scale = 1.0 / (n * run[0].len() * FEATURE_COUNT) as f64;
                loss += self.accumulate_grad(run, scale, &mut g);
            }
            (loss, g)
        });
        let mut total = vec![0.0; self.layout.len()];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            axpy(1.0, &g, &mut total);
        }
        (loss / n as f64, total)
    }
}

pub(crate) fn mse(a: &[DayVector], b: &[DayVector]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        for f in 0..FEATURE_COUNT {
            let d = x[f] - y[f];
            s += d * d;
        }
    }
    s / (a.len() * FEATURE_COUNT) as f64
}

fn check_finite(window: &[DayVector]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::InvalidInput("empty window".into()));
    }
    if window.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("window contains a non-finite value".into()));
    }
    Ok(())
}
