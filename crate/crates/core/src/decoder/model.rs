//! Forward pass, cached activations and hand-written reverse pass.

use num_traits::Float;

use super::params::{ConvLayout, DecoderParameters, Layout};
use crate::error::{Error, Result};
use crate::signal::{Envelope, MultichannelSignal};

/// Element type the decoder computes in. Parameters are always stored as f64.
pub trait Scalar:
    Float + std::ops::AddAssign + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
    fn of(v: f64) -> Self;
    fn to(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to(self) -> f64 {
        self
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Z-scores each row of a `rows x len` block in place (`eps` added to the
/// standard deviation).
pub fn normalize_segment<T: Scalar>(data: &mut [T], len: usize) {
    let eps = T::of(1e-8);
    let n = T::of(len as f64);
    for row in data.chunks_exact_mut(len) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let scale = T::one() / (var.sqrt() + eps);
        row.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
}

/// Per-row cosine similarity across time between two `width x len` blocks.
/// Rows with zero norm map to 0.
pub fn cosine_over_time<T: Scalar>(a: &[T], b: &[T], len: usize) -> Vec<T> {
    a.chunks_exact(len)
        .zip(b.chunks_exact(len))
        .map(|(x, y)| {
            let nx = dot(x, x).sqrt();
            let ny = dot(y, y).sqrt();
            if nx == T::zero() || ny == T::zero() {
                T::zero()
            } else {
                dot(x, y) / (nx * ny)
            }
        })
        .collect()
}

fn conv_forward<T: Scalar>(w: &[T], layer: &ConvLayout, input: &[T], in_len: usize) -> Vec<T> {
    let out_len = in_len - layer.span();
    let mut out = vec![T::zero(); layer.out_w * out_len];
    for o in 0..layer.out_w {
        let row = &mut out[o * out_len..(o + 1) * out_len];
        row.iter_mut().for_each(|v| *v = w[layer.bias + o]);
        for i in 0..layer.in_w {
            let x = &input[i * in_len..(i + 1) * in_len];
            for k in 0..layer.kernel {
                let wk = w[layer.weight + (o * layer.in_w + i) * layer.kernel + k];
                let off = k * layer.dilation;
                axpy(wk, &x[off..off + out_len], row);
            }
        }
        row.iter_mut().for_each(|v| *v = v.max(T::zero()));
    }
    out
}

/// Backpropagates through ReLU + conv. `grad_out` is w.r.t. the post-ReLU
/// output and is masked in place. Returns the gradient w.r.t. the input when
/// requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    w: &[T],
    layer: &ConvLayout,
    input: &[T],
    in_len: usize,
    output: &[T],
    grad_out: &mut [T],
    grad: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let out_len = in_len - layer.span();
    for (g, &y) in grad_out.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    let mut grad_in = want_input_grad.then(|| vec![T::zero(); layer.in_w * in_len]);
    for o in 0..layer.out_w {
        let g = &grad_out[o * out_len..(o + 1) * out_len];
        grad[layer.bias + o] += g.iter().copied().sum::<T>();
        for i in 0..layer.in_w {
            let x = &input[i * in_len..(i + 1) * in_len];
            for k in 0..layer.kernel {
                let idx = layer.weight + (o * layer.in_w + i) * layer.kernel + k;
                let off = k * layer.dilation;
                grad[idx] += dot(g, &x[off..off + out_len]);
                if let Some(gi) = grad_in.as_mut() {
                    axpy(
                        w[idx],
                        g,
                        &mut gi[i * in_len + off..i * in_len + off + out_len],
                    );
                }
            }
        }
    }
    grad_in
}

/// Activations kept from a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub samples: usize,
    pub projected: Vec<T>,
    pub eeg_acts: Vec<Vec<T>>,
    pub stim_acts: Vec<Vec<T>>,
    pub cosines: Vec<T>,
    pub logit: T,
}

/// One labelled (EEG segment, envelope segment) pairing. Inputs are already
/// normalized; EEG is `channels x samples` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub eeg: Vec<T>,
    pub envelope: Vec<T>,
    pub label: bool,
}

/// Decoder parameters cast to the compute precision.
#[derive(Debug, Clone)]
pub struct DecoderModel<T> {
    pub weights: Vec<T>,
    pub layout: Layout,
    pub channels: usize,
    pub spatial_width: usize,
    receptive_field: usize,
}

impl<T: Scalar> DecoderModel<T> {
    pub fn new(params: &DecoderParameters) -> Self {
        Self {
            weights: params.values.iter().map(|&v| T::of(v)).collect(),
            layout: params.layout(),
            channels: params.architecture.channels,
            spatial_width: params.architecture.spatial_width,
            receptive_field: params.architecture.receptive_field(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, eeg: &[T], envelope: &[T]) -> Result<usize> {
        let samples = envelope.len();
        if eeg.len() != self.channels * samples {
            return Err(Error::Shape(format!(
                "EEG block has {} values, expected {} channels x {samples} samples",
                eeg.len(),
                self.channels
            )));
        }
        if samples < self.receptive_field {
            return Err(Error::Shape(format!(
                "segment of {samples} samples is shorter than the receptive field {}",
                self.receptive_field
            )));
        }
        Ok(samples)
    }

    fn project(&self, eeg: &[T], samples: usize) -> Vec<T> {
        let w = &self.weights;
        let s = self.spatial_width;
        let mut projected = vec![T::zero(); s * samples];
        for c in 0..self.channels {
            let x = &eeg[c * samples..(c + 1) * samples];
            for j in 0..s {
                axpy(
                    w[self.layout.spatial + c * s + j],
                    x,
                    &mut projected[j * samples..(j + 1) * samples],
                );
            }
        }
        projected
    }

    fn branch(&self, layers: &[ConvLayout], input: &[T], samples: usize) -> (Vec<Vec<T>>, usize) {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len());
        let mut len = samples;
        for layer in layers {
            let x = acts.last().map_or(input, Vec::as_slice);
            let y = conv_forward(&self.weights, layer, x, len);
            len -= layer.span();
            acts.push(y);
        }
        (acts, len)
    }

    fn readout(&self, cosines: &[T]) -> T {
        let w = &self.weights;
        w[self.layout.readout_b]
            + cosines
                .iter()
                .enumerate()
                .map(|(r, &c)| w[self.layout.readout_w + r] * c)
                .sum::<T>()
    }

    /// Final EEG-branch activations (`width x out_len`) for a normalized
    /// `channels x samples` block.
    pub fn eeg_features(&self, eeg: &[T], samples: usize) -> Result<Vec<T>> {
        if eeg.len() != self.channels * samples || samples < self.receptive_field {
            return Err(Error::Shape(format!(
                "EEG block of {} values does not hold {} channels x {samples} samples (minimum {})",
                eeg.len(),
                self.channels,
                self.receptive_field
            )));
        }
        let projected = self.project(eeg, samples);
        Ok(self
            .branch(&self.layout.eeg, &projected, samples)
            .0
            .pop()
            .expect("layers"))
    }

    /// Final stimulus-branch activations for a normalized envelope.
    pub fn stimulus_features(&self, envelope: &[T]) -> Result<Vec<T>> {
        if envelope.len() < self.receptive_field {
            return Err(Error::Shape(format!(
                "segment of {} samples is shorter than the receptive field {}",
                envelope.len(),
                self.receptive_field
            )));
        }
        Ok(self
            .branch(&self.layout.stim, envelope, envelope.len())
            .0
            .pop()
            .expect("layers"))
    }

    /// Logit from precomputed branch features of equal shape.
    pub fn logit_from_features(&self, eeg_features: &[T], stimulus_features: &[T]) -> T {
        let width = self.layout.eeg.last().expect("layers").out_w;
        let out_len = eeg_features.len() / width;
        self.readout(&cosine_over_time(eeg_features, stimulus_features, out_len))
    }

    pub fn forward_cached(&self, eeg: &[T], envelope: &[T]) -> Result<ForwardCache<T>> {
        let samples = self.check(eeg, envelope)?;
        let projected = self.project(eeg, samples);
        let (eeg_acts, out_len) = self.branch(&self.layout.eeg, &projected, samples);
        let (stim_acts, _) = self.branch(&self.layout.stim, envelope, samples);
        let cosines = cosine_over_time(
            eeg_acts.last().expect("layers"),
            stim_acts.last().expect("layers"),
            out_len,
        );
        let logit = self.readout(&cosines);
        Ok(ForwardCache {
            samples,
            projected,
            eeg_acts,
            stim_acts,
            cosines,
            logit,
        })
    }

    pub fn logit(&self, eeg: &[T], envelope: &[T]) -> Result<T> {
        Ok(self.forward_cached(eeg, envelope)?.logit)
    }

    /// Adds `d(loss)/d(params)` for one example to `grad` (scaled by
    /// `scale`) and returns the unscaled binary cross-entropy and the logit.
    pub fn accumulate_gradient(
        &self,
        example: &Example<T>,
        scale: T,
        grad: &mut [T],
    ) -> Result<(T, T)> {
        let cache = self.forward_cached(&example.eeg, &example.envelope)?;
        let z = cache.logit;
        let y = if example.label { T::one() } else { T::zero() };
        // softplus(z) - y z, evaluated stably
        let loss = z.max(T::zero()) + (-z.abs()).exp().ln_1p() - y * z;
        let sigmoid = T::one() / (T::one() + (-z).exp());
        let dz = (sigmoid - y) * scale;
        self.backprop(&cache, &example.eeg, &example.envelope, dz, grad);
        Ok((loss, z))
    }

    fn backprop(&self, cache: &ForwardCache<T>, eeg: &[T], envelope: &[T], dz: T, grad: &mut [T]) {
        let w = &self.weights;
        let layout = &self.layout;
        let samples = cache.samples;
        grad[layout.readout_b] += dz;
        let out_len = samples - layout.eeg.iter().map(ConvLayout::span).sum::<usize>();
        let a_last = cache.eeg_acts.last().expect("layers");
        let b_last = cache.stim_acts.last().expect("layers");
        let width = cache.cosines.len();
        let mut ga = vec![T::zero(); width * out_len];
        let mut gb = vec![T::zero(); width * out_len];
        for r in 0..width {
            grad[layout.readout_w + r] += dz * cache.cosines[r];
            let dc = dz * w[layout.readout_w + r];
            let a = &a_last[r * out_len..(r + 1) * out_len];
            let b = &b_last[r * out_len..(r + 1) * out_len];
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == T::zero() || nb == T::zero() {
                continue;
            }
            let cos = cache.cosines[r];
            let inv = T::one() / (na * nb);
            let ca = cos / (na * na);
            let cb = cos / (nb * nb);
            let (gar, gbr) = (
                &mut ga[r * out_len..(r + 1) * out_len],
                &mut gb[r * out_len..(r + 1) * out_len],
            );
            for t in 0..out_len {
                gar[t] = dc * (b[t] * inv - a[t] * ca);
                gbr[t] = dc * (a[t] * inv - b[t] * cb);
            }
        }

        // Stimulus branch: no gradient is needed w.r.t. the envelope itself.
        let mut g = gb;
        for l in (0..layout.stim.len()).rev() {
            let input = if l == 0 {
                envelope
            } else {
                &cache.stim_acts[l - 1]
            };
            let in_len = out_len + layout.stim[l..].iter().map(ConvLayout::span).sum::<usize>();
            match conv_backward(
                w,
                &layout.stim[l],
                input,
                in_len,
                &cache.stim_acts[l],
                &mut g,
                grad,
                l > 0,
            ) {
                Some(next) => g = next,
                None => break,
            }
        }

        let mut g = ga;
        for l in (0..layout.eeg.len()).rev() {
            let input = if l == 0 {
                &cache.projected
            } else {
                &cache.eeg_acts[l - 1]
            };
            let in_len = out_len + layout.eeg[l..].iter().map(ConvLayout::span).sum::<usize>();
            g = conv_backward(
                w,
                &layout.eeg[l],
                input,
                in_len,
                &cache.eeg_acts[l],
                &mut g,
                grad,
                true,
            )
            .expect("input gradient requested");
        }
        let s = self.spatial_width;
        for c in 0..self.channels {
            let x = &eeg[c * samples..(c + 1) * samples];
            for j in 0..s {
                grad[layout.spatial + c * s + j] += dot(&g[j * samples..(j + 1) * samples], x);
            }
        }
    }

    /// Mean binary cross-entropy over `batch` and its exact gradient.
    pub fn batch_gradient(
        &self,
        batch: &[Example<T>],
        exec: crate::Execution,
    ) -> Result<BatchGradient<T>> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let scale = T::one() / T::of(batch.len() as f64);
        let n = self.num_params();
        // Per-example gradients are reduced in batch order so the result does
        // not depend on the thread count.
        let parts = exec.map(batch, |ex| {
            let mut g = vec![T::zero(); n];
            self.accumulate_gradient(ex, scale, &mut g)
                .map(|out| (g, out))
        });
        let mut grad = vec![T::zero(); n];
        let mut loss = T::zero();
        let mut logits = Vec::with_capacity(batch.len());
        for part in parts {
            let (g, (l, z)) = part?;
            grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            loss += l;
            logits.push(z);
        }
        Ok(BatchGradient {
            grad,
            loss: loss * scale,
            logits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradient<T> {
    pub grad: Vec<T>,
    pub loss: T,
    pub logits: Vec<T>,
}

/// Logit for one pairing given signals at the decoder's rate. Inputs are
/// z-scored per channel before the pass.
pub fn forward(
    params: &DecoderParameters,
    eeg: &MultichannelSignal,
    envelope: &Envelope,
) -> Result<f64> {
    for rate in [eeg.rate_hz(), envelope.rate_hz()] {
        if (rate - params.rate_hz).abs() > 1e-9 {
            return Err(Error::RateMismatch {
                expected: params.rate_hz,
                found: rate,
            });
        }
    }
    if eeg.samples() != envelope.samples() || eeg.channels() != params.architecture.channels {
        return Err(Error::Shape(format!(
            "EEG {}x{} vs envelope {} for a {}-channel decoder",
            eeg.channels(),
            eeg.samples(),
            envelope.samples(),
            params.architecture.channels
        )));
    }
    let mut x = eeg.as_slice().to_vec();
    normalize_segment(&mut x, eeg.samples());
    let mut e = envelope.as_slice().to_vec();
    normalize_segment(&mut e, envelope.samples());
    DecoderModel::<f64>::new(params).logit(&x, &e)
}

/// Exact gradient of the mean binary cross-entropy over a batch, in f64.
pub fn backward(params: &DecoderParameters, batch: &[Example<f64>]) -> Result<(Vec<f64>, f64)> {
    let out =
        DecoderModel::<f64>::new(params).batch_gradient(batch, crate::Execution::Sequential)?;
    Ok((out.grad, out.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{init_params, Architecture};
    use crate::Band;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> DecoderParameters {
        init_params(seed, Band::Lf, Architecture::with_channels(4), 64.0).unwrap()
    }

    fn random_example(
        rng: &mut ChaCha8Rng,
        channels: usize,
        t: usize,
        label: bool,
    ) -> Example<f64> {
        let mut eeg: Vec<f64> = (0..channels * t)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut envelope: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
        normalize_segment(&mut eeg, t);
        normalize_segment(&mut envelope, t);
        Example {
            eeg,
            envelope,
            label,
        }
    }

    #[test]
    fn zero_inputs_give_readout_bias() {
        let mut p = small(1);
        p.set_readout_bias(0.37);
        let model = DecoderModel::<f64>::new(&p);
        assert_eq!(model.logit(&vec![0.0; 4 * 40], &[0.0; 40]).unwrap(), 0.37);
    }

    #[test]
    fn cosine_cases() {
        let a: Vec<f64> = vec![1.0, 2.0, -3.0, 0.0, 0.0, 0.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let same = cosine_over_time(&a, &a, 3);
        assert!((same[0] - 1.0).abs() < 1e-15, "{same:?}");
        assert_eq!(same[1], 0.0);
        assert!((cosine_over_time(&a, &neg, 3)[0] + 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = cosine_over_time(&x, &y, 25);
        for r in 0..2 {
            let (u, v) = (&x[r * 25..(r + 1) * 25], &y[r * 25..(r + 1) * 25]);
            let d: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
            let nu: f64 = u.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!((got[r] - d / (nu * nv)).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_permutation_with_permuted_projection() {
        let p = small(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ex = random_example(&mut rng, 4, 48, true);
        let perm = [2usize, 0, 3, 1];
        let mut eeg = vec![0.0; ex.eeg.len()];
        let mut q = p.clone();
        let layout = p.layout();
        let s = p.architecture.spatial_width;
        for (new, &old) in perm.iter().enumerate() {
            eeg[new * 48..(new + 1) * 48].copy_from_slice(&ex.eeg[old * 48..(old + 1) * 48]);
            for j in 0..s {
                q.values[layout.spatial + new * s + j] = p.values[layout.spatial + old * s + j];
            }
        }
        let a = DecoderModel::<f64>::new(&p)
            .logit(&ex.eeg, &ex.envelope)
            .unwrap();
        let b = DecoderModel::<f64>::new(&q)
            .logit(&eeg, &ex.envelope)
            .unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = small(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..3)
            .map(|i| random_example(&mut rng, 4, 40, i % 2 == 0))
            .collect();
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (g1, l1) = backward(&p, &batch).unwrap();
        let (g2, l2) = backward(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn flipped_label_shifts_logit_gradient_by_one() {
        let p = small(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = random_example(&mut rng, 4, 40, true);
        let neg = Example {
            label: false,
            ..pos.clone()
        };
        let z = DecoderModel::<f64>::new(&p)
            .logit(&pos.eeg, &pos.envelope)
            .unwrap();
        let sigma = 1.0 / (1.0 + (-z).exp());
        let b = p.layout().readout_b;
        let (gp, _) = backward(&p, &[pos]).unwrap();
        let (gn, _) = backward(&p, &[neg]).unwrap();
        assert!((gp[b] - (sigma - 1.0)).abs() < 1e-12);
        assert!((gn[b] - sigma).abs() < 1e-12);
    }

    #[test]
    fn initial_loss_near_ln2() {
        for seed in 0..50 {
            let p = small(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let batch: Vec<_> = (0..16)
                .map(|_| {
                    let label = rng.random_bool(0.5);
                    random_example(&mut rng, 4, 40, label)
                })
                .collect();
            let (_, loss) = backward(&p, &batch).unwrap();
            assert!((loss - 2f64.ln()).abs() < 0.1, "seed {seed}: {loss}");
        }
    }

    #[test]
    fn feature_path_matches_full_forward() {
        let p = small(8);
        let model = DecoderModel::<f64>::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = random_example(&mut rng, 4, 64, true);
        let a = model.eeg_features(&ex.eeg, 64).unwrap();
        let b = model.stimulus_features(&ex.envelope).unwrap();
        let direct = model.logit(&ex.eeg, &ex.envelope).unwrap();
        assert!((model.logit_from_features(&a, &b) - direct).abs() < 1e-12);
    }

    #[test]
    fn single_precision_tracks_double() {
        let p = small(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = random_example(&mut rng, 4, 64, true);
        let eeg32: Vec<f32> = ex.eeg.iter().map(|&v| v as f32).collect();
        let env32: Vec<f32> = ex.envelope.iter().map(|&v| v as f32).collect();
        let a = DecoderModel::<f64>::new(&p)
            .logit(&ex.eeg, &ex.envelope)
            .unwrap();
        let b = DecoderModel::<f32>::new(&p).logit(&eeg32, &env32).unwrap();
        assert!((a - f64::from(b)).abs() < 1e-4);
    }

    #[test]
    fn forward_checks_rate_and_shape() {
        let p = small(1);
        let eeg = MultichannelSignal::zeros(4, 64, 64.0).unwrap();
        let env = Envelope::new(vec![0.0; 64], 64.0).unwrap();
        assert!(forward(&p, &eeg, &env).is_ok());
        let env512 = Envelope::new(vec![0.0; 64], 512.0).unwrap();
        assert!(matches!(
            forward(&p, &eeg, &env512),
            Err(Error::RateMismatch { .. })
        ));
        let short = Envelope::new(vec![0.0; 63], 64.0).unwrap();
        assert!(matches!(forward(&p, &eeg, &short), Err(Error::Shape(_))));
        let wide = MultichannelSignal::zeros(5, 64, 64.0).unwrap();
        assert!(matches!(forward(&p, &wide, &env), Err(Error::Shape(_))));
        assert!(backward(&p, &[]).is_err());
    }
}
