#![allow(dead_code)]

use mmdecode::decoder::{
    backward, init_params, normalize_segment, Architecture, DecoderModel, DecoderParameters,
    Example,
};
use mmdecode::Band;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Two-sided 99 % normal-approximation interval for a binomial proportion.
pub fn binomial_99(p: f64, n: usize) -> (f64, f64) {
    let half = 2.575_829_303_548_901 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Upper tail P(X >= k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    let mut total = 0.0;
    for i in k..=n {
        let mut c = 1.0;
        for j in 0..i {
            c *= (n - j) as f64 / (i - j) as f64;
        }
        total += c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total
}

pub fn random_batch(seed: u64, channels: usize, t: usize, n: usize) -> Vec<Example<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut eeg: Vec<f64> = (0..channels * t)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut envelope: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            normalize_segment(&mut eeg, t);
            normalize_segment(&mut envelope, t);
            Example {
                eeg,
                envelope,
                label: i % 2 == 0,
            }
        })
        .collect()
}

pub fn tiny_decoder(seed: u64, channels: usize) -> DecoderParameters {
    let mut p = init_params(seed, Band::Lf, Architecture::with_channels(channels), 64.0).unwrap();
    // nonzero biases so every bias gradient is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let layout = p.layout();
    for block in layout.eeg.iter().chain(&layout.stim) {
        for v in &mut p.values[block.bias..block.bias + block.out_w] {
            *v = rng.random_range(0.05..0.2);
        }
    }
    p
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_gradient_error(
    params: &DecoderParameters,
    batch: &[Example<f64>],
    h: f64,
) -> (f64, usize) {
    let (grad, _) = backward(params, batch).unwrap();
    let loss = |p: &DecoderParameters| {
        let model = DecoderModel::<f64>::new(p);
        batch
            .iter()
            .map(|ex| {
                let z = model.logit(&ex.eeg, &ex.envelope).unwrap();
                let y = if ex.label { 1.0 } else { 0.0 };
                z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut worst = (0.0, 0);
    let mut p = params.clone();
    for (i, &g) in grad.iter().enumerate() {
        let v = params.values[i];
        p.values[i] = v + h;
        let up = loss(&p);
        p.values[i] = v - h;
        let down = loss(&p);
        p.values[i] = v;
        let numeric = (up - down) / (2.0 * h);
        let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-7);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

/// Textbook two-class LDA in its quadratic-form bias, computed with
/// nalgebra: returns `(w, b)`.
pub fn lda_oracle(pairs: &[mmdecode::decoder::LogitPair]) -> ([f64; 2], f64) {
    use nalgebra::{DMatrix, Vector2};
    let rows = |label: bool| {
        let xs: Vec<f64> = pairs
            .iter()
            .filter(|p| p.label == Some(label))
            .flat_map(|p| p.features())
            .collect();
        DMatrix::from_row_slice(xs.len() / 2, 2, &xs)
    };
    let (x0, x1) = (rows(false), rows(true));
    let mu = |x: &DMatrix<f64>| Vector2::new(x.column(0).mean(), x.column(1).mean());
    let (m0, m1) = (mu(&x0), mu(&x1));
    let centered = |x: &DMatrix<f64>, m: &Vector2<f64>| {
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row[0] -= m[0];
            row[1] -= m[1];
        }
        c
    };
    let (c0, c1) = (centered(&x0, &m0), centered(&x1, &m1));
    let n = (x0.nrows() + x1.nrows()) as f64;
    let scatter = c0.transpose() * &c0 + c1.transpose() * &c1;
    let sigma = nalgebra::Matrix2::from_iterator(scatter.iter().copied()) / (n - 2.0);
    let inv = sigma.try_inverse().expect("invertible pooled covariance");
    let w = inv * (m1 - m0);
    let b = -0.5 * m1.dot(&(inv * m1))
        + 0.5 * m0.dot(&(inv * m0))
        + (x1.nrows() as f64 / x0.nrows() as f64).ln();
    ([w[0], w[1]], b)
}

/// Desk-scale labelled logit pairs: two correlated Gaussian clouds.
pub fn random_pairs(seed: u64) -> Vec<mmdecode::decoder::LogitPair> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = rng.random_range(20..200);
    let n1 = rng.random_range(20..200);
    let shift = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let mix = [
        rng.random_range(0.2..2.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.2..2.0),
    ];
    (0..n0 + n1)
        .map(|i| {
            let label = i >= n0;
            let z: [f64; 2] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let mut x = [mix[0] * z[0], mix[1] * z[0] + mix[2] * z[1]];
            if label {
                x[0] += shift[0];
                x[1] += shift[1];
            }
            mmdecode::decoder::LogitPair::new(x[0], x[1], Some(label))
        })
        .collect()
}

/// P(|T| < t) for Student's t with integer `df`, from the finite
/// trigonometric series.
fn t_central_mass(t: f64, df: usize) -> f64 {
    let theta = (t / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    if df % 2 == 1 {
        let mut sum = 0.0;
        let mut term = c;
        let mut k = 1;
        while 2 * k < df {
            sum += term;
            term *= c * c * (2 * k) as f64 / (2 * k + 1) as f64;
            k += 1;
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut sum = 0.0;
        let mut term = 1.0;
        let mut k = 1;
        while 2 * k <= df {
            sum += term;
            term *= c * c * (2 * k - 1) as f64 / (2 * k) as f64;
            k += 1;
        }
        s * sum
    }
}

/// Two-sided 95 % Student-t quantile by bisection on the series CDF.
pub fn t_quantile_975(df: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 1000.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_central_mass(mid, df) < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Independent t-interval: mean and half-width.
pub fn t_interval_oracle(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, t_quantile_975(values.len() - 1) * sd / n.sqrt())
}
