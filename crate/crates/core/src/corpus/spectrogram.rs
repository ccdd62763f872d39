use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;

use super::CorpusError;

pub const SPEC_WINDOW_MS: f64 = 20.0;
pub const SPEC_HOP_MS: f64 = 10.0;
/// Variance floor of the per-bin normalization.
pub const SPEC_NORM_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hamming,
    Rectangular,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hamming if n == 1 => vec![1.0],
            Window::Hamming => (0..n)
                .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
                .collect(),
        }
    }
}

fn frame_geometry(rate: u32) -> (usize, usize) {
    let window = ((rate as f64 * SPEC_WINDOW_MS / 1000.0).round() as usize).max(1);
    let hop = ((rate as f64 * SPEC_HOP_MS / 1000.0).round() as usize).max(1);
    (window, hop)
}

/// Magnitude-squared short-time spectrum `[window/2 + 1, frames]` with
/// `frames = (samples − window)/hop + 1`.
pub fn power_spectrogram(samples: &[f64], rate: u32, window: Window) -> Result<Tensor<f64>, CorpusError> {
    let (win, hop) = frame_geometry(rate);
    if samples.len() < win {
        return Err(CorpusError::ShortWaveform {
            samples: samples.len(),
            window: win,
        });
    }
    let frames = (samples.len() - win) / hop + 1;
    let bins = win / 2 + 1;
    let coef = window.coefficients(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = vec![0.0; bins * frames];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[t * hop + i] * coef[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[k * frames + t] = buf[k].norm_sqr();
        }
    }
    Ok(Tensor::new(vec![bins, frames], out).expect("finite spectrum"))
}

/// Power spectrogram normalized per frequency bin to zero mean and unit
/// variance over the utterance.
pub fn spectrogram(samples: &[f64], rate: u32, window: Window) -> Result<Tensor<f64>, CorpusError> {
    let mut s = power_spectrogram(samples, rate, window)?;
    let (bins, frames) = (s.shape()[0], s.shape()[1]);
    for row in s.values_mut().chunks_mut(frames) {
        let mean = row.iter().sum::<f64>() / frames as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / frames as f64;
        let inv = 1.0 / (var + SPEC_NORM_EPS).sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    debug_assert_eq!(s.len(), bins * frames);
    Ok(s)
}
