//! Batch normalization over the batch axis (and spatial axes for `B×C×H×W`
//! inputs), with biased batch variance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// `r ← (1 − m)·r + m·batch`.
    pub fn update(&mut self, batch: &BnCache, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

/// Intermediates kept by a train-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
}

struct View {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl View {
    fn of(x: &Tensor, features: usize) -> Result<Self> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != features {
            return Err(Error::Dimension(format!(
                "batch_norm({features}) fed {shape:?}"
            )));
        }
        Ok(Self {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        })
    }

    #[inline]
    fn index(&self, b: usize, c: usize, s: usize) -> usize {
        (b * self.channels + c) * self.spatial + s
    }

    fn count(&self) -> f64 {
        (self.batch * self.spatial) as f64
    }
}

pub fn batch_norm_forward(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
    mode: BnMode<'_>,
) -> Result<(Tensor, Option<BnCache>)> {
    let v = View::of(x, scale.len())?;
    if shift.len() != v.channels {
        return Err(Error::Dimension(
            "batch_norm: scale/shift lengths differ".into(),
        ));
    }
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    match mode {
        BnMode::Train => {
            if v.batch < 2 {
                return Err(Error::Dimension(format!(
                    "batch_norm in train mode needs a batch of at least 2, got {}",
                    v.batch
                )));
            }
            let n = v.count();
            let mut mean = vec![0.0; v.channels];
            let mut var = vec![0.0; v.channels];
            for (c, (mu, sigma2)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut acc = 0.0;
                for b in 0..v.batch {
                    for s in 0..v.spatial {
                        acc += data[v.index(b, c, s)];
                    }
                }
                *mu = acc / n;
                let mut acc = 0.0;
                for b in 0..v.batch {
                    for s in 0..v.spatial {
                        let d = data[v.index(b, c, s)] - *mu;
                        acc += d * d;
                    }
                }
                *sigma2 = acc / n;
            }
            let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
            let mut xhat = vec![0.0; data.len()];
            for b in 0..v.batch {
                for c in 0..v.channels {
                    for s in 0..v.spatial {
                        let i = v.index(b, c, s);
                        xhat[i] = (data[i] - mean[c]) * inv_std[c];
                        out[i] = xhat[i] * scale[c] + shift[c];
                    }
                }
            }
            let cache = BnCache {
                mean,
                var,
                inv_std,
                xhat,
            };
            Ok((Tensor::new(x.shape().to_vec(), out)?, Some(cache)))
        }
        BnMode::Eval(stats) => {
            if stats.mean.len() != v.channels {
                return Err(Error::Dimension(
                    "batch_norm: running stats size mismatch".into(),
                ));
            }
            for b in 0..v.batch {
                for c in 0..v.channels {
                    let inv = 1.0 / (stats.var[c] + eps).sqrt();
                    for s in 0..v.spatial {
                        let i = v.index(b, c, s);
                        out[i] = (data[i] - stats.mean[c]) * inv * scale[c] + shift[c];
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, None))
        }
    }
}

/// Returns `(grad_input, grad_scale, grad_shift)` for a train-mode forward.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    scale: &[f64],
    cache: &BnCache,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let v = View::of(grad_out, scale.len())?;
    let g = grad_out.data();
    let n = v.count();
    let mut grad_scale = vec![0.0; v.channels];
    let mut grad_shift = vec![0.0; v.channels];
    for c in 0..v.channels {
        for b in 0..v.batch {
            for s in 0..v.spatial {
                let i = v.index(b, c, s);
                grad_shift[c] += g[i];
                grad_scale[c] += g[i] * cache.xhat[i];
            }
        }
    }
    // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
    let mut grad_in = vec![0.0; g.len()];
    for b in 0..v.batch {
        for c in 0..v.channels {
            let k = scale[c] * cache.inv_std[c] / n;
            for s in 0..v.spatial {
                let i = v.index(b, c, s);
                grad_in[i] = k * (n * g[i] - grad_shift[c] - cache.xhat[i] * grad_scale[c]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), grad_in)?,
        grad_scale,
        grad_shift,
    ))
}
