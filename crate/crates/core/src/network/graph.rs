use std::sync::Arc;

use super::batchnorm::{batch_norm_backward, batch_norm_forward, BnCache, BnMode, RunningStats};
use super::loss::loss_and_grad;
use super::params::{Layout, ParamVector, SegmentRole};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One mini-batch `z_ξ`: the `index`-th fixed batch of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub index: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Plain,
    BatchNorm(BnCache),
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: f64,
    pub output: Tensor,
    mode: Mode,
    layout: Arc<Layout>,
    values: Vec<Tensor>,
    layer_caches: Vec<LayerCache>,
    grad_output: Tensor,
}

impl ForwardPass {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// A validated [`NetworkSpec`] plus its parameter layout and the BN running
/// statistics (which only matter in eval mode).
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layout: Arc<Layout>,
    shapes: Vec<Vec<usize>>,
    running: Vec<Option<RunningStats>>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let layout = Arc::new(Layout::for_spec(&spec)?);
        let running = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::BatchNorm { features, .. } => Some(RunningStats::new(features)),
                _ => None,
            })
            .collect();
        Ok(Self {
            spec,
            layout,
            shapes,
            running,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("validated")
    }

    pub fn running_stats(&self, layer: usize) -> Option<&RunningStats> {
        self.running.get(layer).and_then(Option::as_ref)
    }

    /// Computes an initial θ with this network's layout.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        let p = super::params::init_params(&self.spec, seed)?;
        ParamVector::new(self.layout.clone(), p.into_values())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if *params.layout().as_ref() != *self.layout {
            return Err(Error::Layout(
                "parameters do not belong to this network".into(),
            ));
        }
        Ok(())
    }

    fn check_batch(&self, inputs: &Tensor) -> Result<usize> {
        let shape = inputs.shape();
        if shape.len() < 2 || shape[1..] != self.shapes[0][..] {
            return Err(Error::Dimension(format!(
                "batch inputs {shape:?} do not match sample shape {:?}",
                self.shapes[0]
            )));
        }
        Ok(shape[0])
    }

    fn seg<'p>(&self, params: &'p ParamVector, layer: usize, role: SegmentRole) -> &'p [f64] {
        let seg = self
            .layout
            .find(layer, role)
            .expect("layout built from this spec");
        params.segment(seg)
    }

    /// Batch-mean loss; in train mode BN uses batch statistics.
    pub fn forward(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<ForwardPass> {
        self.check_params(params)?;
        let b = self.check_batch(&batch.inputs)?;
        let mut values = Vec::with_capacity(self.spec.layers.len() + 1);
        values.push(batch.inputs.clone());
        let mut layer_caches = Vec::with_capacity(self.spec.layers.len());

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = &values[i];
            let mut out_shape = vec![b];
            out_shape.extend_from_slice(&self.shapes[i + 1]);
            let (mut y, cache) = match *layer {
                LayerSpec::Dense { .. } => {
                    let w = self.weight_tensor(params, i)?;
                    let bias = self.seg(params, i, SegmentRole::Bias);
                    let mut y = tensor::matmul_nt(x, &w)?;
                    for row in y.data_mut().chunks_mut(bias.len()) {
                        for (v, &bv) in row.iter_mut().zip(bias) {
                            *v += bv;
                        }
                    }
                    (y, LayerCache::Plain)
                }
                LayerSpec::Conv2d { .. } => {
                    let g = self.conv_geometry(i);
                    let w = self.seg(params, i, SegmentRole::Weight);
                    let bias = self.seg(params, i, SegmentRole::Bias);
                    let in_len = g.c_in * g.height * g.width;
                    let plane = g.out_h * g.out_w;
                    let mut out = Vec::with_capacity(b * g.c_out * plane);
                    for sample in x.data().chunks(in_len) {
                        let mut o = tensor::conv2d_raw(&g, sample, w);
                        for (c, chunk) in o.chunks_mut(plane).enumerate() {
                            for v in chunk {
                                *v += bias[c];
                            }
                        }
                        out.extend(o);
                    }
                    (Tensor::new(out_shape.clone(), out)?, LayerCache::Plain)
                }
                LayerSpec::BatchNorm { eps, .. } => {
                    let scale = self.seg(params, i, SegmentRole::Scale);
                    let shift = self.seg(params, i, SegmentRole::Shift);
                    let bn_mode = match mode {
                        Mode::Train => BnMode::Train,
                        Mode::Eval => BnMode::Eval(self.running[i].as_ref().expect("bn layer")),
                    };
                    let (y, cache) = batch_norm_forward(x, scale, shift, eps, bn_mode)?;
                    match cache {
                        Some(c) => (y, LayerCache::BatchNorm(c)),
                        None => (y, LayerCache::Plain),
                    }
                }
                LayerSpec::Activation { activation } => {
                    (x.map(|v| activation.apply(v)), LayerCache::Plain)
                }
                LayerSpec::Flatten => (x.clone().reshape(out_shape.clone())?, LayerCache::Plain),
            };
            for (j, edge) in self.spec.skip_edges.iter().enumerate() {
                if edge.to != i {
                    continue;
                }
                let src = &values[edge.from];
                if edge.projection {
                    let proj = self.projection_tensor(params, j)?;
                    let flat = src.clone().reshape(vec![b, src.len() / b])?;
                    let added = tensor::matmul_nt(&flat, &proj)?.reshape(out_shape.clone())?;
                    y.add_assign(&added)?;
                } else {
                    y.add_assign(src)?;
                }
            }
            values.push(y);
            layer_caches.push(cache);
        }

        let output = values.last().expect("non-empty").clone();
        let (loss, grad_output) = loss_and_grad(self.spec.loss, &output, &batch.targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: None,
                batch: batch.index,
                loss,
            });
        }
        Ok(ForwardPass {
            loss,
            output,
            mode,
            layout: self.layout.clone(),
            values,
            layer_caches,
            grad_output,
        })
    }

    /// Updates BN running statistics from a train-mode forward pass.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass) {
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if let (LayerSpec::BatchNorm { momentum, .. }, LayerCache::BatchNorm(c)) =
                (layer, &pass.layer_caches[i])
            {
                if let Some(stats) = self.running[i].as_mut() {
                    stats.update(c, *momentum);
                }
            }
        }
    }

    /// Exact reverse-mode gradient of the batch-mean loss.
    pub fn backward(&self, params: &ParamVector, pass: &ForwardPass) -> Result<ParamVector> {
        self.check_params(params)?;
        if pass.layout != self.layout || pass.values.len() != self.spec.layers.len() + 1 {
            return Err(Error::Layout(
                "forward cache does not belong to this network".into(),
            ));
        }
        if pass.mode != Mode::Train {
            return Err(Error::Config(
                "backward requires a train-mode forward pass".into(),
            ));
        }
        let b = pass.values[0].shape()[0];
        let mut grad = ParamVector::zeros(self.layout.clone());
        let mut value_grads: Vec<Option<Tensor>> = vec![None; pass.values.len()];
        value_grads[self.spec.layers.len()] = Some(pass.grad_output.clone());

        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let Some(gy) = value_grads[i + 1].take() else {
                continue;
            };
            for (j, edge) in self.spec.skip_edges.iter().enumerate() {
                if edge.to != i {
                    continue;
                }
                let src = &pass.values[edge.from];
                let contribution = if edge.projection {
                    let proj = self.projection_tensor(params, j)?;
                    let flat_src = src.clone().reshape(vec![b, src.len() / b])?;
                    let flat_gy = gy.clone().reshape(vec![b, gy.len() / b])?;
                    let gp = tensor::matmul_tn(&flat_gy, &flat_src)?;
                    let seg = self
                        .layout
                        .find(j, SegmentRole::Projection)
                        .expect("projection segment");
                    accumulate(grad.segment_mut(seg), gp.data());
                    tensor::matmul(&flat_gy, &proj)?.reshape(src.shape().to_vec())?
                } else {
                    gy.clone()
                };
                add_grad(&mut value_grads[edge.from], contribution)?;
            }

            let x = &pass.values[i];
            let gx = match *layer {
                LayerSpec::Dense { .. } => {
                    let w = self.weight_tensor(params, i)?;
                    let gw = tensor::matmul_tn(&gy, x)?;
                    let wseg = self.layout.find(i, SegmentRole::Weight).expect("weight");
                    accumulate(grad.segment_mut(wseg), gw.data());
                    let bseg = self.layout.find(i, SegmentRole::Bias).expect("bias");
                    let gb = grad.segment_mut(bseg);
                    for row in gy.data().chunks(gb.len()) {
                        accumulate(gb, row);
                    }
                    tensor::matmul(&gy, &w)?
                }
                LayerSpec::Conv2d { .. } => {
                    let g = self.conv_geometry(i);
                    let w = self.seg(params, i, SegmentRole::Weight);
                    let in_len = g.c_in * g.height * g.width;
                    let out_len = g.c_out * g.out_h * g.out_w;
                    let plane = g.out_h * g.out_w;
                    let mut gx = vec![0.0; x.len()];
                    let mut gw = vec![0.0; w.len()];
                    let mut gb = vec![0.0; g.c_out];
                    for s in 0..b {
                        let go = &gy.data()[s * out_len..(s + 1) * out_len];
                        tensor::conv2d_backward_raw(
                            &g,
                            &x.data()[s * in_len..(s + 1) * in_len],
                            w,
                            go,
                            &mut gx[s * in_len..(s + 1) * in_len],
                            &mut gw,
                        );
                        for (c, chunk) in go.chunks(plane).enumerate() {
                            for v in chunk {
                                gb[c] += v;
                            }
                        }
                    }
                    let wseg = self.layout.find(i, SegmentRole::Weight).expect("weight");
                    accumulate(grad.segment_mut(wseg), &gw);
                    let bseg = self.layout.find(i, SegmentRole::Bias).expect("bias");
                    accumulate(grad.segment_mut(bseg), &gb);
                    Tensor::new(x.shape().to_vec(), gx)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let LayerCache::BatchNorm(cache) = &pass.layer_caches[i] else {
                        return Err(Error::Layout(format!(
                            "layer {i}: missing batch-norm cache"
                        )));
                    };
                    let scale = self.seg(params, i, SegmentRole::Scale);
                    let (gx, gs, gsh) = batch_norm_backward(&gy, scale, cache)?;
                    let sseg = self.layout.find(i, SegmentRole::Scale).expect("scale");
                    accumulate(grad.segment_mut(sseg), &gs);
                    let hseg = self.layout.find(i, SegmentRole::Shift).expect("shift");
                    accumulate(grad.segment_mut(hseg), &gsh);
                    gx
                }
                LayerSpec::Activation { activation } => {
                    x.zip_with(&gy, "activation backward", |xv, g| {
                        g * activation.derivative(xv, activation.apply(xv))
                    })?
                }
                LayerSpec::Flatten => gy.reshape(x.shape().to_vec())?,
            };
            add_grad(&mut value_grads[i], gx)?;
        }
        Ok(grad)
    }

    /// Convenience: forward in train mode followed by backward.
    pub fn loss_and_gradient(
        &self,
        params: &ParamVector,
        batch: &Batch,
    ) -> Result<(f64, ParamVector, ForwardPass)> {
        let pass = self.forward(params, batch, Mode::Train)?;
        let grad = self.backward(params, &pass)?;
        Ok((pass.loss, grad, pass))
    }

    fn weight_tensor(&self, params: &ParamVector, layer: usize) -> Result<Tensor> {
        let seg = self
            .layout
            .find(layer, SegmentRole::Weight)
            .expect("weight");
        Tensor::new(seg.shape.clone(), params.segment(seg).to_vec())
    }

    fn projection_tensor(&self, params: &ParamVector, edge: usize) -> Result<Tensor> {
        let seg = self
            .layout
            .find(edge, SegmentRole::Projection)
            .expect("projection");
        Tensor::new(seg.shape.clone(), params.segment(seg).to_vec())
    }

    fn conv_geometry(&self, layer: usize) -> ConvGeometry {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec.layers[layer]
        else {
            unreachable!("conv geometry requested for non-conv layer");
        };
        let s = &self.shapes[layer];
        ConvGeometry::new(
            [s[0], s[1], s[2]],
            [out_channels, in_channels, kernel, kernel],
            stride,
            padding,
        )
        .expect("validated at construction")
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::{Activation, LossKind, SkipEdge};

    fn identity_dense() -> (Network, ParamVector) {
        let spec = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(3, 3)],
            skip_edges: vec![],
            loss: LossKind::Mse,
        };
        let net = Network::new(spec).unwrap();
        let mut p = ParamVector::zeros(net.layout().clone());
        let w = net.layout().find(0, SegmentRole::Weight).unwrap().clone();
        let ws = p.segment_mut(&w);
        for i in 0..3 {
            ws[i * 3 + i] = 1.0;
        }
        (net, p)
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let (net, p) = identity_dense();
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, -1.0]]).unwrap();
        let batch = Batch {
            inputs: x.clone(),
            targets: x.clone(),
            index: 0,
        };
        let pass = net.forward(&p, &batch, Mode::Train).unwrap();
        assert_eq!(pass.output, x);
        assert_eq!(pass.loss, 0.0);
        let g = net.backward(&p, &pass).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_eval_and_foreign_params() {
        let (net, p) = identity_dense();
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let batch = Batch {
            inputs: x.clone(),
            targets: x,
            index: 0,
        };
        let pass = net.forward(&p, &batch, Mode::Eval).unwrap();
        assert!(net.backward(&p, &pass).is_err());

        let other = Network::new(NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(3, 2)],
            skip_edges: vec![],
            loss: LossKind::Mse,
        })
        .unwrap();
        let q = other.init_params(0).unwrap();
        assert!(net.forward(&q, &batch, Mode::Train).is_err());
    }

    #[test]
    fn divergent_loss_is_an_error() {
        let (net, mut p) = identity_dense();
        p.values_mut()[0] = f64::INFINITY;
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let batch = Batch {
            inputs: x.clone(),
            targets: x,
            index: 4,
        };
        match net.forward(&p, &batch, Mode::Train) {
            Err(Error::Divergence { batch: 4, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::dense(4, 4),
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::dense(4, 4),
            ],
            skip_edges: vec![SkipEdge::identity(0, 2)],
            loss: LossKind::Mse,
        };
        let net = Network::new(spec).unwrap();
        let p = ParamVector::zeros(net.layout().clone());
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.1], &[1.0, 1.0, -2.0, 0.5]]).unwrap();
        let batch = Batch {
            inputs: x.clone(),
            targets: Tensor::zeros(vec![2, 4]),
            index: 0,
        };
        let out = net.forward(&p, &batch, Mode::Train).unwrap().output;
        assert_eq!(out, x);
    }

    #[test]
    fn eval_uses_running_stats() {
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::batch_norm(2)],
            skip_edges: vec![],
            loss: LossKind::Mse,
        };
        let mut net = Network::new(spec).unwrap();
        let p = net.init_params(0).unwrap();
        let batch = Batch {
            inputs: Tensor::from_rows(&[&[1.0, 10.0], &[3.0, 30.0]]).unwrap(),
            targets: Tensor::zeros(vec![2, 2]),
            index: 0,
        };
        let before = net.forward(&p, &batch, Mode::Eval).unwrap().output;
        let pass = net.forward(&p, &batch, Mode::Train).unwrap();
        net.commit_batch_stats(&pass);
        let after = net.forward(&p, &batch, Mode::Eval).unwrap().output;
        assert_ne!(before, after);
        let stats = net.running_stats(0).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.mean[1] - 2.0).abs() < 1e-15);
    }
}
