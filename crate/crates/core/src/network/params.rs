use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stream id reserved for weight initialisation; the sampler and the
/// synthetic data generators draw from other streams.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    Weight,
    Bias,
    Scale,
    Shift,
    Projection,
}

/// One contiguous slice of θ owned by a single layer parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub owner: usize,
    pub role: SegmentRole,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub(crate) fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Ordered segment table. Segments are laid out back to back in layer order,
/// followed by the projection weights of skip edges in edge order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn for_spec(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut builder = LayoutBuilder::default();
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    builder.push(
                        format!("layer{i}.weight"),
                        i,
                        SegmentRole::Weight,
                        vec![outputs, inputs],
                    );
                    builder.push(
                        format!("layer{i}.bias"),
                        i,
                        SegmentRole::Bias,
                        vec![outputs],
                    );
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    builder.push(
                        format!("layer{i}.weight"),
                        i,
                        SegmentRole::Weight,
                        vec![out_channels, in_channels, kernel, kernel],
                    );
                    builder.push(
                        format!("layer{i}.bias"),
                        i,
                        SegmentRole::Bias,
                        vec![out_channels],
                    );
                }
                LayerSpec::BatchNorm { features, .. } => {
                    builder.push(
                        format!("layer{i}.scale"),
                        i,
                        SegmentRole::Scale,
                        vec![features],
                    );
                    builder.push(
                        format!("layer{i}.shift"),
                        i,
                        SegmentRole::Shift,
                        vec![features],
                    );
                }
                LayerSpec::Activation { .. } | LayerSpec::Flatten => {}
            }
        }
        for (j, edge) in spec.skip_edges.iter().enumerate() {
            if edge.projection {
                let src: usize = shapes[edge.from].iter().product();
                let dst: usize = shapes[edge.to + 1].iter().product();
                builder.push(
                    format!("skip{j}.projection"),
                    j,
                    SegmentRole::Projection,
                    vec![dst, src],
                );
            }
        }
        Ok(builder.finish())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total parameter count d.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, owner: usize, role: SegmentRole) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.owner == owner && s.role == role)
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Default)]
struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, owner: usize, role: SegmentRole, shape: Vec<usize>) {
        let seg = Segment {
            name,
            owner,
            role,
            offset: self.len,
            shape,
        };
        self.len += seg.len();
        self.segments.push(seg);
    }

    fn finish(self) -> Layout {
        Layout {
            segments: self.segments,
            len: self.len,
        }
    }
}

/// Flattened model parameters θ ∈ ℝ^d together with the layout that gives
/// each coordinate its meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Concatenates one tensor per segment, in layout order.
    pub fn flatten(layout: Arc<Layout>, parts: &[Tensor]) -> Result<Self> {
        if parts.len() != layout.segments().len() {
            return Err(Error::Layout(format!(
                "layout has {} segments, got {} tensors",
                layout.segments().len(),
                parts.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (seg, t) in layout.segments().iter().zip(parts) {
            if t.shape() != seg.shape.as_slice() {
                return Err(Error::Layout(format!(
                    "{}: expected shape {:?}, got {:?}",
                    seg.name,
                    seg.shape,
                    t.shape()
                )));
            }
            values.extend_from_slice(t.data());
        }
        Ok(Self { values, layout })
    }

    /// Structured view: one tensor per segment.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .segments()
            .iter()
            .map(|seg| {
                let t = Tensor::new(seg.shape.clone(), self.values[seg.range()].to_vec())
                    .expect("segment shape matches its length");
                (seg.name.clone(), t)
            })
            .collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, seg: &Segment) -> &mut [f64] {
        &mut self.values[seg.range()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }
}

/// Deterministic initialisation: weights ~ U(−√(1/fan_in), √(1/fan_in)),
/// biases and BN shifts 0, BN scales 1.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamVector> {
    let layout = Arc::new(Layout::for_spec(spec)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut values = vec![0.0; layout.len()];
    for seg in layout.segments() {
        let slot = &mut values[seg.range()];
        match seg.role {
            SegmentRole::Weight | SegmentRole::Projection => {
                let bound = (1.0 / seg.fan_in() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for v in slot.iter_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
            SegmentRole::Scale => slot.fill(1.0),
            SegmentRole::Bias | SegmentRole::Shift => {}
        }
    }
    ParamVector::new(layout, values)
}
