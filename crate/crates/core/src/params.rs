use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("layer shapes cover {covered} values but the vector holds {len}")]
    LayoutMismatch { covered: usize, len: usize },
    #[error("parameter vector must hold at least one value")]
    Empty,
    #[error("parameter {0} is not finite")]
    NonFinite(usize),
}

/// One dense layer: a `rows x cols` weight matrix (row-major) optionally
/// followed by a bias vector of length `rows`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model parameters with the layer layout that partitions them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layer_shapes: Vec<LayerShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layer_shapes: Vec<LayerShape>) -> Result<Self, ParamError> {
        let p = Self { values, layer_shapes };
        p.validate()?;
        Ok(p)
    }

    /// A vector with no layer structure: one `n x 1` block.
    pub fn flat(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            layer_shapes: vec![LayerShape {
                rows: n,
                cols: 1,
                has_bias: false,
            }],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layer_shapes: self.layer_shapes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.values.is_empty() {
            return Err(ParamError::Empty);
        }
        let covered: usize = self.layer_shapes.iter().map(LayerShape::len).sum();
        if covered != self.values.len() {
            return Err(ParamError::LayoutMismatch {
                covered,
                len: self.values.len(),
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(i));
        }
        Ok(())
    }

    /// Index ranges of every weight matrix and bias vector, in storage order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.layer_shapes.len() * 2);
        let mut at = 0;
        for shape in &self.layer_shapes {
            let w = shape.rows * shape.cols;
            out.push(at..at + w);
            at += w;
            if shape.has_bias {
                out.push(at..at + shape.rows);
                at += shape.rows;
            }
        }
        out.retain(|r| !r.is_empty());
        out
    }
}
