use std::collections::HashMap;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named dense tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Block {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    /// `(rows, cols)` for a matrix, `(1, n)` for a vector.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("block {} has unsupported rank {}", self.name, other.len()),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.dims2(), &self.data).expect("block shape matches data")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2();
        ArrayViewMut2::from_shape(dims, &mut self.data).expect("block shape matches data")
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// An ordered set of named blocks: model parameters, gradients, or any other
/// per-parameter quantity sharing the same partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Blocks {
    blocks: Vec<Block>,
    index: HashMap<String, usize>,
}

impl Blocks {
    pub fn new(blocks: Vec<Block>) -> Self {
        let index = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.clone(), i))
            .collect();
        Blocks { blocks, index }
    }

    pub fn zeros_like(other: &Blocks) -> Self {
        Blocks::new(
            other
                .blocks
                .iter()
                .map(|b| Block::zeros(b.name.clone(), b.shape.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.blocks.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.position(name).map(|i| &self.blocks[i])
    }

    pub fn require(&self, name: &str) -> Result<&Block> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("missing block {name}")))
    }

    pub fn at(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Block {
        &mut self.blocks[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Blocks) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// All scalars concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    pub fn into_vec(self) -> Vec<Block> {
        self.blocks
    }
}
