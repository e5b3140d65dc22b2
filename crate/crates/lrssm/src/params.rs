//! Flat parameter storage with a named block layout.
//!
//! Every learnable quantity lives in one `Vec<f64>`. A [`Layout`] maps block
//! names to `(rows, cols, offset)` so optimizers see a single vector while
//! model code asks for matrices by [`BlockId`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{Backend, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-level group, i.e. the part of the name before the first `.`.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<Block>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> BlockId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate block {name}");
        self.blocks.push(Block {
            name,
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        BlockId(self.blocks.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len()).map(BlockId)
    }
}

/// Parameter values laid out by a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total()];
        Params { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::shape("parameter vector", layout.total(), values.len()));
        }
        Ok(Params { layout, values })
    }

    pub fn slice(&self, id: BlockId) -> &[f64] {
        let b = self.layout.block(id);
        &self.values[b.offset..b.offset + b.len()]
    }

    pub fn slice_mut(&mut self, id: BlockId) -> &mut [f64] {
        let b = self.layout.block(id).clone();
        &mut self.values[b.offset..b.offset + b.len()]
    }

    /// Block as a column-major matrix.
    pub fn matrix(&self, id: BlockId) -> DMatrix<f64> {
        let b = self.layout.block(id);
        DMatrix::from_column_slice(b.rows, b.cols, self.slice(id))
    }

    pub fn set_matrix(&mut self, id: BlockId, m: &DMatrix<f64>) -> Result<()> {
        let b = self.layout.block(id);
        if m.shape() != (b.rows, b.cols) {
            return Err(Error::shape(
                "set_matrix",
                format!("({}, {})", b.rows, b.cols),
                format!("{:?}", m.shape()),
            ));
        }
        self.slice_mut(id).copy_from_slice(m.as_slice());
        Ok(())
    }

    pub fn fill(&mut self, id: BlockId, v: f64) {
        self.slice_mut(id).iter_mut().for_each(|x| *x = v);
    }

    /// Fills a weight block with `N(0, gain² / fan_in)` entries.
    pub fn init_scaled_normal(&mut self, id: BlockId, gain: f64, rng: &mut impl Rng) {
        let fan_in = self.layout.block(id).cols.max(1) as f64;
        let sd = gain / fan_in.sqrt();
        for x in self.slice_mut(id) {
            let z: f64 = StandardNormal.sample(rng);
            *x = sd * z;
        }
    }

    /// Materializes every block on a backend. `trainable` decides per block
    /// whether it becomes a gradient leaf or a constant.
    pub fn bind_with<O: Backend>(&self, o: &O, trainable: impl Fn(&Block) -> bool) -> Bound<O::M> {
        let blocks = self
            .layout
            .ids()
            .map(|id| {
                let m = self.matrix(id);
                if trainable(self.layout.block(id)) {
                    o.param(m)
                } else {
                    o.lift(m)
                }
            })
            .collect();
        Bound { blocks }
    }

    pub fn bind<O: Backend>(&self, o: &O) -> Bound<O::M> {
        self.bind_with(o, |_| true)
    }
}

/// Parameter blocks materialized on a backend.
#[derive(Debug, Clone)]
pub struct Bound<M> {
    blocks: Vec<M>,
}

impl<M> Bound<M> {
    pub fn get(&self, id: BlockId) -> &M {
        &self.blocks[id.0]
    }
}

impl Bound<Var> {
    /// Gathers block adjoints into one flat vector (zeros where a block
    /// does not influence the output).
    pub fn flat_gradient(&self, layout: &Layout, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; layout.total()];
        for (id, v) in self.blocks.iter().enumerate() {
            let b = &layout.blocks()[id];
            if let Some(g) = grads.get(*v) {
                out[b.offset..b.offset + b.len()].copy_from_slice(g.as_slice());
            }
        }
        out
    }
}

/// Reverse-mode gradient of a scalar function of the bound parameters.
pub fn value_and_grad(
    params: &Params,
    f: impl FnOnce(&Tape, &Bound<Var>) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = f(&tape, &bound)?;
    let value = tape.scalar(&out);
    let grads = tape.gradients(out);
    Ok((value, bound.flat_gradient(&params.layout, &grads)))
}
