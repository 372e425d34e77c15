//! Reverse-mode gradient tape.
//!
//! Values are appended in forward order and referenced by [`ValueId`]; each
//! recorded entry names its inputs and its output. Replaying backward visits
//! entries in exact reverse order of recording, which is a reverse
//! topological order because an entry can only read values recorded before it.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type ValueId = usize;

#[derive(Debug, Clone)]
pub struct TapeEntry<O> {
    pub op: O,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

#[derive(Debug, Clone)]
pub struct GradTape<T, O> {
    values: Vec<Tensor<T>>,
    entries: Vec<TapeEntry<O>>,
}

impl<T: Scalar, O> Default for GradTape<T, O> {
    fn default() -> Self {
        GradTape {
            values: Vec::new(),
            entries: Vec::new(),
        }
    }
}

impl<T: Scalar, O> GradTape<T, O> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a value that no entry produced (a network input).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn record(&mut self, op: O, inputs: &[ValueId], output: Tensor<T>) -> ValueId {
        let id = self.leaf(output);
        self.entries.push(TapeEntry {
            op,
            inputs: inputs.to_vec(),
            output: id,
        });
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn entries(&self) -> &[TapeEntry<O>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Propagate `seed` (the gradient of `root`) back through every entry.
    ///
    /// `step` receives an entry, the gradient of its output and its input
    /// values, and returns one gradient per input (`None` for inputs that do
    /// not need one). Returns the accumulated gradient of every value.
    pub fn backward<F>(&self, root: ValueId, seed: Tensor<T>, mut step: F) -> Result<Vec<Option<Tensor<T>>>>
    where
        F: FnMut(&TapeEntry<O>, &Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>>,
    {
        if root >= self.values.len() {
            return Err(Error::Usage(format!("backward from unknown value {root}")));
        }
        self.values[root].same_shape(&seed, "GradTape::backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[root] = Some(seed);
        for entry in self.entries.iter().rev() {
            let Some(g_out) = grads[entry.output].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = entry.inputs.iter().map(|&i| &self.values[i]).collect();
            let g_in = step(entry, &g_out, &inputs)?;
            if g_in.len() != entry.inputs.len() {
                return Err(Error::Usage(format!(
                    "backward step returned {} gradients for {} inputs",
                    g_in.len(),
                    entry.inputs.len()
                )));
            }
            grads[entry.output] = Some(g_out);
            for (&i, g) in entry.inputs.iter().zip(g_in) {
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(grads)
    }
}
