//! Scalar-loss reverse-mode differentiation with second-order capability.
//!
//! [`Tape`] records primitive operations; [`LossTape`] wraps a tape whose
//! final node is a scalar loss together with the parameter leaves it was
//! built from, and exposes the three drivers everything downstream uses:
//! loss evaluation, parameter gradients, and Hessian-vector products via
//! double backward over ⟨∇L, v⟩.

mod mat;
mod param;
mod tape;

pub use mat::Mat;
pub use param::{Layout, LayoutEntry, ParamKind, ParamVector};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// A recorded forward pass ending in a scalar loss.
///
/// `param_leaves` aligns one-to-one with the layout entries of the parameter
/// vector the program was built from, so gradients and HVPs come back in the
/// same layout.
pub struct LossTape {
    pub tape: Tape,
    pub loss: NodeId,
    pub layout: Layout,
    pub param_leaves: Vec<NodeId>,
    /// The input leaf; differentiable only when built for attacks.
    pub input: NodeId,
    /// Per-example loss column (n×1), before the batch mean.
    pub per_example: NodeId,
}

impl LossTape {
    /// Mean loss over the batch.
    pub fn loss_value(&self) -> f64 {
        self.tape.scalar_value(self.loss)
    }

    /// Per-example losses.
    pub fn per_example_losses(&self) -> Vec<f64> {
        self.tape.value(self.per_example).data.clone()
    }

    /// ∂loss/∂θ in the program's layout. Disconnected blocks come back zero.
    pub fn gradient(&mut self) -> Result<ParamVector> {
        let adj = self.tape.backward(self.loss)?;
        self.collect(&adj)
    }

    /// ∂loss/∂x for the input leaf. Zero matrix when nothing flows back.
    pub fn input_gradient(&mut self) -> Result<Mat> {
        let adj = self.tape.backward(self.loss)?;
        Ok(match adj[self.input] {
            Some(id) => self.tape.value(id).clone(),
            None => {
                let (r, c) = self.tape.value(self.input).shape();
                Mat::zeros(r, c)
            }
        })
    }

    /// H·v where H = ∇²_θ loss, computed by a second backward pass over the
    /// scalar ⟨∇L, v⟩.
    pub fn hvp(&mut self, v: &ParamVector) -> Result<ParamVector> {
        if *v.layout() != self.layout {
            return Err(Error::Layout(
                "hvp direction has a different layout than the program parameters".into(),
            ));
        }
        let mark = self.tape.mark();
        let grads = self.tape.backward(self.loss)?;
        let result = self.hvp_from_grads(&grads, v);
        self.tape.truncate(mark);
        result
    }

    /// First backward pass only; returns adjoint node ids for reuse across
    /// many probes (see `hvp_from_grads`). Caller owns mark/truncate.
    pub fn grad_nodes(&mut self) -> Result<Vec<Option<NodeId>>> {
        self.tape.backward(self.loss)
    }

    /// Second backward pass for one direction, on top of adjoints from
    /// [`LossTape::grad_nodes`]. Appends nodes; callers sweeping many probes
    /// should mark/truncate around each call.
    pub fn hvp_from_grads(
        &mut self,
        grads: &[Option<NodeId>],
        v: &ParamVector,
    ) -> Result<ParamVector> {
        let tape = &mut self.tape;
        // s = ⟨∇L, v⟩ over all parameter blocks that receive gradient.
        let mut dot: Option<NodeId> = None;
        for (entry, &leaf) in self.layout.entries().iter().zip(&self.param_leaves) {
            let Some(g) = grads[leaf] else { continue };
            let vmat = Mat::from_vec(entry.rows, entry.cols, v.block(entry).to_vec());
            let vconst = tape.constant(vmat);
            let prod = tape.mul(g, vconst)?;
            let partial = tape.sum_all(prod)?;
            dot = Some(match dot {
                None => partial,
                Some(acc) => tape.add(acc, partial)?,
            });
        }
        let Some(dot) = dot else {
            return Ok(ParamVector::zeros(self.layout.clone()));
        };
        let adj2 = tape.backward(dot)?;
        self.collect(&adj2)
    }

    fn collect(&self, adj: &[Option<NodeId>]) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(self.layout.clone());
        for (entry, &leaf) in self.layout.entries().iter().zip(&self.param_leaves) {
            if let Some(Some(gid)) = adj.get(leaf) {
                let g = self.tape.value(*gid);
                out.block_mut(entry).copy_from_slice(&g.data);
            }
        }
        Ok(out)
    }
}
