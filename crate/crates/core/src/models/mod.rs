//! Task encoder (used for both defender and attacker) and the mask generator.

mod checkpoint;
mod generator;
mod task;

pub use checkpoint::{load_generator, load_task_model, save_generator, save_task_model};
pub use generator::{
    gnet_backward_from_logit_grads, gnet_forward, gnet_logprob_backward, gnet_sample_masks,
    logprob_from_logits, GeneratorConfig, GeneratorForward, GeneratorParams, MaskDecision,
};
pub use task::{
    batch_loss_and_grads, decision_plan, predict, task_backward, task_forward,
    task_forward_planned, BlockParams, BlockPlan, TaskCache, TaskConfig, TaskModelParams,
};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2D;

/// A named collection of trainable tensors. Gradients use the same type.
pub trait ParamSet: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor2D)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2D>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.named_tensors().iter().map(|(_, t)| t.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(
                "ParamSet::assign_flat",
                format!("{} values for {total} parameters", flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha · other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        let others: Vec<Tensor2D> = other
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::shape("ParamSet::add_scaled", "tensor count differs"));
        }
        for (m, o) in mine.into_iter().zip(&others) {
            m.axpy(alpha, o)?;
        }
        Ok(())
    }

    fn scale(&mut self, s: f64) {
        self.tensors_mut()
            .into_iter()
            .for_each(|t| t.scale_in_place(s));
    }

    /// Identical shapes and values, compared by bit pattern.
    fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
