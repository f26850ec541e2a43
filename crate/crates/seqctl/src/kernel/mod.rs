//! Minimal dense-tensor kernel: arrays, a define-by-run reverse-mode
//! graph, Adam, seedable RNG streams and the checkpoint container.

pub mod array;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod rng;

pub use array::Array;
pub use graph::{causal_attention, causal_mask, masked_attention, Graph, KernelError, NodeId};
pub use params::{AdamState, ParamId, ParamStore};
pub use rng::StreamRng;

/// y = x W + b for x viewed as [rows, in_dim].
pub fn linear(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, KernelError> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}
