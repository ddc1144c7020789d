//! Deliberately naive reference implementations used by the adaspan test
//! suites: central finite differences, a dense O(T²) attention stack,
//! direct double-sum V-trace and a textbook RMSProp.
//!
//! Nothing here depends on `adaspan-core`; inputs are plain vectors so the
//! checks stay independent of the code they verify.

pub mod dense;
pub mod fd;
pub mod rmsprop;
pub mod vtrace;

pub use dense::{
    dense_attention_reference, dense_block_reference, dense_stack_reference, RefAttention,
    RefBlock,
};
pub use fd::{fd_gradient, max_rel_error, FiniteDiffConfig};
pub use rmsprop::RmsPropReference;
pub use vtrace::{vtrace_direct, VTraceReference};
