//! Pseudo-composed mapping: the trainable mapping network and the two
//! contrastive objectives that train it.

pub mod contrastive;
pub mod gradcheck;
pub mod mapping;
pub mod objective;

pub use contrastive::{contrastive_pair_loss, PairLoss};
pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckConfig, GradCheckProblem, GradCheckReport};
pub use mapping::{
    init_mapping, map_backward, map_forward, map_forward_batch, Activation, Affine, MapCache, MappingGrads,
    MappingParams,
};
pub use objective::{
    align_loss, backward, compose_loss, forward, loss_only, total_loss_and_grads, AlignTarget, ForwardCache,
    LossBreakdown, LossTerms, ObjectiveConfig,
};
