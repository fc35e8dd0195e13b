pub mod accounting;
pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod moe_layer;

pub use accounting::{count_params, freeze_report, layer_param_count, measured_active, FreezeEntry, ParamCount};
pub use backbone::{
    aux_losses, gate_records, AdapterConfig, AdapterTarget, BackboneConfig, Block, ForwardOut, LayerGates, ModelVars,
    ParamKind, ParamMut, ParamRef, Projection, ToyBackbone,
};
pub use batch::{Sample, TokenBatch};
pub use checkpoint::{checkpoint_hash, checkpoint_step, load_checkpoint, model_plan, save_checkpoint};
pub use moe_layer::{moe_forward, Gating, LayerOutput, LayerVars, MoeLoraLayer};
