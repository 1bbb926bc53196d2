//! Adam, the alternating adversarial updates and the run schedule.

mod adam;
mod run;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use run::{
    checkpoint_file, load_state, pretrain_then_finetune, save_state, train_loop, PhaseRecord,
    RunManifest, Start, TrainOutcome, DIAGNOSTIC_FILE, LOSSES_FILE, MANIFEST_FILE,
};
pub use trainer::{
    evaluate_generator, LossRow, Phase, TrainConfig, TrainState, Trainer, LOSS_CSV_HEADER,
};
