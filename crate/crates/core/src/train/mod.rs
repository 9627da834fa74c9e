pub mod adamw;
pub mod model;
pub mod ptq;
pub mod task;
pub mod trainer;

pub use adamw::{AdamWConfig, AdamWState};
pub use model::{backward, forward, predict, Loss, ModelSpec, QuantContext, ToyModel};
pub use ptq::{ptq_model, quantized_eval_loss, QuantSchemes, QuantizedModel};
pub use task::{make_spiked_task, SpikedTask, SyntheticTask};
pub use trainer::{init_model, train, train_with_observer, LogEntry, TrainOutcome, Workbench};
