mod checkpoint;
mod config;
mod petformer;
mod revin;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use config::{patch_counts, ChannelMode, HeadMode, ModelConfig};
pub use petformer::{ParamReport, Petformer};
pub use revin::{RevIn, RevInState, REVIN_EPS};
