pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod glm;
pub mod mixed;
pub mod pipeline;
pub mod simulate;
pub mod transform;
pub mod wls;
