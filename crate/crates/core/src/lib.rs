pub mod attention;
pub mod backend;
pub mod control;
pub mod evaluation;
pub mod inversion;
mod grid;
pub mod mask;
pub mod mask_input;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
