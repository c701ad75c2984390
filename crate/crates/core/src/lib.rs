pub mod chain;
pub mod dynamics;
pub mod harness;
pub mod limit;
pub mod measure;
pub mod twoscale;
