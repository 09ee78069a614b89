pub mod contingency;
pub mod ingest;
pub mod optim;
pub mod zinb;
pub mod shrink;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod cli;
