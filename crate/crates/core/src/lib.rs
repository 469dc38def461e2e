pub mod embedding;
pub mod eval;
pub mod expansion;
pub mod gateway;
pub mod http;
pub mod mmr;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod store;
