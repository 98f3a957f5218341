pub mod autograd;
pub mod binio;
pub mod geometry;
pub mod gradcheck;
pub mod kv;
pub mod seeding;
pub mod world;
pub mod cqg;
pub mod encoders;
pub mod global;
pub mod local;
pub mod nn;
pub mod config;
pub mod loss;
pub mod model;
pub mod checkpoint;
pub mod metrics;
pub mod train;
pub mod eval;
pub mod manifest;
