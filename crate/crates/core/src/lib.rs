pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod seeding;
pub mod tas;
pub mod training;
pub mod vas;
