//! HTTP service and command-line front end for the contextual latent space model.

pub mod api;
pub mod cli;
pub mod commands;
pub mod served;
