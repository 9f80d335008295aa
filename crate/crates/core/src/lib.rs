pub mod autodiff;
pub mod body;
pub mod config;
pub mod gaussian;
pub mod losses;
pub mod math;
pub mod network;
pub mod render;
pub mod skinning;
pub mod train;
pub mod verify;
