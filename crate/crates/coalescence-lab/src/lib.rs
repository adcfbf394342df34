pub mod analysis;
pub mod cli;
pub mod config;
pub mod fit;
pub mod hom;
pub mod mc;
pub mod numeric;
pub mod tagstream;
pub mod wavepacket;
