//! Characterization of the limit point.

pub mod bounds;
pub mod kkt;
pub mod sweep;
pub mod verify;

pub use bounds::*;
pub use kkt::*;
pub use sweep::*;
pub use verify::*;
