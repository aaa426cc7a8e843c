pub mod analysis;
pub mod data;
pub mod fidelity;
pub mod model;
pub mod modify;
pub mod numerics;
pub mod selection;
