pub mod agent;
pub mod clock;
pub mod drone;
pub mod grid;
