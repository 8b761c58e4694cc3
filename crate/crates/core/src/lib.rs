pub mod hu;
pub mod instances;
pub mod qcost;
pub mod qemu;
pub mod rng;
pub mod rounding;
pub mod search;
pub mod symlin;
