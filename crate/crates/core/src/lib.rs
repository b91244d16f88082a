pub mod control;
pub mod dynamics;
pub mod model;
pub mod noise;
pub mod par;
pub mod qops;
pub mod scenarios;
