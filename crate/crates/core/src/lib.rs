pub mod contact;
pub mod dynamics;
pub mod limbs;
pub mod math;
pub mod propulsion;
pub mod guidance;
pub mod nav;
pub mod modes;
pub mod teleop;
pub mod power;
pub mod comms;
pub mod scenario;
pub mod replay;
pub mod harness;
