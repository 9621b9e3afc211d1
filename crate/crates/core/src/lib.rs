pub mod envs;
pub mod harness;
pub mod nn;
pub mod otp;
pub mod par;
pub mod robust_bellman;
pub mod safe_rl;
pub mod transport;
