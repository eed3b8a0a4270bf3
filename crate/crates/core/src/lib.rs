pub mod analytics;
pub mod consensus;
pub mod detector;
pub mod fusion;
pub mod ids;
pub mod ledger;
pub mod netsim;
pub mod par;
pub mod synth;
