pub mod bolza;
pub mod convex;
pub mod exchange;
pub mod harness;
pub mod lp;
pub mod purify;
pub mod systems;
pub mod trajectory;
pub mod variance;
