pub mod analyze;
pub mod bench;
pub mod eval;
pub mod inspect;
pub mod train;
