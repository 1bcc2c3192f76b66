mod corpus;
mod likelihood;
mod sample;
mod selftest;
mod sweep;
mod train;

pub use corpus::corpus;
pub use likelihood::likelihood;
pub use sample::sample;
pub use selftest::selftest;
pub use sweep::sweep;
pub use train::train;
