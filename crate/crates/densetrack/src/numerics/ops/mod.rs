pub mod attention;
pub mod conv;
pub mod dense;
pub mod pointwise;
pub mod sample;
