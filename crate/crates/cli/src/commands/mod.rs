pub mod bench;
pub mod compress;
pub mod decompress;
pub mod gen_synthetic;
pub mod similarity;
pub mod sweep;
pub mod train;
