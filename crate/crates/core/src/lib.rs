pub mod algos;
pub mod analytics;
pub mod distmat;
pub mod fabric;
pub mod gen_io;
pub mod kernels;
pub mod model;
pub mod scalar;
