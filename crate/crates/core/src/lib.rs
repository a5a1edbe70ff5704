pub mod container;
pub mod corpus;
pub mod dsp;
pub mod dss;
pub mod eval;
pub mod init;
pub mod model;
pub mod nnet;
pub mod simuser;
