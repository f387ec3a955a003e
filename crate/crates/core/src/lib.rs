pub mod cli;
pub mod freeze;
pub mod ldp;
pub mod measure;
pub mod mfsolver;
pub mod model;
pub mod oracle;
pub mod particle;
pub mod special;
