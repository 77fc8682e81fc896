pub mod attribution;
pub mod bank;
pub mod features;
pub mod lp;
pub mod model;
pub mod narrator;
pub mod pipeline;
pub mod similarity;
pub mod surrogate;
