#![allow(dead_code)]

pub mod eer_oracle;
pub mod gradient_suite;
pub mod masking;
