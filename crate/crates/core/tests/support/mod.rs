#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod probe;
pub mod vit_gradcheck;
