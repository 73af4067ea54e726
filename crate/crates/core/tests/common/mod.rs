#![allow(dead_code)]

pub mod gradcheck;
pub mod line;
pub mod tree;
