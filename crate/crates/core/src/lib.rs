pub mod circuit;
pub mod pe;
pub mod pola;
pub mod tasks;
