pub mod bench;
pub mod check;
pub mod degrees;
pub mod golden;
pub mod toy;
