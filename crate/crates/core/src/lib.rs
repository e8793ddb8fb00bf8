pub mod cem;
pub mod dataset;
pub mod dtl;
pub mod error;
pub mod frenet;
pub mod lidar;
pub mod problem;
pub mod scenes;
pub mod sim;
pub mod solver;
pub mod trajectory;
