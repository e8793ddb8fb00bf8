use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("centerline needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint {0} coincides with its predecessor")]
    DuplicateWaypoint(usize),
    #[error("non-finite waypoint coordinate")]
    NonFinite,
    #[error(
        "pose (s={s:.3}, d={d:.3}) outside centerline extent [0, {length:.3}] or capture band"
    )]
    OutOfRange { s: f64, d: f64, length: f64 },
    #[error("speed below curvature floor at step {step}")]
    SingularCurvature { step: usize },
    #[error("derivative series lengths differ")]
    LengthMismatch,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("invalid basis spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("basis matrix is rank deficient (pivot {pivot:e})")]
    RankDeficient { pivot: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("solver diverged (non-finite iterate) at iteration {iteration}")]
    Divergence { iteration: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CemError {
    #[error("invalid CEM configuration: {0}")]
    InvalidConfig(String),
    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("singular smoothness matrix")]
    SingularSmoothness,
    #[error(
        "planning failed: {attempted} samples, {failed} solver failures, {infeasible} infeasible"
    )]
    PlanningFailure {
        attempted: usize,
        failed: usize,
        infeasible: usize,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("simulation log is empty")]
    EmptyLog,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Planning(#[from] CemError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LidarError {
    #[error("point at the sensor origin has no direction")]
    DegeneratePoint,
    #[error("invalid lidar config: {0}")]
    InvalidConfig(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("pixel ({x}, {y}) with depth {depth} is not a valid projection target")]
    InvalidPixel { x: usize, y: usize, depth: f64 },
    #[error("grid dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad image file: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Lidar(#[from] LidarError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DtlError {
    #[error("invalid triplet loss parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("fixture line {line}: {message}")]
    Fixture { line: usize, message: String },
}
