use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular schedule: alpha_bar at step {0} is zero")]
    Singularity(usize),

    #[error("schedule inconsistency: negative radicand {radicand} for step {t} -> {t_prev}")]
    ScheduleConsistency {
        t: usize,
        t_prev: usize,
        radicand: f64,
    },

    #[error("degenerate distribution: log-probability undefined at scale {0}")]
    DegenerateDistribution(f64),

    #[error("reward gradient unavailable for a blackbox reward model")]
    GradientUnavailable,

    #[error("gradient tape has {0} roots; exactly one scalar root is required")]
    NonScalarRoot(usize),

    #[error("gradient tape contract violated: {0}")]
    Contract(String),

    #[error("finite-difference oracle failure: {0}")]
    Oracle(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
