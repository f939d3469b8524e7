//! Quantile partial correlation (QPC) screening for high-dimensional
//! predictive quantile regression on time series.

pub mod error;
pub mod kernels;
pub mod macro_app;
pub mod qpc;
pub mod quantreg;
pub mod report;
pub mod screening;
pub mod simulation;

pub use error::{QpcError, Result};
pub use kernels::{Dataset, OlsFit};
pub use qpc::{qpc_screen_scores, sample_qpc, QpcValue};
pub use quantreg::{QrFit, QuantileLevel};
pub use screening::{screen, Algorithm, ScreenConfig, SelectionTrace};
