//! KL divergence, summary tables and order-statistic percentile bounds.
//!
//! All divergences are in nats.

mod bounds;
mod divergence;
mod summary;

pub use bounds::{
    binomial_cdf, bound_probability, chernoff_bound_probability, exact_bound_probability,
    first_sufficient_samples, hoeffding_bound_probability, min_samples, order_statistic_percentile,
    BoundMethod, BoundQuery,
};
pub use divergence::{bernoulli_kl, kl_divergence};
pub use summary::{
    quantile_sorted, sorted_copy, summarize, z_score, QuantileRow, SummaryTable, SUMMARY_LEVELS,
};
