//! FedAvg simulation: sites train locally on their own data, a server
//! averages the updates uniformly and redistributes the result.

pub mod aggregate;
pub mod config;
pub mod run;
pub mod scenario;
pub mod site;

pub use aggregate::{aggregate, aggregate_weighted, broadcast};
pub use config::{FederationConfig, InitStrategy, Jitter};
pub use run::{init_global, run_federation, run_local_only, EarlyStopping, FederationOutcome, GlobalModel, RoundLog, SiteRound};
pub use scenario::{bootstrap_seed, run_scenario, score_test_set, Scenario, ScenarioOptions, ScenarioOutcome, SiteInput, SiteResult};
pub use site::{local_round, LocalUpdate, SiteState};
