//! Incremental generation of table instances.
//!
//! A run (1) carries over cells of unchanged builders from the previous
//! materialized instance, (2) left-joins the generator's row keys onto them,
//! then (3) executes each builder, in dependency order, on its EMPTY cells
//! only. Carried cells are kept only when the digest of their resolved
//! inputs matches the one recorded when they were computed.

mod executor;
mod http;
mod mock;
mod plan;
mod process;
mod run;

pub use executor::{CallContext, Executor, ExecutorRegistry, Request, Response};
pub use http::HttpExecutor;
pub use mock::{MockCall, MockExecutor, MockFn, MOCK_DELAY_ENV, MOCK_LOG_ENV};
pub use plan::{
    builder_order, dependency_tables, latest_active, load_builders, pin_dependencies, pin_key, plan_generation,
    previous_instance, GenerationPlan, PlanInputs,
};
pub use process::ProcessExecutor;
pub use run::{resolve_args, run_generation, EngineContext, GenerationOutput};
