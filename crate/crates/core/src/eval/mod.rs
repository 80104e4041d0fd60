// SPDX-License-Identifier: MIT OR Apache-2.0

//! IOI evaluation harness.

pub mod composition;
pub mod metrics;
pub mod prompts;
pub mod report;
pub mod roles;

pub use composition::{composition_verification, default_claims, Claim, CompositionCell, RootSlot};
pub use metrics::{
    beta_sweep, evaluate, evaluate_pair, s2_suppression, token_metrics, BetaRow, ConfigReport, MetricReport,
    PromptCredit, SuppressionCredit, SuppressionReport,
};
pub use prompts::{check_pairing, gen_prompts, AbcPrompt, Fixtures, IoiPrompt, Order, PromptPair, Slots, FIXTURE_ENV};
pub use roles::{Role, RoleTable};
