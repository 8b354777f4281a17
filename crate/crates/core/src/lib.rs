//! Deterministic core of the evidence-synthesis engine.
//!
//! Everything here is pure computation over owned values: trial records and
//! pre-filtering, schema-constrained extraction, function-plan validation and
//! evaluation, eligibility penalties, penalty-to-weight transforms and
//! eligibility-weighted Mantel-Haenszel pooling. The crate needs `alloc` but
//! not `std`; file formats, network clients and the CLI live in the `evsynth`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod digest;
pub mod drugs;
pub mod eligibility;
pub mod eval;
pub mod extract;
pub mod meta;
pub mod plan;
pub mod text;
pub mod trial;
pub mod weights;

pub use drugs::{DrugEntry, DrugLibrary, DrugList, MembershipLibrary};
pub use eligibility::{CriterionKind, PenaltyRule, PenaltyScore, StructuredCriterion};
pub use eval::{evaluate_condition, evaluate_plan, ConditionOutcome, EvalPolicy, RuleVerdict};
pub use extract::{
    extract, reference_parse, ExpectedKind, ExtractedValue, ExtractionFailure, ExtractionRequest,
    Parser,
};
pub use meta::{ContingencyTable, PooledEstimate, StudyWeight};
pub use plan::{Comparison, Condition, FunctionPlan, LogicalOperator, PlanSet};
pub use trial::{Corpus, Field, TrialRecord};
pub use weights::{PmaxMode, WeightParams, WeightVector};
