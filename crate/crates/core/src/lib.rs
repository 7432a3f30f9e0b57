//! Weak-supervision construction of preconditioned visual-language inference
//! (PVLI) data.
//!
//! The crate turns image-caption corpora and precondition/action statement
//! banks into labeled `(hypothesis, image, allow|prevent)` instances using
//! three grounding strategies:
//!
//! * **Extraction from captions** ([`lf_engine`]): conjunction patterns such as
//!   `{A} unless {P}` pull actions and preconditions straight out of captions.
//! * **Caption querying** ([`embed_index`] + [`rank_fusion`]): a statement is
//!   matched against captions in several embedding spaces and the per-space
//!   rankings are fused with Copeland's method.
//! * **Image querying** ([`image_query`]): the statement itself is sent to an
//!   image search provider.
//!
//! [`assembly`] merges the strategies into one dataset, draws splits and
//! scores prediction files, and [`verification`] runs the three-vote human
//! check that distills a clean test set.

pub mod assembly;
pub mod embed_index;
pub mod image_query;
pub mod io;
pub mod lf_engine;
pub mod normalize;
pub mod pipeline;
pub mod rank_fusion;
pub mod synth;
pub mod verification;

use serde::{Deserialize, Serialize};
use std::fmt;

pub use assembly::{PvliInstance, Split, Strategy};
pub use embed_index::{EncoderSpace, Metric, Ranking, VectorIndex};
pub use lf_engine::{ExtractedInstance, LabelingFunction, LfTable};
pub use normalize::{Caption, Statement, StatementKind};
pub use rank_fusion::FusionResult;

/// Weak label of an instance: does the precondition allow or prevent the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Allow,
    Prevent,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Allow => "allow",
            Label::Prevent => "prevent",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "allow" => Ok(Label::Allow),
            "prevent" => Ok(Label::Prevent),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}
