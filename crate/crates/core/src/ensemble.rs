//! Confidence-level decision table over the six per-scheme verdicts of a meme.
//!
//! Each meme carries an M-CoT, U-CoT and U-CoT+ verdict from two vision
//! sources. Exception rules are checked before the default, which marks the
//! meme positive whenever any U-CoT+ verdict is positive.

use serde::{Deserialize, Serialize};

use crate::corpus::{ConfidenceLevel, Label};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnsembleError {
    #[error("meme {meme_id} is undecidable: U-CoT+ verdicts missing for {missing} source(s)")]
    Undecidable { meme_id: String, missing: usize },
    #[error("meme {meme_id}: confidence level is unset for this context")]
    LevelUnset { meme_id: String },
}

pub type Pair = [Option<Label>; 2];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictMatrix {
    pub meme_id: String,
    pub mcot: Pair,
    pub ucot: Pair,
    pub ucotplus: Pair,
}

impl VerdictMatrix {
    pub fn new(meme_id: impl Into<String>) -> Self {
        Self {
            meme_id: meme_id.into(),
            mcot: [None; 2],
            ucot: [None; 2],
            ucotplus: [None; 2],
        }
    }

    pub fn is_decidable(&self) -> bool {
        self.ucotplus.iter().all(Option::is_some)
    }

    /// All four M-CoT and U-CoT entries negative, absent entries included.
    fn upstream_all_negative(&self) -> bool {
        self.mcot
            .iter()
            .chain(self.ucot.iter())
            .all(|v| !v.is_some_and(Label::is_positive))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleFired {
    DefaultPositive,
    HighAllNegative,
    MediumAllNegative,
    MediumSinglePositive,
    LowUpstreamAllNegative,
    /// Low level, upstream has a positive but both U-CoT+ verdicts are negative.
    LowAllNegative,
}

impl RuleFired {
    pub fn label(self) -> Label {
        match self {
            RuleFired::DefaultPositive => Label::Positive,
            _ => Label::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub meme_id: String,
    pub label: Label,
    pub rule_fired: RuleFired,
}

pub fn decide(matrix: &VerdictMatrix, level: ConfidenceLevel) -> Result<EnsembleDecision, EnsembleError> {
    let missing = matrix.ucotplus.iter().filter(|v| v.is_none()).count();
    if missing > 0 {
        return Err(EnsembleError::Undecidable {
            meme_id: matrix.meme_id.clone(),
            missing,
        });
    }
    let positives = matrix
        .ucotplus
        .iter()
        .filter(|v| v.is_some_and(Label::is_positive))
        .count();
    let rule = match level {
        ConfidenceLevel::High if positives == 0 => RuleFired::HighAllNegative,
        ConfidenceLevel::High => RuleFired::DefaultPositive,
        ConfidenceLevel::Medium if positives == 0 => RuleFired::MediumAllNegative,
        ConfidenceLevel::Medium if positives == 1 && matrix.upstream_all_negative() => {
            RuleFired::MediumSinglePositive
        }
        ConfidenceLevel::Medium => RuleFired::DefaultPositive,
        ConfidenceLevel::Low if matrix.upstream_all_negative() => RuleFired::LowUpstreamAllNegative,
        ConfidenceLevel::Low if positives == 0 => RuleFired::LowAllNegative,
        ConfidenceLevel::Low => RuleFired::DefaultPositive,
        ConfidenceLevel::Unset => {
            return Err(EnsembleError::LevelUnset {
                meme_id: matrix.meme_id.clone(),
            })
        }
    };
    Ok(EnsembleDecision {
        meme_id: matrix.meme_id.clone(),
        label: rule.label(),
        rule_fired: rule,
    })
}

fn pair_str(p: &Pair) -> String {
    p.iter()
        .map(|v| match v {
            Some(Label::Positive) => '1',
            Some(Label::Negative) => '0',
            None => '-',
        })
        .collect()
}

/// One audit-log line: `meme level mcot=.. ucot=.. ucotplus=.. rule label`.
pub fn audit_line(matrix: &VerdictMatrix, level: ConfidenceLevel, decision: &EnsembleDecision) -> String {
    format!(
        "{} level={:?} mcot={} ucot={} ucotplus={} rule={:?} label={:?}",
        matrix.meme_id,
        level,
        pair_str(&matrix.mcot),
        pair_str(&matrix.ucot),
        pair_str(&matrix.ucotplus),
        decision.rule_fired,
        decision.label
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(mcot: [u8; 2], ucot: [u8; 2], ucp: [u8; 2]) -> VerdictMatrix {
        let p = |x: [u8; 2]| x.map(|b| Some(Label::from_bool(b == 1)));
        VerdictMatrix {
            meme_id: "m".into(),
            mcot: p(mcot),
            ucot: p(ucot),
            ucotplus: p(ucp),
        }
    }

    #[test]
    fn table_rows() {
        let d = decide(&m([1, 1], [1, 1], [1, 0]), ConfidenceLevel::High).unwrap();
        assert_eq!(d.label, Label::Positive);
        let d = decide(&m([0, 0], [0, 0], [1, 0]), ConfidenceLevel::Medium).unwrap();
        assert_eq!(d.rule_fired, RuleFired::MediumSinglePositive);
        let d = decide(&m([0, 0], [0, 0], [1, 1]), ConfidenceLevel::Low).unwrap();
        assert_eq!(d.rule_fired, RuleFired::LowUpstreamAllNegative);
        let d = decide(&m([0, 0], [0, 1], [1, 0]), ConfidenceLevel::Medium).unwrap();
        assert_eq!(d.label, Label::Positive);
    }

    #[test]
    fn absent_upstream_counts_negative() {
        let mut x = VerdictMatrix::new("m");
        x.ucotplus = [Some(Label::Positive), Some(Label::Positive)];
        assert_eq!(
            decide(&x, ConfidenceLevel::Low).unwrap().rule_fired,
            RuleFired::LowUpstreamAllNegative
        );
        x.ucotplus[1] = None;
        assert_eq!(
            decide(&x, ConfidenceLevel::High),
            Err(EnsembleError::Undecidable {
                meme_id: "m".into(),
                missing: 1
            })
        );
    }

    #[test]
    fn unset_level_is_rejected() {
        assert!(matches!(
            decide(&m([0, 0], [0, 0], [0, 0]), ConfidenceLevel::Unset),
            Err(EnsembleError::LevelUnset { .. })
        ));
    }

    #[test]
    fn audit_line_shape() {
        let mut x = m([0, 1], [0, 0], [1, 0]);
        x.mcot[0] = None;
        let d = decide(&x, ConfidenceLevel::Medium).unwrap();
        assert_eq!(
            audit_line(&x, ConfidenceLevel::Medium, &d),
            "m level=Medium mcot=-1 ucot=00 ucotplus=10 rule=DefaultPositive label=Positive"
        );
    }
}
