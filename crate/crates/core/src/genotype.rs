//! Architecture descriptors.
//!
//! A [`Genotype`] is the serializable description of a discovered model:
//! the skeleton (cells per stage, filters, stages), the search mode, and
//! per-cell lists of finalized shortcut patterns. Graphs are built from
//! genotypes deterministically; see [`crate::growth`].

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::CellKind;

pub const GENOTYPE_SCHEMA: &str = "fornas/genotype/v1";

/// Cell-search grows one shared pattern replicated across normal cells;
/// macro-search grows every normal cell independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Cell,
    Macro,
}

/// Skeleton family: 1-D dense cells for desk-scale runs, or 2-D
/// convolutional cells on tiny images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Toy,
    Image,
}

/// Unary operations eligible as shortcut candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutOp {
    // toy opset
    DenseRelu,
    DenseTanh,
    AvgPool1x3,
    // image opset
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    // shared
    Identity,
}

impl ShortcutOp {
    pub fn name(&self) -> &'static str {
        match self {
            ShortcutOp::DenseRelu => "dense_relu",
            ShortcutOp::DenseTanh => "dense_tanh",
            ShortcutOp::AvgPool1x3 => "avg_pool_1x3",
            ShortcutOp::SepConv3x3 => "sep_conv_3x3",
            ShortcutOp::SepConv5x5 => "sep_conv_5x5",
            ShortcutOp::DilConv3x3 => "dil_conv_3x3",
            ShortcutOp::DilConv5x5 => "dil_conv_5x5",
            ShortcutOp::MaxPool3x3 => "max_pool_3x3",
            ShortcutOp::AvgPool3x3 => "avg_pool_3x3",
            ShortcutOp::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpSetName {
    Toy,
    Image,
}

impl OpSetName {
    /// The ordered operation list; order defines the op index used in
    /// deterministic tie-breaks.
    pub fn ops(&self) -> &'static [ShortcutOp] {
        match self {
            OpSetName::Toy => &[
                ShortcutOp::DenseRelu,
                ShortcutOp::DenseTanh,
                ShortcutOp::Identity,
                ShortcutOp::AvgPool1x3,
            ],
            OpSetName::Image => &[
                ShortcutOp::SepConv3x3,
                ShortcutOp::SepConv5x5,
                ShortcutOp::DilConv3x3,
                ShortcutOp::DilConv5x5,
                ShortcutOp::MaxPool3x3,
                ShortcutOp::AvgPool3x3,
                ShortcutOp::Identity,
            ],
        }
    }
}

/// How selected shortcuts are merged into the model at finalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeVariant {
    /// Concatenation + 1x1 projection at every finalization (default).
    #[serde(rename = "cp-each")]
    CpEach,
    /// Weighted sum during search; concat-projection reserved for the
    /// final reported model.
    #[serde(rename = "cp-end")]
    CpEnd,
    /// Weighted sum always.
    #[serde(rename = "ws")]
    Ws,
}

/// One selected shortcut: source layer tag, target layer tag, operation,
/// and the selection weight it earned during weak learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDescriptor {
    pub source: String,
    pub target: String,
    pub op: ShortcutOp,
    pub alpha: f64,
}

/// A finalized weak learner: the top shortcuts in descending |alpha| plus
/// the merge rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDescriptor {
    pub terms: Vec<TermDescriptor>,
    pub merge: MergeVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDescriptor {
    pub kind: CellKind,
    pub stage: usize,
    #[serde(default)]
    pub patterns: Vec<PatternDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Normal cells per resolution stage.
    pub normal_per_stage: usize,
    /// Resolution stages (transition cells sit between adjacent stages).
    pub stages: usize,
    /// Initial filter/width count.
    pub filters: usize,
    pub arch: ArchKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub mode: SearchMode,
    pub skeleton: Skeleton,
    pub cells: Vec<CellDescriptor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeDoc {
    schema: String,
    genotype: Genotype,
}

impl Genotype {
    /// In cell mode all normal cells must carry the same pattern list.
    pub fn validate(&self) -> Result<()> {
        if self.mode == SearchMode::Cell {
            let mut shared: Option<&Vec<PatternDescriptor>> = None;
            for cell in self.cells.iter().filter(|c| c.kind == CellKind::Normal) {
                match shared {
                    None => shared = Some(&cell.patterns),
                    Some(p) if *p == cell.patterns => {}
                    Some(_) => {
                        return Err(CoreError::InvalidGraph(
                            "cell-mode genotype has diverging normal-cell descriptors".into(),
                        ))
                    }
                }
            }
        }
        for cell in self.cells.iter().filter(|c| c.kind == CellKind::Transition) {
            if !cell.patterns.is_empty() {
                return Err(CoreError::InvalidGraph(
                    "transition cells carry no grown patterns".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = GenotypeDoc {
            schema: GENOTYPE_SCHEMA.to_string(),
            genotype: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: GenotypeDoc = serde_json::from_str(s)?;
        if doc.schema != GENOTYPE_SCHEMA {
            return Err(CoreError::SchemaMismatch {
                expected: GENOTYPE_SCHEMA.to_string(),
                found: doc.schema,
            });
        }
        doc.genotype.validate()?;
        Ok(doc.genotype)
    }

    /// Total finalized patterns across all cells.
    pub fn pattern_count(&self) -> usize {
        self.cells.iter().map(|c| c.patterns.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opset_sizes_match_contract() {
        assert_eq!(OpSetName::Toy.ops().len(), 4);
        assert_eq!(OpSetName::Image.ops().len(), 7);
    }

    #[test]
    fn genotype_json_round_trip() {
        let g = Genotype {
            mode: SearchMode::Macro,
            skeleton: Skeleton {
                normal_per_stage: 1,
                stages: 1,
                filters: 8,
                arch: ArchKind::Toy,
            },
            cells: vec![CellDescriptor {
                kind: CellKind::Normal,
                stage: 0,
                patterns: vec![PatternDescriptor {
                    terms: vec![TermDescriptor {
                        source: "s0".into(),
                        target: "a0".into(),
                        op: ShortcutOp::DenseTanh,
                        alpha: 0.25,
                    }],
                    merge: MergeVariant::CpEach,
                }],
            }],
        };
        let s = g.to_json_string().unwrap();
        let g2 = Genotype::from_json_str(&s).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn cell_mode_divergence_rejected() {
        let cell = |patterns: Vec<PatternDescriptor>| CellDescriptor {
            kind: CellKind::Normal,
            stage: 0,
            patterns,
        };
        let pat = PatternDescriptor {
            terms: vec![],
            merge: MergeVariant::Ws,
        };
        let g = Genotype {
            mode: SearchMode::Cell,
            skeleton: Skeleton {
                normal_per_stage: 2,
                stages: 1,
                filters: 8,
                arch: ArchKind::Toy,
            },
            cells: vec![cell(vec![pat]), cell(vec![])],
        };
        assert!(g.validate().is_err());
    }
}
