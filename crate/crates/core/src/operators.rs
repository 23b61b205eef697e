//! Boolean operator identities and their learnable embeddings.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::init::{Init, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Number of Boolean experts.
pub const NUM_OPERATORS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    And = 0,
    Or = 1,
    Not = 2,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; NUM_OPERATORS] = [OperatorKind::And, OperatorKind::Or, OperatorKind::Not];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::And => "and",
            OperatorKind::Or => "or",
            OperatorKind::Not => "not",
        }
    }

    /// AND and OR act between pairs of scoped tokens; NOT acts on single tokens.
    pub fn is_pairwise(self) -> bool {
        !matches!(self, OperatorKind::Not)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(OperatorKind::And),
            "or" => Ok(OperatorKind::Or),
            "not" => Ok(OperatorKind::Not),
            other => Err(crate::Error::InvalidArgument(format!("unknown operator `{other}`"))),
        }
    }
}

/// `o' = W_o·o + b_o` with `W_o: [d_h, d_o]`, `o: [d_o]`, `b_o: [d_h]`.
pub fn project(g: &mut Graph, w_o: Var, b_o: Var, o: Var) -> Result<Var> {
    let d_o = g.value(o).len();
    let col = g.reshape(o, vec![d_o, 1])?;
    let y = g.matmul(w_o, col)?;
    let d_h = g.shape(y)[0];
    let y = g.reshape(y, vec![d_h])?;
    g.add(y, b_o)
}

/// One embedding row per operator plus the shared projection into hidden space.
#[derive(Clone, Debug)]
pub struct OperatorEmbeddingTable {
    pub embeddings: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub operator_dim: usize,
}

impl OperatorEmbeddingTable {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, prefix: &str, operator_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            embeddings: b.param(&format!("{prefix}.embeddings"), &[NUM_OPERATORS, operator_dim], Init::Uniform(0.1))?,
            w_o: b.param(&format!("{prefix}.w_o"), &[hidden, operator_dim], Init::Uniform(0.1))?,
            b_o: b.param(&format!("{prefix}.b_o"), &[hidden], Init::Uniform(0.1))?,
            operator_dim,
        })
    }

    /// The raw embedding `o` of `op`, shape `[d_o]`.
    pub fn embedding(&self, g: &mut Graph, store: &ParamStore, op: OperatorKind) -> Result<Var> {
        let table = g.param(store, self.embeddings);
        let row = g.narrow(table, 0, op.code(), 1)?;
        g.reshape(row, vec![self.operator_dim])
    }

    /// The projected embedding `o'`, shape `[d_h]`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, op: OperatorKind) -> Result<Var> {
        let o = self.embedding(g, store, op)?;
        let w = g.param(store, self.w_o);
        let b = g.param(store, self.b_o);
        project(g, w, b, o)
    }
}
