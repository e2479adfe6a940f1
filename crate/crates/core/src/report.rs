//! Submodel shapes chosen by each strategy across a grid of target
//! latencies, rendered as CSV or a markdown table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::SubmodelShape;
use crate::plan::PlanError;
use crate::sim::{simulate_strategy, Strategy, StrategyContext};
use crate::time::Micros;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCell {
    pub shape: SubmodelShape,
    pub makespan: Micros,
    pub degraded: bool,
}

impl ShapeCell {
    /// `depth x width`, with a trailing `*` when no shape met the target.
    pub fn label(&self) -> String {
        format!("{}x{}{}", self.shape.depth, self.shape.width, if self.degraded { "*" } else { "" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub strategy: Strategy,
    pub cells: Vec<ShapeCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGrid {
    pub targets: Vec<Micros>,
    pub rows: Vec<ShapeRow>,
}

pub fn shape_grid(
    ctx: &StrategyContext<'_>,
    strategies: &[Strategy],
    targets: &[Micros],
) -> Result<ShapeGrid, PlanError> {
    let rows = strategies
        .iter()
        .map(|&strategy| {
            let cells = targets
                .iter()
                .map(|&t| {
                    let out = simulate_strategy(strategy, ctx, t)?;
                    Ok(ShapeCell {
                        shape: out.shape,
                        makespan: out.makespan,
                        degraded: out.degraded,
                    })
                })
                .collect::<Result<_, PlanError>>()?;
            Ok(ShapeRow { strategy, cells })
        })
        .collect::<Result<_, PlanError>>()?;
    Ok(ShapeGrid {
        targets: targets.to_vec(),
        rows,
    })
}

fn ms_label(t: Micros) -> String {
    let ms = t.as_ms_f64();
    if ms.fract() == 0.0 {
        format!("{ms:.0}")
    } else {
        format!("{ms}")
    }
}

impl ShapeGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy");
        for &t in &self.targets {
            let _ = write!(s, ",T={}ms", ms_label(t));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.strategy.to_string());
            for c in &row.cells {
                let _ = write!(s, ",{}", c.label());
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| strategy |");
        for &t in &self.targets {
            let _ = write!(s, " T={} ms |", ms_label(t));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.targets.len()));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.strategy);
            for c in &row.cells {
                let _ = write!(s, " {} |", c.label());
            }
            s.push('\n');
        }
        if self.rows.iter().flat_map(|r| &r.cells).any(|c| c.degraded) {
            s.push_str("\n`*` no shape met the target; the minimum shape is shown.\n");
        }
        s
    }
}
