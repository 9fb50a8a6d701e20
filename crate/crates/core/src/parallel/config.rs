use serde::{Deserialize, Serialize};

use crate::error::{Result, UcpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZeroStage {
    Z0,
    Z1,
    Z3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PpSchedule {
    Sequential1F1B,
    Interleaved(u32),
}

/// Two-dimensional tensor-parallel grid used for hybrid (row x column) matmul sharding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TpGrid {
    pub rows: u32,
    pub cols: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub tp_rank: u32,
    pub pp_rank: u32,
    pub dp_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub dp: u32,
    pub tp: u32,
    pub pp: u32,
    pub sp: u32,
    pub zero_stage: ZeroStage,
    pub pp_schedule: PpSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_grid: Option<TpGrid>,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig::new(1, 1, 1, ZeroStage::Z0)
    }
}

impl ParallelConfig {
    pub fn new(dp: u32, tp: u32, pp: u32, zero_stage: ZeroStage) -> Self {
        ParallelConfig {
            dp,
            tp,
            pp,
            sp: 1,
            zero_stage,
            pp_schedule: PpSchedule::Sequential1F1B,
            tp_grid: None,
        }
    }

    pub fn interleaved(mut self, v: u32) -> Self {
        self.pp_schedule = PpSchedule::Interleaved(v);
        self
    }

    pub fn with_tp_grid(mut self, rows: u32, cols: u32) -> Self {
        self.tp_grid = Some(TpGrid { rows, cols });
        self
    }

    /// Sequence parallelism replicates parameters, so it does not add ranks.
    pub fn world_size(&self) -> u32 {
        self.dp * self.tp * self.pp
    }

    /// Global rank: pipeline outermost, data-parallel innermost.
    pub fn rank_of(&self, p: Placement) -> u32 {
        (p.pp_rank * self.tp + p.tp_rank) * self.dp + p.dp_rank
    }

    pub fn placement_of(&self, rank: u32) -> Placement {
        Placement {
            dp_rank: rank % self.dp,
            tp_rank: (rank / self.dp) % self.tp,
            pp_rank: rank / (self.dp * self.tp),
        }
    }

    pub fn placements(&self) -> impl Iterator<Item = Placement> + '_ {
        (0..self.world_size()).map(|r| self.placement_of(r))
    }

    /// Index of the data-parallel group a placement belongs to.
    pub fn dp_group(&self, p: Placement) -> u32 {
        p.pp_rank * self.tp + p.tp_rank
    }

    /// Model-independent compatibility rules.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(UcpError::IncompatibleConfig(msg));
        if self.dp == 0 || self.tp == 0 || self.pp == 0 || self.sp == 0 {
            return bad(format!("degrees must be >= 1, got {}", self.short()));
        }
        if self.zero_stage == ZeroStage::Z3 && (self.tp != 1 || self.pp != 1) {
            return bad("ZeRO-3 requires tp = 1 and pp = 1".into());
        }
        if let PpSchedule::Interleaved(v) = self.pp_schedule {
            if v == 0 || self.pp < 2 {
                return bad(format!("interleaved schedule needs pp >= 2 and v >= 1 (pp={}, v={v})", self.pp));
            }
        }
        if let Some(g) = self.tp_grid {
            if g.rows == 0 || g.cols == 0 || g.rows * g.cols != self.tp {
                return bad(format!("tp grid {}x{} does not factor tp={}", g.rows, g.cols, self.tp));
            }
        }
        Ok(())
    }

    /// Compact `dp,tp,pp,sp,zero,schedule` form, the inverse of [`FromStr`](std::str::FromStr).
    pub fn short(&self) -> String {
        let zero = match self.zero_stage {
            ZeroStage::Z0 => "z0",
            ZeroStage::Z1 => "z1",
            ZeroStage::Z3 => "z3",
        };
        let sched = match self.pp_schedule {
            PpSchedule::Sequential1F1B => "seq".to_string(),
            PpSchedule::Interleaved(v) => format!("int{v}"),
        };
        let mut s = format!("{},{},{},{},{zero},{sched}", self.dp, self.tp, self.pp, self.sp);
        if let Some(g) = self.tp_grid {
            s.push_str(&format!(",grid{}x{}", g.rows, g.cols));
        }
        s
    }
}

impl std::fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.short())
    }
}

/// Parses `dp,tp,pp[,sp[,zero[,schedule[,gridRxC]]]]`, e.g. `2,2,2,1,z1,int2`.
impl std::str::FromStr for ParallelConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 7 {
            return Err(format!("expected dp,tp,pp[,sp,zero,schedule], got `{s}`"));
        }
        let num = |i: usize, what: &str| -> Result<u32, String> {
            fields[i].parse().map_err(|_| format!("bad {what} `{}`", fields[i]))
        };
        let mut cfg = ParallelConfig::new(num(0, "dp")?, num(1, "tp")?, num(2, "pp")?, ZeroStage::Z0);
        if fields.len() > 3 {
            cfg.sp = num(3, "sp")?;
        }
        if let Some(z) = fields.get(4) {
            cfg.zero_stage = match z.to_ascii_lowercase().trim_start_matches('z') {
                "0" => ZeroStage::Z0,
                "1" => ZeroStage::Z1,
                "3" => ZeroStage::Z3,
                _ => return Err(format!("bad zero stage `{z}` (z0, z1, z3)")),
            };
        }
        if let Some(sched) = fields.get(5) {
            let lower = sched.to_ascii_lowercase();
            cfg.pp_schedule = match lower.as_str() {
                "seq" | "1f1b" | "sequential" => PpSchedule::Sequential1F1B,
                other => {
                    let v = other
                        .strip_prefix("interleaved:")
                        .or_else(|| other.strip_prefix("int"))
                        .ok_or_else(|| format!("bad schedule `{sched}` (seq, int<v>)"))?;
                    PpSchedule::Interleaved(v.parse().map_err(|_| format!("bad interleave factor `{v}`"))?)
                }
            };
        }
        if let Some(grid) = fields.get(6) {
            let dims = grid
                .strip_prefix("grid")
                .and_then(|g| g.split_once('x'))
                .ok_or_else(|| format!("bad tp grid `{grid}` (gridRxC)"))?;
            let rows = dims.0.parse().map_err(|_| format!("bad grid rows in `{grid}`"))?;
            let cols = dims.1.parse().map_err(|_| format!("bad grid cols in `{grid}`"))?;
            cfg.tp_grid = Some(TpGrid { rows, cols });
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_layout_roundtrip() {
        let cfg = ParallelConfig::new(3, 2, 2, ZeroStage::Z1);
        for r in 0..cfg.world_size() {
            assert_eq!(cfg.rank_of(cfg.placement_of(r)), r);
        }
        let p = Placement {
            tp_rank: 1,
            pp_rank: 1,
            dp_rank: 2,
        };
        assert_eq!(cfg.rank_of(p), ((2 + 1) * 3) + 2);
    }

    #[test]
    fn zero3_needs_flat_model_parallelism() {
        assert!(ParallelConfig::new(4, 1, 1, ZeroStage::Z3).check().is_ok());
        assert!(ParallelConfig::new(2, 2, 1, ZeroStage::Z3).check().is_err());
        assert!(ParallelConfig::new(2, 1, 2, ZeroStage::Z3).check().is_err());
    }

    #[test]
    fn interleaving_needs_pipeline() {
        assert!(ParallelConfig::new(1, 1, 1, ZeroStage::Z0).interleaved(2).check().is_err());
        assert!(ParallelConfig::new(1, 1, 2, ZeroStage::Z0).interleaved(2).check().is_ok());
    }

    #[test]
    fn parse_short_form() {
        let cfg: ParallelConfig = "2,2,2,1,z1,int2".parse().unwrap();
        assert_eq!(cfg, ParallelConfig::new(2, 2, 2, ZeroStage::Z1).interleaved(2));
        assert_eq!(cfg.short().parse::<ParallelConfig>().unwrap(), cfg);
        let grid: ParallelConfig = "1,4,1,1,z0,seq,grid2x2".parse().unwrap();
        assert_eq!(grid.tp_grid, Some(TpGrid { rows: 2, cols: 2 }));
        assert_eq!("4,1,1".parse::<ParallelConfig>().unwrap(), ParallelConfig::new(4, 1, 1, ZeroStage::Z0));
        assert!("4,1".parse::<ParallelConfig>().is_err());
        assert!("1,1,1,1,z2".parse::<ParallelConfig>().is_err());
    }

    #[test]
    fn json_has_no_grid_key_by_default() {
        let json = serde_json::to_string(&ParallelConfig::default()).unwrap();
        assert!(!json.contains("tp_grid"));
        assert_eq!(
            json,
            r#"{"dp":1,"tp":1,"pp":1,"sp":1,"zero_stage":"Z0","pp_schedule":"Sequential1F1B"}"#
        );
    }
}
