use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::volume::Dims;

/// Voxel adjacency: faces (6), faces+edges (18) or faces+edges+corners (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

    pub fn count(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Maximum number of axes an offset may move along.
    fn max_axes(self) -> usize {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// Neighbor offsets in lexicographic (dx, dy, dz) order.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(self.count() as usize);
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    let moved = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if moved >= 1 && moved <= self.max_axes() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.count()
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: u8 = s.trim().parse().map_err(|_| format!("invalid connectivity '{s}'"))?;
        Connectivity::try_from(n)
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.count())
    }
}

/// Precomputed neighbor walk over a fixed grid.
pub(crate) struct Neighbors {
    dims: Dims,
    offsets: Vec<[i64; 3]>,
}

impl Neighbors {
    pub(crate) fn new(dims: Dims, conn: Connectivity) -> Self {
        Neighbors { dims, offsets: conn.offsets() }
    }

    #[inline]
    pub(crate) fn for_each(&self, idx: usize, mut f: impl FnMut(usize)) {
        let p = self.dims.coords(idx);
        for o in &self.offsets {
            let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
            if self.dims.contains(q) {
                f(self.dims.index([q[0] as usize, q[1] as usize, q[2] as usize]));
            }
        }
    }
}

pub(crate) struct Fill {
    /// Visited voxels in breadth-first order.
    pub order: Vec<usize>,
    pub truncated: bool,
}

/// Breadth-first fill from `seed` over voxels where `accept` holds,
/// stopping after `cap` voxels. Neighbors are enqueued in lexicographic
/// offset order, so the visit order (and any truncation) is deterministic.
pub(crate) fn flood_fill(
    dims: Dims,
    seed: usize,
    conn: Connectivity,
    cap: Option<usize>,
    accept: impl Fn(usize) -> bool,
) -> Fill {
    let cap = cap.unwrap_or(usize::MAX);
    if !accept(seed) || cap == 0 {
        return Fill { order: Vec::new(), truncated: cap == 0 && accept(seed) };
    }
    let nb = Neighbors::new(dims, conn);
    let mut seen = vec![false; dims.len()];
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    seen[seed] = true;
    queue.push_back(seed);
    let mut truncated = false;
    while let Some(i) = queue.pop_front() {
        if order.len() == cap {
            truncated = true;
            break;
        }
        order.push(i);
        nb.for_each(i, |j| {
            if !seen[j] && accept(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        });
    }
    Fill { order, truncated }
}
